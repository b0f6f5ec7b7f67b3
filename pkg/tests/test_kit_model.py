import numpy as np
import pytest

from kitpose import numerics as nx
from kitpose.errors import ConfigError, ShapeError
from kitpose.kit_model import (
    KitPoseModel,
    ModelConfig,
    attention_layer,
    init_params,
    keypoint_feature_head,
    kit_forward,
    mini_backbone,
    tokenize_channels,
)
from kitpose.prompts import PromptConfig


def micro_config(**kwargs) -> ModelConfig:
    settings = dict(
        n_keypoints=5, embed_dim=16, n_layers=1, heatmap_size=(8, 8),
        backbone_channels=6, backbone_width=4, prompt=PromptConfig(n_prompts=2),
    )
    settings.update(kwargs)
    return ModelConfig(**settings)


def images(batch=2, seed=0):
    return np.random.default_rng(seed).random((batch, 3, 32, 32))


def test_forward_shapes_and_attention_rows():
    model = KitPoseModel(micro_config(n_layers=2), seed=0)
    out = model(images())
    assert out.heatmaps.shape == (2, 5, 8, 8)
    assert out.f_k.shape == (2, 5, 8, 8)
    assert out.f_i.shape == (2, 6, 8, 8)
    assert len(out.attn_maps) == 2
    for attn in out.attn_maps:
        assert attn.shape == (2, 7, 7)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(attn >= 0)
    assert len(out.clusters) == 2


def test_single_image_forward():
    model = KitPoseModel(micro_config(), seed=0).eval()
    out = model(images(batch=1)[0])
    assert out.heatmaps.shape == (5, 8, 8)
    assert out.attn_maps[0].shape == (7, 7)


def test_without_encoder_there_are_no_prompts():
    cfg = micro_config(n_layers=0)
    params, buffers = init_params(cfg)
    assert not any(k.startswith(("kit.", "nanoblock.")) for k in params)
    assert buffers == {}
    out = KitPoseModel(cfg)(images())
    assert out.attn_maps == []
    assert out.clusters is None


def test_prompts_switched_off():
    out = KitPoseModel(micro_config(use_prompts=False))(images())
    assert out.attn_maps[0].shape == (2, 5, 5)
    assert out.clusters is None


@pytest.mark.parametrize("norm", ["pre", "post", "none"])
def test_attention_layer_is_permutation_equivariant(norm):
    cfg = micro_config(norm=norm)
    params, _ = init_params(cfg, seed=1)
    tokens = nx.Tensor(np.random.default_rng(2).standard_normal((7, 16)))
    perm = np.array([3, 0, 6, 1, 5, 2, 4])

    out, attn = attention_layer(tokens, params, "kit.0", norm=norm)
    out_p, attn_p = attention_layer(nx.Tensor(tokens.data[perm]), params, "kit.0", norm=norm)
    np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-12)
    np.testing.assert_allclose(attn_p.data, attn.data[np.ix_(perm, perm)], atol=1e-12)


def test_attention_layer_rejects_unknown_norm():
    params, _ = init_params(micro_config())
    with pytest.raises(ConfigError):
        attention_layer(nx.Tensor(np.zeros((7, 16))), params, "kit.0", norm="rms")


def test_tokenize_projects_each_channel():
    f_k = np.arange(2 * 2 * 3, dtype=np.float64).reshape(2, 2, 3)
    proj = np.eye(6)[:, :2]
    np.testing.assert_array_equal(tokenize_channels(nx.Tensor(f_k), nx.Tensor(proj)).data, [[0, 1], [6, 7]])
    with pytest.raises(ShapeError):
        tokenize_channels(nx.Tensor(f_k), nx.Tensor(np.eye(4)))


def test_config_validation():
    with pytest.raises(ConfigError):
        micro_config(prompt=PromptConfig(n_prompts=6))
    micro_config(n_layers=0, prompt=PromptConfig(n_prompts=6))
    with pytest.raises(ConfigError):
        micro_config(norm="batch")
    with pytest.raises(ConfigError):
        micro_config(n_layers=-1)
    cfg = micro_config(heatmap_size=[8, 6])
    assert cfg.heatmap_size == (8, 6)
    assert cfg.image_size == (32, 24)
    assert cfg.tag == "E1C16"


def test_image_size_must_match():
    model = KitPoseModel(micro_config())
    with pytest.raises(ShapeError):
        model(np.zeros((1, 3, 28, 32)))


def test_eval_forward_is_deterministic():
    model = KitPoseModel(micro_config(), seed=3).eval()
    a = model(images()).heatmaps.data
    b = model(images()).heatmaps.data
    np.testing.assert_array_equal(a, b)


def test_update_stats_flag_leaves_buffers_alone():
    model = KitPoseModel(micro_config()).train()
    before = {k: v.copy() for k, v in model.buffers.items()}
    model(images(), update_stats=False)
    for k, v in model.buffers.items():
        np.testing.assert_array_equal(v, before[k])
    model(images())
    assert any(not np.array_equal(v, before[k]) for k, v in model.buffers.items())


def test_state_round_trip_is_bit_identical():
    source = KitPoseModel(micro_config(), seed=0)
    source(images())
    source.eval()
    target = KitPoseModel(micro_config(), seed=9).eval()
    target.load_state_arrays(source.state_arrays())
    np.testing.assert_array_equal(target(images()).heatmaps.data, source(images()).heatmaps.data)


def test_state_mismatch_raises():
    model = KitPoseModel(micro_config())
    other = KitPoseModel(micro_config(n_layers=2))
    with pytest.raises(ShapeError):
        model.load_state_arrays(other.state_arrays())


def test_frozen_biases_bypass_clustering():
    model = KitPoseModel(micro_config()).eval()
    out = model(images(), frozen_biases=np.zeros((2, 2, 16)))
    assert out.clusters is None
    assert out.heatmaps.shape == (2, 5, 8, 8)


def test_backward_reaches_every_parameter():
    model = KitPoseModel(micro_config(), seed=4)
    out = model(images())
    readout = np.random.default_rng(5).standard_normal(out.heatmaps.shape)
    nx.backward((out.heatmaps * readout).sum() + out.f_k.sum())
    silent = [name for name, p in model.params.items() if not np.any(p.grad)]
    assert silent == []


def test_stages_compose_like_the_model():
    cfg = micro_config()
    params, buffers = init_params(cfg, seed=3)
    image = nx.Tensor(images(batch=1)[0])
    f_i = mini_backbone(image, params)
    assert f_i.shape == (6, 8, 8)
    f_k = keypoint_feature_head(f_i, params)
    assert f_k.shape == (5, 8, 8)

    out = kit_forward(f_i, cfg, params, buffers=buffers, training=False,
                      frozen_biases=np.zeros((cfg.n_prompts, cfg.embed_dim)))
    assert out.clusters is None
    assert out.heatmaps.shape == (5, 8, 8)
    assert out.attn_maps[0].shape == (7, 7)
    np.testing.assert_array_equal(out.f_k.data, f_k.data)

    with pytest.raises(ShapeError):
        mini_backbone(nx.Tensor(np.zeros((3, 30, 32))), params)
    with pytest.raises(ShapeError):
        kit_forward(nx.Tensor(np.zeros((6, 4, 4))), cfg, params)


@pytest.mark.parametrize("mode", ["no_prompts", "frozen_prompts", "clustered_prompts"])
def test_model_is_equivariant_to_keypoint_order(mode):
    cfg = micro_config(use_prompts=mode != "no_prompts")
    params, buffers = init_params(cfg, seed=6)
    f_i = nx.Tensor(np.random.default_rng(7).standard_normal((2, 6, 8, 8)))
    frozen = np.random.default_rng(8).standard_normal((2, 2, 16)) if mode == "frozen_prompts" else None
    perm = np.array([3, 0, 4, 1, 2])

    permuted = dict(params)
    for name in ("head.keypoint.weight", "head.keypoint.bias", "tokenize.pos_embed"):
        permuted[name] = nx.parameter(params[name].data[perm])

    out = kit_forward(f_i, cfg, params, buffers=buffers, frozen_biases=frozen)
    out_p = kit_forward(f_i, cfg, permuted, buffers=buffers, frozen_biases=frozen)
    np.testing.assert_allclose(out_p.f_k.data, out.f_k.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(out_p.heatmaps.data, out.heatmaps.data[:, perm], atol=1e-9)


def test_attention_rows_sum_to_one_over_many_batches():
    cfg = micro_config()
    params, _ = init_params(cfg, seed=2)
    rng = np.random.default_rng(10)
    for _ in range(200):
        tokens = nx.Tensor(rng.standard_normal((3, 7, 16)) * rng.uniform(0.1, 10.0))
        _, attn = attention_layer(tokens, params, "kit.0", norm=cfg.norm)
        assert attn.shape == (3, 7, 7)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(attn.data >= 0)
