import json

import numpy as np
import pytest

from kitpose import numerics as nx
from kitpose.checkpoint import (
    load_checkpoint,
    restore_model,
    save_checkpoint,
    validate_checkpoint_compat,
)
from kitpose.config import (
    TrainConfig,
    config_hash,
    from_dict,
    load_config,
    to_dict,
    validate_config,
    write_resolved_config,
)
from kitpose.errors import CheckpointError, ConfigError, NumericalError
from kitpose.kit_model import KitPoseModel
from kitpose.losses import CONSTRAINED, WeightStrategy, constrained_loss
from kitpose.optim import Adam, MultiStepLR

from conftest import CONFIG_DIR

DESK = CONFIG_DIR / "desk.toml"


# ----- configuration -----

def test_desk_preset():
    cfg = load_config(DESK, env={})
    assert cfg.model.tag == "E2C128"
    assert cfg.model.n_prompts == 4
    assert cfg.model.image_size == (128, 128)
    assert cfg.loss.lam == 0.01
    assert cfg.schedule.milestones == [20, 28]
    assert cfg.data.train_count == 500 and cfg.data.val_count == 100


@pytest.mark.parametrize("name", ["desk.toml", "full.toml", "micro.toml", "ablation.toml"])
def test_shipped_configs_validate(name):
    cfg = load_config(CONFIG_DIR / name, env={})
    assert validate_config(cfg) == (True, "")


def test_full_preset_turns_on_cutmix():
    assert load_config(CONFIG_DIR / "full.toml", env={}).augment.cutmix_prob == 0.5
    assert load_config(DESK, env={}).augment.cutmix_prob == 0.0


def test_overrides_parse_toml_literals():
    cfg = load_config(DESK, overrides=[
        "model.n_layers=0", "model.norm=post", "model.use_prompts=false",
        "loss.lambda=0.5", "model.heatmap_size=[16, 12]", "model.prompt.metric=cosine",
    ], env={})
    assert cfg.model.n_layers == 0
    assert cfg.model.norm == "post"
    assert cfg.model.use_prompts is False
    assert cfg.loss.lam == 0.5
    assert cfg.model.heatmap_size == (16, 12)
    assert cfg.model.prompt.metric == "cosine"


def test_unknown_keys_are_errors():
    with pytest.raises(ConfigError):
        load_config(DESK, overrides=["loss.focal_alpha=1"], env={})
    with pytest.raises(ConfigError):
        load_config(DESK, overrides=["bogus=1"], env={})
    with pytest.raises(ConfigError):
        load_config(DESK, overrides=["no_equals_sign"], env={})
    with pytest.raises(ConfigError):
        from_dict({"model": 3})


def test_seed_from_environment():
    assert load_config(DESK, env={"KITPOSE_SEED": "7"}).seed == 7
    with pytest.raises(ConfigError):
        load_config(DESK, env={"KITPOSE_SEED": "seven"})


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml", env={})
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\nn_layers = 2\n")
    with pytest.raises(ConfigError):
        load_config(bad, env={})


@pytest.mark.parametrize("override", [
    "schedule.milestones=[28, 20]",
    "schedule.milestones=[40]",
    "schedule.epochs=0",
    "precision=float16",
    "loss.weighting=focal",
    "loss.gamma=-1.0",
    "loss.laplacian_size=4",
    "loss.keypoint_weights=[1.0, 2.0]",
    "optim.lr=0.0",
    "data.source=coco_json",
    "eval.decode_mode=soft_argmax",
    "batch_size=0",
    "augment.half_body_part_min=1",
])
def test_invalid_values_are_rejected(override):
    with pytest.raises(ConfigError):
        load_config(DESK, overrides=[override], env={})


def test_validate_reports_reason():
    cfg = TrainConfig()
    cfg.schedule.milestones = [5, 3]
    ok, message = validate_config(cfg)
    assert not ok
    assert "milestones" in message


def test_dict_round_trip_and_hash(tmp_path):
    cfg = load_config(DESK, overrides=["loss.lambda=0.2"], env={})
    data = to_dict(cfg)
    assert data["loss"]["lambda"] == 0.2
    assert "lam" not in data["loss"]
    assert "keypoint_weights" not in data["loss"]
    assert from_dict(data) == cfg

    digest = write_resolved_config(cfg, tmp_path)
    written = json.loads((tmp_path / "resolved_config.json").read_text())
    assert from_dict(written) == cfg
    assert digest == config_hash(cfg) == config_hash(from_dict(written))
    assert config_hash(load_config(DESK, env={})) != digest


# ----- optimisation -----

def test_multistep_schedule():
    p = nx.parameter(np.ones(2))
    scheduler = MultiStepLR(Adam({"p": p}, lr=5e-4), [20, 28], factor=0.1)
    assert scheduler.lr_at(0) == pytest.approx(5e-4)
    assert scheduler.lr_at(19) == pytest.approx(5e-4)
    assert scheduler.lr_at(20) == pytest.approx(5e-5)
    assert scheduler.lr_at(27) == pytest.approx(5e-5)
    assert scheduler.lr_at(28) == pytest.approx(5e-6)
    assert scheduler.set_epoch(31) == pytest.approx(5e-6)
    assert scheduler.optimizer.lr == pytest.approx(5e-6)
    with pytest.raises(ConfigError):
        MultiStepLR(scheduler.optimizer, [10, 10])


def test_adam_first_step_moves_by_lr():
    p = nx.parameter(np.array([1.0, -2.0]))
    opt = Adam({"p": p}, lr=0.01, weight_decay=0.0)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-8)


def test_adam_weight_decay_is_added_to_the_gradient():
    p = nx.parameter(np.array([2.0]))
    opt = Adam({"p": p}, lr=0.1, weight_decay=0.5)
    opt.zero_grad()
    opt.step()
    assert p.data[0] == pytest.approx(1.9, abs=1e-6)


def test_adam_skips_weight_decay_for_named_parameters():
    p = nx.parameter(np.array([2.0]))
    w = nx.parameter(np.array([2.0]))
    opt = Adam({"p": p, "w": w}, lr=0.1, weight_decay=0.5, no_decay=["w"])
    opt.zero_grad()
    opt.step()
    assert p.data[0] == pytest.approx(1.9, abs=1e-6)
    assert w.data[0] == 2.0
    with pytest.raises(ConfigError):
        Adam({"p": p}, no_decay=["w"])


def test_learned_keypoint_weight_settles_at_its_stationary_point():
    strategy = WeightStrategy.create(CONSTRAINED, 1, lam=0.1)
    pred, target, vis = nx.Tensor(np.zeros((1, 4, 4))), np.full((1, 4, 4), 0.2), np.ones(1)
    params = strategy.parameters()
    opt = Adam(params, lr=0.05, weight_decay=0.1, no_decay=list(params))
    for lr in (0.05, 0.005, 0.0005):
        opt.lr = lr
        for _ in range(600):
            opt.zero_grad()
            nx.backward(constrained_loss(pred, target, strategy, vis))
            opt.step()
    assert strategy.learnable_w.data[0] == pytest.approx(1.0 - 0.04 / (2 * 0.1), abs=5e-3)


def test_adam_rejects_non_finite_gradients():
    p = nx.parameter(np.array([1.0]))
    opt = Adam({"p": p})
    p.grad = np.array([np.nan])
    with pytest.raises(NumericalError):
        opt.step()
    with pytest.raises(ConfigError):
        Adam({"p": p}, lr=0.0)


def test_adam_state_resumes_identically():
    rng = np.random.default_rng(0)
    grads = [rng.standard_normal(3) for _ in range(4)]

    def run(resume_after=None):
        p = nx.parameter(np.ones(3))
        opt = Adam({"p": p}, lr=0.05)
        for i, g in enumerate(grads):
            if resume_after is not None and i == resume_after:
                state, value = opt.state_arrays(), p.data.copy()
                p = nx.parameter(value)
                opt = Adam({"p": p}, lr=0.05)
                opt.load_state_arrays(state)
            p.grad = g.copy()
            opt.step()
        return p.data

    np.testing.assert_array_equal(run(), run(resume_after=2))


# ----- checkpoints -----

def _save(model, path, cfg, epoch=3):
    save_checkpoint(path, model.state_arrays(), to_dict(cfg), epoch, cfg.seed, "float64", {"PCK05": 0.5})


def test_checkpoint_round_trip_is_bit_identical(tmp_path, micro_config):
    model = KitPoseModel(micro_config.model, seed=0)
    model(np.random.default_rng(0).random((2, 3, 32, 32)))
    _save(model, tmp_path / "a.ckpt", micro_config)
    _save(model, tmp_path / "b.ckpt", micro_config)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    ckpt = load_checkpoint(tmp_path / "a.ckpt")
    assert ckpt.epoch == 3
    assert ckpt.manifest["metrics"] == {"PCK05": 0.5}
    for name, value in model.state_arrays().items():
        np.testing.assert_array_equal(ckpt.arrays[name], value)

    restored = restore_model(ckpt)
    images = np.random.default_rng(1).random((2, 3, 32, 32))
    np.testing.assert_array_equal(restored(images).heatmaps.data, model.eval()(images).heatmaps.data)


def test_checkpoint_compatibility(tmp_path, micro_config):
    _save(KitPoseModel(micro_config.model), tmp_path / "m.ckpt", micro_config)
    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    assert validate_checkpoint_compat(ckpt, 5, [(1, 2)]) == (True, "")
    ok, message = validate_checkpoint_compat(ckpt, 17)
    assert not ok and "17" in message
    ok, _ = validate_checkpoint_compat(ckpt, 5, [(1, 7)])
    assert not ok


def test_damaged_checkpoints(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip archive")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
