import numpy as np
import pytest

from kitpose import losses
from kitpose import numerics as nx
from kitpose.errors import ConfigError, ShapeError
from kitpose.heatmap_codec import encode_targets


def constant_maps(values, size=2):
    return np.stack([np.full((size, size), v) for v in values])


def test_weighted_mse_hand_example():
    pred = nx.parameter(np.zeros((2, 2, 2)))
    target = constant_maps([1.0, 1.0])
    loss = losses.weighted_mse(pred, target, w=[1.0, 2.0], vis_mask=np.array([1, 1]))
    assert loss.item() == pytest.approx(1.5)


def test_invisible_keypoints_do_not_contribute():
    pred = nx.parameter(np.zeros((2, 2, 2)))
    target = constant_maps([1.0, 7.0])
    loss = losses.weighted_mse(pred, target, w=[1.0, 1.0], vis_mask=np.array([1, 0]))
    assert loss.item() == pytest.approx(1.0)
    nx.backward(loss)
    assert not np.any(pred.grad[1])


def test_all_invisible_loss_is_zero():
    pred = nx.parameter(np.ones((3, 4, 4)))
    strategy = losses.WeightStrategy.create(losses.ADAPTIVE, 3)
    loss = losses.heatmap_loss(pred, np.zeros((3, 4, 4)), strategy, np.zeros(3))
    assert loss.item() == 0.0


def test_constrained_loss_and_weight_gradient():
    strategy = losses.WeightStrategy.create(losses.CONSTRAINED, 2, lam=0.5)
    pred = nx.parameter(np.zeros((2, 2, 2)))
    target = constant_maps([1.0, 2.0])
    loss = losses.constrained_loss(pred, target, strategy, np.array([1, 1]))
    assert loss.item() == pytest.approx(1.0 + 4.0)

    nx.backward(loss)
    np.testing.assert_allclose(strategy.learnable_w.grad, [1.0, 4.0])

    strategy.learnable_w.assign(np.array([2.0, 1.0]))
    loss = losses.constrained_loss(pred, target, strategy, np.array([1, 1]))
    assert loss.item() == pytest.approx(2.0 + 4.0 + 0.5)


def test_constrained_needs_learnable_weights():
    strategy = losses.WeightStrategy.create(losses.HAND_CRAFTED, 2)
    with pytest.raises(ConfigError):
        losses.constrained_loss(nx.parameter(np.zeros((2, 2, 2))), np.zeros((2, 2, 2)), strategy, np.ones(2))


def test_adaptive_hand_example():
    pred = nx.parameter(np.zeros((1, 3, 3)))
    loss = losses.adaptive_mse(pred, np.full((1, 3, 3), 0.5), gamma=2.0, vis_mask=np.ones(1))
    assert loss.item() == pytest.approx(0.25 * 0.25)


def test_adaptive_with_gamma_zero_is_plain_mse():
    rng = np.random.default_rng(0)
    pred = nx.parameter(rng.random((3, 5, 5)))
    target = rng.random((3, 5, 5))
    vis = np.array([1, 0, 1])
    adaptive = losses.adaptive_mse(pred, target, gamma=0.0, vis_mask=vis)
    plain = losses.weighted_mse(pred, target, np.ones(3), vis)
    assert adaptive.item() == pytest.approx(plain.item())


def test_adaptive_weights_are_not_a_gradient_path():
    rng = np.random.default_rng(1)
    pred = nx.parameter(rng.random((2, 4, 4)))
    target = rng.random((2, 4, 4))
    vis = np.ones(2)
    frozen = losses.adaptive_weight_map(pred, target, 2.0).data

    loss = losses.adaptive_mse(pred, target, 2.0, vis)
    nx.backward(loss)
    expected = frozen * 2.0 * (pred.data - target) / (vis.sum() * 16)
    np.testing.assert_allclose(pred.grad, expected, rtol=1e-10)

    def f():
        return losses.adaptive_mse(pred, target, 2.0, vis, weights=nx.Tensor(frozen))

    numeric = nx.finite_diff_gradient(f, [pred])[0]
    assert nx.relative_error(pred.grad, numeric) < 1e-6


def test_differentiable_adaptive_weights_change_gradient():
    rng = np.random.default_rng(2)
    target = rng.random((1, 3, 3))
    data = rng.random((1, 3, 3))
    grads = []
    for differentiable in (False, True):
        pred = nx.parameter(data.copy())
        nx.backward(losses.adaptive_mse(pred, target, 2.0, np.ones(1), differentiable=differentiable))
        grads.append(pred.grad)
    np.testing.assert_allclose(grads[1], 2.0 * grads[0])


def test_negative_gamma_rejected():
    with pytest.raises(ConfigError):
        losses.WeightStrategy.create(losses.ADAPTIVE, 2, gamma=-1.0)
    with pytest.raises(ConfigError):
        losses.WeightStrategy.create("focal", 2)
    with pytest.raises(ConfigError):
        losses.WeightStrategy.create(losses.HAND_CRAFTED, 3, w=[1.0, 2.0])


def test_strategy_parameters():
    assert losses.WeightStrategy.create(losses.ADAPTIVE, 4).parameters() == {}
    params = losses.WeightStrategy.create(losses.CONSTRAINED, 4).parameters()
    assert list(params) == [losses.LEARNABLE_W_NAME]
    np.testing.assert_array_equal(params[losses.LEARNABLE_W_NAME].data, np.ones(4))


def make_target(n=2, size=8):
    kpts = np.array([[2.0 + i, 3.0 + i, 1.0] for i in range(n)])
    return encode_targets(kpts, size, size, sigma=1.0, blur_kernel=5, blur_sigma=1.0)


def test_ghrl_vanishes_at_target():
    target = make_target()
    f_k = nx.parameter(target.base.copy())
    loss = losses.ghrl(f_k, target, losses.GhrlConfig(), np.ones(2))
    assert loss.item() == 0.0


def test_ghrl_elementwise_formula():
    target = make_target()
    rng = np.random.default_rng(3)
    f = rng.random(target.base.shape)
    H, Hl, Hg = target.base, target.sharp, target.smooth
    per_pixel = np.abs(f - H) * (np.abs(Hl - f) * (f - Hl) ** 2 + np.abs(Hg - f) * (f - Hg) ** 2)

    mean = losses.ghrl(nx.parameter(f), target, losses.GhrlConfig(beta=1.0), np.ones(2))
    assert mean.item() == pytest.approx(per_pixel.mean())

    total = losses.ghrl(nx.parameter(f), target, losses.GhrlConfig(reduction="sum"), np.array([0, 1]))
    assert total.item() == pytest.approx(per_pixel[1].sum())


def test_ghrl_beta_zero_drops_leading_factor():
    target = make_target()
    f = target.base + 0.1
    mods = losses.ghrl_modulation(f, target, beta=0.0)
    np.testing.assert_array_equal(mods[0], np.ones_like(f))


def test_ghrl_frozen_modulation_matches_finite_differences():
    target = make_target()
    rng = np.random.default_rng(4)
    f_k = nx.parameter(rng.random(target.base.shape))
    cfg = losses.GhrlConfig()
    modulation = losses.ghrl_modulation(f_k.data, target, cfg.beta)

    def f():
        return losses.ghrl(f_k, target, cfg, np.ones(2), modulation=modulation)

    nx.backward(f())
    numeric = nx.finite_diff_gradient(f, [f_k])[0]
    assert nx.relative_error(f_k.grad, numeric) < 1e-6


def test_ghrl_config_validation():
    with pytest.raises(ConfigError):
        losses.GhrlConfig(beta=-0.5)
    with pytest.raises(ConfigError):
        losses.GhrlConfig(reduction="max")


def test_shape_mismatch_raises():
    target = make_target()
    with pytest.raises(ShapeError):
        losses.ghrl(nx.parameter(np.zeros((2, 4, 4))), target, losses.GhrlConfig(), np.ones(2))
    with pytest.raises(ShapeError):
        losses.weighted_mse(nx.parameter(np.zeros((2, 8, 8))), target.base, np.ones(2), np.ones(3))


def test_total_loss_terms():
    target = make_target()
    rng = np.random.default_rng(5)
    heatmaps = nx.parameter(rng.random(target.base.shape))
    f_k = nx.parameter(rng.random(target.base.shape))
    strategy = losses.WeightStrategy.create(losses.HAND_CRAFTED, 2)

    total, terms = losses.total_loss(heatmaps, f_k, target, np.ones(2), strategy, losses.GhrlConfig(), mu=0.5)
    assert set(terms) == {"final", "ghrl", "total"}
    assert terms["total"] == pytest.approx(terms["final"] + 0.5 * terms["ghrl"])
    assert total.item() == terms["total"]

    _, terms = losses.total_loss(heatmaps, f_k, target, np.ones(2), strategy, losses.GhrlConfig(), mu=0.0)
    assert "ghrl" not in terms


def test_ghrl_matches_scalar_loop():
    rng = np.random.default_rng(6)
    target = encode_targets(np.array([[1.3, 2.2, 1.0]]), 4, 4, sigma=1.0, blur_kernel=3, blur_sigma=1.0)
    f = rng.random((1, 4, 4))
    beta = 1.5
    expected = 0.0
    for i in range(4):
        for j in range(4):
            v, h = f[0, i, j], target.base[0, i, j]
            hl, hg = target.sharp[0, i, j], target.smooth[0, i, j]
            expected += abs(v - h) ** beta * (abs(hl - v) * (v - hl) ** 2 + abs(hg - v) * (v - hg) ** 2)
    value = losses.ghrl(nx.parameter(f), target, losses.GhrlConfig(beta=beta, reduction="sum"), np.ones(1))
    assert value.item() == pytest.approx(expected, abs=1e-10)


def test_adaptive_weight_map_properties():
    target = np.zeros((1, 1, 4))
    pred = nx.Tensor(np.array([[[0.0, 0.1, -0.3, 0.7]]]))
    w = losses.adaptive_weight_map(pred, target, gamma=2.0).data[0, 0]
    assert w[0] == 0.0
    assert w[1] < w[2] < w[3]
    np.testing.assert_array_equal(losses.adaptive_weight_map(pred, target, gamma=0.0).data, np.ones((1, 1, 4)))


def test_constrained_loss_at_perfect_prediction_is_the_regularizer():
    strategy = losses.WeightStrategy.create(losses.CONSTRAINED, 3, lam=0.2)
    strategy.learnable_w.assign(np.array([1.0, 2.0, 0.0]))
    maps = np.random.default_rng(7).random((3, 4, 4))
    loss = losses.constrained_loss(nx.parameter(maps.copy()), maps, strategy, np.ones(3))
    assert loss.item() == pytest.approx(0.2 * (0.0 + 1.0 + 1.0))


def test_weighted_mse_two_keypoint_example():
    pred = nx.parameter(np.zeros((2, 3, 3)))
    target = constant_maps([0.1, 0.2], size=3)
    loss = losses.weighted_mse(pred, target, w=[1.0, 1.0], vis_mask=np.ones(2))
    assert loss.item() == pytest.approx(0.025)


def test_weighted_mse_scales_with_global_weight():
    rng = np.random.default_rng(8)
    target = rng.random((3, 4, 4))
    w = rng.uniform(0.5, 2.0, 3)
    grads = []
    for scale in (1.0, 3.0):
        pred = nx.parameter(np.zeros((3, 4, 4)))
        loss = losses.weighted_mse(pred, target, w * scale, np.ones(3))
        nx.backward(loss)
        grads.append((loss.item(), pred.grad))
    assert grads[1][0] == pytest.approx(3.0 * grads[0][0])
    np.testing.assert_allclose(grads[1][1], 3.0 * grads[0][1])
    at_target = losses.weighted_mse(nx.parameter(target.copy()), target, w * 3.0, np.ones(3))
    assert at_target.item() == 0.0


def test_constrained_weight_descends_to_its_stationary_point():
    lam = 0.25
    strategy = losses.WeightStrategy.create(losses.CONSTRAINED, 1, lam=lam)
    pred, target = nx.Tensor(np.zeros((1, 4, 4))), np.full((1, 4, 4), 0.2)
    w = strategy.learnable_w
    for _ in range(100):
        w.zero_grad()
        nx.backward(losses.constrained_loss(pred, target, strategy, np.ones(1)))
        w.assign(w.data - 1.0 * w.grad)
    assert w.data[0] == pytest.approx(1.0 - 0.04 / (2 * lam), abs=1e-10)


LOSS_KINDS = ("weighted_mse", "constrained", "adaptive", "adaptive_differentiable", "ghrl", "ghrl_differentiable")


def _loss_case(kind, rng):
    """Parameters and a scalar loss closure on a random 2x4x4 problem."""
    centres = rng.uniform(0.5, 3.5, (2, 2))
    target = encode_targets(np.column_stack([centres, np.ones(2)]), 4, 4, sigma=1.0, blur_kernel=3, blur_sigma=1.0)
    pred = nx.parameter(rng.random((2, 4, 4)))
    vis = np.array([1, rng.integers(0, 2)])

    if kind == "weighted_mse":
        w = rng.uniform(0.5, 2.0, 2)
        return [pred], lambda: losses.weighted_mse(pred, target.base, w, vis)
    if kind == "constrained":
        strategy = losses.WeightStrategy.create(losses.CONSTRAINED, 2, lam=0.1)
        strategy.learnable_w.assign(rng.uniform(0.5, 1.5, 2))
        return [pred, strategy.learnable_w], lambda: losses.constrained_loss(pred, target.base, strategy, vis)
    if kind == "adaptive":
        frozen = nx.Tensor(losses.adaptive_weight_map(pred, target.base, 2.0).data)
        return [pred], lambda: losses.adaptive_mse(pred, target.base, 2.0, vis, weights=frozen)
    if kind == "adaptive_differentiable":
        return [pred], lambda: losses.adaptive_mse(pred, target.base, 2.0, vis, differentiable=True)

    cfg = losses.GhrlConfig(differentiable_weights=kind == "ghrl_differentiable")
    modulation = None if cfg.differentiable_weights else losses.ghrl_modulation(pred.data, target, cfg.beta)
    return [pred], lambda: losses.ghrl(pred, target, cfg, vis, modulation=modulation)


@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_loss_gradients_match_finite_differences_over_seeds(kind):
    worst = 0.0
    for seed in range(50):
        params, f = _loss_case(kind, np.random.default_rng(seed))
        nx.zero_grad(params)
        nx.backward(f())
        numeric = nx.finite_diff_gradient(f, params)
        worst = max(worst, *(nx.relative_error(p.grad, n) for p, n in zip(params, numeric)))
    assert worst <= 1e-4


def test_differentiable_ghrl_weights_keep_the_value():
    target = make_target()
    f = np.random.default_rng(9).random(target.base.shape)
    frozen = losses.ghrl(nx.parameter(f), target, losses.GhrlConfig(), np.ones(2))
    live_input = nx.parameter(f)
    live = losses.ghrl(live_input, target, losses.GhrlConfig(differentiable_weights=True), np.ones(2))
    assert live.item() == pytest.approx(frozen.item())
    nx.backward(live)
    assert np.all(np.isfinite(live_input.grad)) and np.any(live_input.grad)
