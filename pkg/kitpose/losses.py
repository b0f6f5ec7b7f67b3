"""
Losses - keypoint weighting strategies and GHRL intermediate supervision.

All losses take predictions shaped [..., N, h', w'] and a visibility mask
[..., N]. Modulating weights (the adaptive map, the GHRL factors) are data,
not a gradient path, unless `differentiable_weights` is switched on. Callers
that need to hold them fixed (finite-difference oracles) can pass them in
precomputed.

0 ** 0 is taken as 1, so gamma = 0 or beta = 0 yield all-ones weights.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from kitpose import numerics as nx
from kitpose.errors import ConfigError, ShapeError
from kitpose.heatmap_codec import LAPLACIAN_3, HeatmapTarget, LaplacianKernelSpec
from kitpose.numerics import Tensor

logger = logging.getLogger(__name__)

HAND_CRAFTED = "hand_crafted"
CONSTRAINED = "constrained"
ADAPTIVE = "adaptive"
WEIGHTING_KINDS = (HAND_CRAFTED, CONSTRAINED, ADAPTIVE)

LEARNABLE_W_NAME = "loss.keypoint_weights"


@dataclass
class WeightStrategy:
    """
    How per-keypoint losses are weighted.

    hand_crafted uses fixed factors `w`; constrained learns `learnable_w`
    (initialised to 1) under an l2 pull towards 1 with strength `lam`;
    adaptive weights every pixel by |error| ** gamma.
    """

    kind: str
    w: np.ndarray
    lam: float = 0.01
    gamma: float = 2.0
    learnable_w: Optional[Tensor] = None
    differentiable_weights: bool = False

    def __post_init__(self):
        if self.kind not in WEIGHTING_KINDS:
            raise ConfigError(f"Unknown weighting '{self.kind}', expected one of {WEIGHTING_KINDS}")
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.any(self.w < 0):
            raise ConfigError("hand-crafted keypoint weights must be non-negative")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.kind == CONSTRAINED and self.learnable_w is None:
            self.learnable_w = nx.parameter(np.ones(len(self.w)))

    @classmethod
    def create(cls, kind: str, n_keypoints: int, w=None, lam: float = 0.01, gamma: float = 2.0,
               differentiable_weights: bool = False) -> "WeightStrategy":
        weights = np.ones(n_keypoints) if w is None else np.asarray(w, dtype=np.float64)
        if weights.shape != (n_keypoints,):
            raise ConfigError(f"expected {n_keypoints} keypoint weights, got shape {weights.shape}")
        return cls(kind=kind, w=weights, lam=lam, gamma=gamma, differentiable_weights=differentiable_weights)

    def parameters(self) -> dict:
        return {LEARNABLE_W_NAME: self.learnable_w} if self.learnable_w is not None else {}


@dataclass
class GhrlConfig:
    beta: float = 1.0
    kernel_spec: LaplacianKernelSpec = field(default=LAPLACIAN_3)
    blur_kernel: int = 13
    blur_sigma: float = 4.0
    reduction: str = "mean"
    differentiable_weights: bool = False

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ConfigError(f"GHRL beta must be finite and >= 0, got {self.beta}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"GHRL reduction must be 'mean' or 'sum', got '{self.reduction}'")


def _data(x: Union[Tensor, np.ndarray]) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=nx.get_dtype())


def _check_shapes(pred: Tensor, target: np.ndarray, vis_mask: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if vis_mask.shape != pred.shape[:-2]:
        raise ShapeError(f"visibility mask {vis_mask.shape} does not match {pred.shape[:-2]}")


def no_visible(vis_mask) -> bool:
    return not np.any(np.asarray(vis_mask) > 0)


def _masked_channel_mean(per_pixel: Tensor, vis_mask: np.ndarray, w: np.ndarray) -> Tensor:
    """sum_i vis_i * w_i * mean_pixels(per_pixel_i) / (number of visible channels)."""
    per_channel = nx.mean(per_pixel, axis=(-2, -1))
    vis = (np.asarray(vis_mask) > 0).astype(np.float64)
    count = vis.sum()
    if count == 0:
        logger.warning("⚠️ All keypoints invisible, loss defined as 0")
        return per_channel.sum() * 0.0
    return (per_channel * nx.Tensor(vis * w)).sum() * (1.0 / count)


def weighted_mse(pred: Tensor, target, w, vis_mask) -> Tensor:
    """
    Hand-crafted weighting: visible keypoints' per-pixel MSE scaled by w_i,
    averaged over visible keypoints.
    """
    target = _data(target)
    vis_mask = np.asarray(vis_mask)
    _check_shapes(pred, target, vis_mask)
    diff = pred - target
    return _masked_channel_mean(diff * diff, vis_mask, np.asarray(w, dtype=np.float64))


def constrained_loss(pred: Tensor, target, strategy: WeightStrategy, vis_mask) -> Tensor:
    """
    sum_i w_i * e_i^2 + lam * sum_i (w_i - 1)^2 with learnable w.

    e_i^2 is the mean squared pixel error of keypoint i; with a batch the data
    term is averaged over instances.
    """
    if strategy.kind != CONSTRAINED or strategy.learnable_w is None:
        raise ConfigError("constrained_loss needs a constrained WeightStrategy")
    target = _data(target)
    vis_mask = np.asarray(vis_mask)
    _check_shapes(pred, target, vis_mask)
    if no_visible(vis_mask):
        logger.warning("⚠️ All keypoints invisible, data term defined as 0")

    diff = pred - target
    per_channel = nx.mean(diff * diff, axis=(-2, -1))
    vis = (vis_mask > 0).astype(np.float64)
    n_instances = int(np.prod(per_channel.shape[:-1])) if per_channel.ndim > 1 else 1
    w = strategy.learnable_w
    data_term = (per_channel * nx.Tensor(vis) * w).sum() * (1.0 / n_instances)
    offset = w - 1.0
    return data_term + (offset * offset).sum() * strategy.lam


def adaptive_weight_map(pred: Tensor, target, gamma: float, differentiable: bool = False) -> Tensor:
    """|pred - target| ** gamma, detached unless `differentiable`."""
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    target = _data(target)
    if differentiable:
        return nx.power(nx.absolute(pred - target), gamma)
    return nx.Tensor(np.power(np.abs(pred.data - target), gamma))


def adaptive_mse(pred: Tensor, target, gamma: float, vis_mask, weights=None,
                 differentiable: bool = False) -> Tensor:
    """
    Focal-style MSE: mean over visible keypoints and pixels of W * e^2.

    Args:
        weights: optional precomputed weight map held constant
        differentiable: let gradients flow through W as well
    """
    target = _data(target)
    vis_mask = np.asarray(vis_mask)
    _check_shapes(pred, target, vis_mask)
    if weights is None:
        weights = adaptive_weight_map(pred, target, gamma, differentiable=differentiable)
    diff = pred - target
    return _masked_channel_mean(weights * (diff * diff), vis_mask, np.ones(vis_mask.shape[-1]))


def ghrl_modulation(f_k: np.ndarray, target: HeatmapTarget, beta: float) -> tuple:
    """The three stop-gradient factors |f-H|^beta, |H_l-f|, |H_g-f|."""
    f = _data(f_k)
    return (
        np.power(np.abs(f - target.base), beta),
        np.abs(target.sharp - f),
        np.abs(target.smooth - f),
    )


def ghrl(f_k: Tensor, target: HeatmapTarget, cfg: GhrlConfig, vis_mask, modulation: Optional[tuple] = None) -> Tensor:
    """
    Generalised heatmap regression loss on the intermediate keypoint features.

    Elementwise |f-H|^beta * (|H_l-f| (f-H_l)^2 + |H_g-f| (f-H_g)^2), reduced
    over visible channels by mean or sum.
    """
    base = _data(target.base)
    sharp = _data(target.sharp)
    smooth = _data(target.smooth)
    vis_mask = np.asarray(vis_mask)
    for name, arr in (("base", base), ("sharp", sharp), ("smooth", smooth)):
        if arr.shape != f_k.shape:
            raise ShapeError(f"GHRL: {name} target {arr.shape} does not match features {f_k.shape}")
    _check_shapes(f_k, base, vis_mask)

    if modulation is not None:
        lead, w_l, w_g = (nx.Tensor(m) for m in modulation)
    elif cfg.differentiable_weights:
        lead = nx.power(nx.absolute(f_k - base), cfg.beta)
        w_l = nx.absolute(f_k - sharp)
        w_g = nx.absolute(f_k - smooth)
    else:
        lead, w_l, w_g = (nx.Tensor(m) for m in ghrl_modulation(f_k.data, target, cfg.beta))

    d_l = f_k - sharp
    d_g = f_k - smooth
    per_pixel = lead * (w_l * (d_l * d_l) + w_g * (d_g * d_g))

    if cfg.reduction == "mean":
        return _masked_channel_mean(per_pixel, vis_mask, np.ones(vis_mask.shape[-1]))
    vis = (vis_mask > 0).astype(np.float64)
    return (nx.tsum(per_pixel, axis=(-2, -1)) * nx.Tensor(vis)).sum()


def heatmap_loss(pred: Tensor, target, strategy: WeightStrategy, vis_mask,
                 adaptive_weights: Optional[np.ndarray] = None) -> Tensor:
    """Final-head loss under the configured weighting strategy."""
    if strategy.kind == HAND_CRAFTED:
        return weighted_mse(pred, target, strategy.w, vis_mask)
    if strategy.kind == CONSTRAINED:
        return constrained_loss(pred, target, strategy, vis_mask)
    weights = None if adaptive_weights is None else nx.Tensor(adaptive_weights)
    return adaptive_mse(pred, target, strategy.gamma, vis_mask, weights=weights,
                        differentiable=strategy.differentiable_weights)


def total_loss(
    heatmaps: Tensor,
    f_k: Tensor,
    target: HeatmapTarget,
    vis_mask,
    strategy: WeightStrategy,
    ghrl_cfg: Optional[GhrlConfig] = None,
    mu: float = 1.0,
    frozen: Optional[dict] = None,
) -> tuple:
    """
    Final-head loss plus mu * GHRL on the intermediate features.

    `frozen` may hold "adaptive_weights" and "ghrl_modulation" computed once
    beforehand; they then stay fixed however the inputs move.

    Returns:
        tuple: (total Tensor, dict of float terms for logging)
    """
    frozen = frozen or {}
    final = heatmap_loss(heatmaps, target.base, strategy, vis_mask, frozen.get("adaptive_weights"))
    terms = {"final": final.item()}
    total = final
    if ghrl_cfg is not None and mu > 0:
        inter = ghrl(f_k, target, ghrl_cfg, vis_mask, modulation=frozen.get("ghrl_modulation"))
        terms["ghrl"] = inter.item()
        total = total + inter * mu
    terms["total"] = total.item()
    return total, terms
