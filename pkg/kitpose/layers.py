"""
Layers - parameter initialisers and functional building blocks.

Parameters live in plain dicts keyed by dotted names ("backbone.conv1.weight"),
so checkpoints and gradient reports can address every tensor by name.
"""

import logging
from typing import Optional

import numpy as np

from kitpose import numerics as nx
from kitpose.errors import ShapeError
from kitpose.numerics import Tensor

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


def truncated_normal(rng: np.random.Generator, shape: tuple, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal samples redrawn until they fall inside +-bound standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_conv(params: dict, name: str, rng: np.random.Generator, c_in: int, c_out: int, k: int, bias: bool = True) -> None:
    """He-normal conv kernel [c_out, c_in, k, k] plus zero bias."""
    std = np.sqrt(2.0 / (c_in * k * k))
    params[f"{name}.weight"] = nx.parameter(rng.standard_normal((c_out, c_in, k, k)) * std)
    if bias:
        params[f"{name}.bias"] = nx.parameter(np.zeros(c_out))


def init_linear(params: dict, name: str, rng: np.random.Generator, n_in: int, n_out: int,
                bias: bool = True, std: Optional[float] = None) -> None:
    """Linear weight [n_out, n_in] from a truncated normal, zero bias."""
    std = std if std is not None else 0.02
    params[f"{name}.weight"] = nx.parameter(truncated_normal(rng, (n_out, n_in), std=std))
    if bias:
        params[f"{name}.bias"] = nx.parameter(np.zeros(n_out))


def init_norm(params: dict, name: str, dim: int) -> None:
    params[f"{name}.gain"] = nx.parameter(np.ones(dim))
    params[f"{name}.bias"] = nx.parameter(np.zeros(dim))


def init_batch_norm(params: dict, buffers: dict, name: str, channels: int) -> None:
    init_norm(params, name, channels)
    buffers[f"{name}.running_mean"] = np.zeros(channels)
    buffers[f"{name}.running_var"] = np.ones(channels)


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    """x @ W^T (+ b) with W stored as [out, in]."""
    w = params[f"{name}.weight"]
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"{name}: input width {x.shape[-1]} != {w.shape[1]}")
    out = nx.matmul(x, nx.swap_last(w))
    bias = params.get(f"{name}.bias")
    return out + bias if bias is not None else out


def conv(x: Tensor, params: dict, name: str, stride: int = 1) -> Tensor:
    """Same-padded convolution with optional per-channel bias."""
    w = params[f"{name}.weight"]
    out = nx.conv2d(x, w, stride=stride, pad=w.shape[-1] // 2)
    bias = params.get(f"{name}.bias")
    if bias is None:
        return out
    return out + bias.reshape(-1, 1, 1)


def batch_norm(x: Tensor, params: dict, name: str, buffers: Optional[dict] = None, training: bool = True) -> Tensor:
    """
    Batch normalisation over every axis except channels.

    Accepts [C, H, W] or [B, C, H, W]. In training mode batch statistics are
    used and, when `buffers` is given, running statistics are updated.
    """
    channel_axis = x.ndim - 3
    axes = tuple(ax for ax in range(x.ndim) if ax != channel_axis)
    gain = params[f"{name}.gain"].reshape(-1, 1, 1)
    bias = params[f"{name}.bias"].reshape(-1, 1, 1)

    if training:
        mu = nx.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = nx.mean(centered * centered, axis=axes, keepdims=True)
        if buffers is not None:
            key_m, key_v = f"{name}.running_mean", f"{name}.running_var"
            buffers[key_m] = (1 - BN_MOMENTUM) * buffers[key_m] + BN_MOMENTUM * mu.data.reshape(-1)
            buffers[key_v] = (1 - BN_MOMENTUM) * buffers[key_v] + BN_MOMENTUM * var.data.reshape(-1)
        normed = centered / nx.sqrt(var + BN_EPS)
    else:
        if buffers is None:
            raise ShapeError(f"{name}: eval-mode batch norm needs running statistics")
        shape = (-1, 1, 1)
        rm = nx.Tensor(buffers[f"{name}.running_mean"].reshape(shape))
        rv = nx.Tensor(buffers[f"{name}.running_var"].reshape(shape))
        normed = (x - rm) / nx.sqrt(rv + BN_EPS)
    return normed * gain + bias


def layer_norm(x: Tensor, params: dict, name: str) -> Tensor:
    """Normalise the last axis, then scale and shift."""
    mu = nx.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = nx.mean(centered * centered, axis=-1, keepdims=True)
    return centered / nx.sqrt(var + LN_EPS) * params[f"{name}.gain"] + params[f"{name}.bias"]


def conv_bn_relu(x: Tensor, params: dict, name: str, buffers: Optional[dict], training: bool) -> Tensor:
    out = conv(x, params, f"{name}.conv")
    out = batch_norm(out, params, f"{name}.bn", buffers=buffers, training=training)
    return nx.relu(out)
