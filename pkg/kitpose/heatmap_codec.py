"""
Heatmap Codec
Ground-truth heatmap targets (plain, Laplacian-sharpened, Gaussian-smoothed)
and decoding of predicted heatmaps back to sub-pixel keypoints.

Coordinates on a heatmap are (x, y) = (column, row). All filters use zero
padding, which slightly attenuates bumps near the border.
"""

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from kitpose import numerics as nx
from kitpose.errors import ShapeError
from kitpose.resource_manager import SafeFileWriter

logger = logging.getLogger(__name__)

ArrayOrTensor = Union[np.ndarray, nx.Tensor]

# Decoding modes
ARGMAX_QUARTER_OFFSET = "argmax_quarter_offset"
DISTRIBUTION_AWARE = "distribution_aware"
DECODE_MODES = (ARGMAX_QUARTER_OFFSET, DISTRIBUTION_AWARE)

LOG_FLOOR = 1e-10
HESSIAN_RIDGE = 1e-8


@dataclass(frozen=True)
class LaplacianKernelSpec:
    """Integer high-pass stencil and the factor it is multiplied by."""

    size: int
    weights: tuple
    scale: float

    def __post_init__(self):
        arr = np.asarray(self.weights, dtype=np.float64)
        if arr.shape != (self.size, self.size) or self.size % 2 == 0:
            raise ShapeError(f"Laplacian kernel must be an odd {self.size}x{self.size} grid, got {arr.shape}")
        if arr.sum() * self.scale != 0:
            raise ShapeError(f"Laplacian kernel must sum to zero, sums to {arr.sum() * self.scale}")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)

    @classmethod
    def custom(cls, weights: Sequence[Sequence[float]], scale: float = 1.0) -> "LaplacianKernelSpec":
        rows = tuple(tuple(float(v) for v in row) for row in weights)
        return cls(size=len(rows), weights=rows, scale=scale)


LAPLACIAN_3 = LaplacianKernelSpec(3, (
    (0, -1, 0),
    (-1, 4, -1),
    (0, -1, 0),
), 1.0)

LAPLACIAN_5 = LaplacianKernelSpec(5, (
    (0, 0, -1, 0, 0),
    (0, -1, -2, -1, 0),
    (-1, -2, 16, -2, -1),
    (0, -1, -2, -1, 0),
    (0, 0, -1, 0, 0),
), 1.0 / 4.0)

LAPLACIAN_7 = LaplacianKernelSpec(7, (
    (0, 0, -1, -1, -1, 0, 0),
    (0, -1, -3, -3, -3, -1, 0),
    (-1, -3, 0, 7, 0, -3, -1),
    (-1, -3, 7, 24, 7, -3, -1),
    (-1, -3, 0, 7, 0, -3, -1),
    (0, -1, -3, -3, -3, -1, 0),
    (0, 0, -1, -1, -1, 0, 0),
), 1.0 / 6.0)

LAPLACIAN_KERNELS = {3: LAPLACIAN_3, 5: LAPLACIAN_5, 7: LAPLACIAN_7}


def laplacian_spec(size: int) -> LaplacianKernelSpec:
    if size not in LAPLACIAN_KERNELS:
        raise ShapeError(f"No Laplacian kernel of size {size}; choose from {sorted(LAPLACIAN_KERNELS)}")
    return LAPLACIAN_KERNELS[size]


@dataclass
class HeatmapTarget:
    """Gaussian targets for one instance, [N, h', w'] each."""

    base: np.ndarray
    sharp: np.ndarray
    smooth: np.ndarray
    sigma: float
    kernel_spec: LaplacianKernelSpec = field(default=LAPLACIAN_3)
    visible: Optional[np.ndarray] = None


class DecodedKeypoint(NamedTuple):
    x: float
    y: float
    score: float
    valid: bool


def _as_array(h: ArrayOrTensor) -> np.ndarray:
    return h.data if isinstance(h, nx.Tensor) else np.asarray(h, dtype=np.float64)


def _channels(arr: np.ndarray) -> tuple:
    if arr.ndim < 2:
        raise ShapeError(f"heatmaps need at least 2 dims, got {arr.shape}")
    lead = arr.shape[:-2]
    return lead, arr.reshape(-1, *arr.shape[-2:])


def laplacian_filter(h: ArrayOrTensor, spec: LaplacianKernelSpec = LAPLACIAN_3) -> np.ndarray:
    """
    Per-channel zero-padded Laplacian, multiplied by spec.scale.

    Args:
        h: heatmaps [..., h', w']
        spec: one of the stock kernels or a zero-sum custom one

    Returns:
        np.ndarray: filtered heatmaps, same shape
    """
    arr = _as_array(h)
    lead, flat = _channels(arr)
    kernel = spec.array.reshape(1, 1, spec.size, spec.size)
    with nx.no_grad(), nx.precision("float64"):
        out = nx.conv2d(flat[:, None].astype(np.float64), kernel, pad=spec.size // 2).data
    return (out[:, 0] * spec.scale).reshape(*lead, *arr.shape[-2:]).astype(arr.dtype, copy=False)


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ShapeError(f"Gaussian kernel size must be odd, got {kernel_size}")
    if sigma <= 0:
        raise ShapeError(f"Gaussian sigma must be positive, got {sigma}")
    r = np.arange(kernel_size, dtype=np.float64) - kernel_size // 2
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _correlate_axis(arr: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    r = len(g) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    windows = np.lib.stride_tricks.sliding_window_view(np.pad(arr, pad), len(g), axis=axis)
    return windows @ g


def gaussian_blur(h: ArrayOrTensor, kernel_size: int = 13, sigma: float = 4.0) -> np.ndarray:
    """Separable normalised Gaussian blur over the last two axes, zero padded."""
    arr = _as_array(h)
    g = gaussian_kernel1d(kernel_size, sigma)
    out = _correlate_axis(arr.astype(np.float64), g, axis=arr.ndim - 1)
    out = _correlate_axis(out, g, axis=arr.ndim - 2)
    return out.astype(arr.dtype, copy=False)


def dark_sigma(kernel_size: int) -> float:
    """Blur sigma conventionally paired with a modulation kernel size."""
    return 0.3 * ((kernel_size - 1) * 0.5 - 1) + 0.8


def encode_targets(
    keypoints: np.ndarray,
    height: int,
    width: int,
    sigma: float,
    kernel_spec: LaplacianKernelSpec = LAPLACIAN_3,
    blur_kernel: int = 13,
    blur_sigma: float = 4.0,
) -> HeatmapTarget:
    """
    Build H, H_l and H_g for one instance.

    Args:
        keypoints: [N, 3] rows of (x, y, visibility) in heatmap coordinates
        height, width: heatmap extent
        sigma: Gaussian bump sigma in heatmap pixels
        kernel_spec: Laplacian stencil for the sharp target
        blur_kernel, blur_sigma: Gaussian filter for the smooth target

    Returns:
        HeatmapTarget: invisible keypoints give all-zero channels
    """
    kpts = np.asarray(keypoints, dtype=np.float64)
    if kpts.ndim != 2 or kpts.shape[1] != 3:
        raise ShapeError(f"keypoints must be [N, 3], got {kpts.shape}")
    if sigma <= 0:
        raise ShapeError(f"sigma must be positive, got {sigma}")

    visible = kpts[:, 2] > 0
    xs, ys = kpts[:, 0], kpts[:, 1]
    outside = visible & ((xs < 0) | (xs >= width) | (ys < 0) | (ys >= height))
    if np.any(outside):
        bad = np.flatnonzero(outside).tolist()
        raise ShapeError(f"visible keypoints {bad} lie outside the {width}x{height} heatmap")

    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    dx2 = (u[None, :] - xs[:, None]) ** 2
    dy2 = (v[None, :] - ys[:, None]) ** 2
    base = np.exp(-(dy2[:, :, None] + dx2[:, None, :]) / (2.0 * sigma * sigma))
    base[~visible] = 0.0

    dtype = nx.get_dtype()
    return HeatmapTarget(
        base=base.astype(dtype),
        sharp=laplacian_filter(base, kernel_spec).astype(dtype),
        smooth=gaussian_blur(base, blur_kernel, blur_sigma).astype(dtype),
        sigma=sigma,
        kernel_spec=kernel_spec,
        visible=visible,
    )


def stack_targets(targets: Sequence[HeatmapTarget]) -> HeatmapTarget:
    """Batch per-instance targets into [B, N, h', w'] arrays."""
    return HeatmapTarget(
        base=np.stack([t.base for t in targets]),
        sharp=np.stack([t.sharp for t in targets]),
        smooth=np.stack([t.smooth for t in targets]),
        sigma=targets[0].sigma,
        kernel_spec=targets[0].kernel_spec,
        visible=np.stack([t.visible for t in targets]),
    )


def _refine_quarter(hm: np.ndarray, px: int, py: int) -> tuple:
    h, w = hm.shape
    x, y = float(px), float(py)
    if 0 < px < w - 1:
        x += 0.25 * np.sign(hm[py, px + 1] - hm[py, px - 1])
    if 0 < py < h - 1:
        y += 0.25 * np.sign(hm[py + 1, px] - hm[py - 1, px])
    return x, y


def _refine_taylor(log_hm: np.ndarray, px: int, py: int) -> tuple:
    h, w = log_hm.shape
    if not (1 <= px <= w - 2 and 1 <= py <= h - 2):
        return float(px), float(py)
    L = log_hm
    dx = 0.5 * (L[py, px + 1] - L[py, px - 1])
    dy = 0.5 * (L[py + 1, px] - L[py - 1, px])
    dxx = L[py, px + 1] - 2 * L[py, px] + L[py, px - 1]
    dyy = L[py + 1, px] - 2 * L[py, px] + L[py - 1, px]
    dxy = 0.25 * (L[py + 1, px + 1] - L[py + 1, px - 1] - L[py - 1, px + 1] + L[py - 1, px - 1])
    hessian = np.array([[dxx, dxy], [dxy, dyy]])
    if abs(np.linalg.det(hessian)) < HESSIAN_RIDGE:
        hessian = hessian + HESSIAN_RIDGE * np.eye(2)
    try:
        offset = -np.linalg.solve(hessian, np.array([dx, dy]))
    except np.linalg.LinAlgError:
        return float(px), float(py)
    offset = np.clip(offset, -1.0, 1.0)
    return px + float(offset[0]), py + float(offset[1])


def decode_keypoints(
    h: ArrayOrTensor,
    mode: str = DISTRIBUTION_AWARE,
    blur_kernel: int = 11,
    blur_sigma: Optional[float] = None,
) -> list:
    """
    Decode [N, h', w'] heatmaps into one DecodedKeypoint per channel.

    The integer location is the argmax (ties go to the lowest row-major
    index). `argmax_quarter_offset` shifts 0.25 px toward the larger
    neighbour per axis; `distribution_aware` applies a Newton step on the
    log of the blurred heatmap, clamped to +-1 px. The score is the raw max.
    All-zero channels decode to (0, 0, 0) with valid=False.
    """
    if mode not in DECODE_MODES:
        raise ValueError(f"Unknown decode mode '{mode}', expected one of {DECODE_MODES}")
    arr = np.asarray(_as_array(h), dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"decode_keypoints expects [N, h', w'], got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("decode_keypoints: non-finite heatmap values")

    if mode == DISTRIBUTION_AWARE:
        sigma = blur_sigma if blur_sigma is not None else dark_sigma(blur_kernel)
        log_maps = np.log(np.maximum(gaussian_blur(arr, blur_kernel, sigma), LOG_FLOOR))

    results = []
    width = arr.shape[2]
    for n, hm in enumerate(arr):
        if not np.any(hm):
            results.append(DecodedKeypoint(0.0, 0.0, 0.0, False))
            continue
        idx = int(np.argmax(hm))
        py, px = divmod(idx, width)
        if mode == ARGMAX_QUARTER_OFFSET:
            x, y = _refine_quarter(hm, px, py)
        else:
            x, y = _refine_taylor(log_maps[n], px, py)
        results.append(DecodedKeypoint(x, y, float(hm[py, px]), True))
    return results


def decode_batch(h: ArrayOrTensor, mode: str = DISTRIBUTION_AWARE, **kwargs) -> np.ndarray:
    """Decode [B, N, h', w'] into an array [B, N, 3] of (x, y, score)."""
    arr = _as_array(h)
    out = np.zeros((arr.shape[0], arr.shape[1], 3))
    for b, maps in enumerate(arr):
        for n, kp in enumerate(decode_keypoints(maps, mode, **kwargs)):
            out[b, n] = (kp.x, kp.y, kp.score)
    return out


def image_to_heatmap(xy: np.ndarray, stride: int) -> np.ndarray:
    """Map image pixel coordinates onto the heatmap grid (pixel-centre convention)."""
    return (np.asarray(xy, dtype=np.float64) - (stride - 1) / 2.0) / stride


def heatmap_to_image(xy: np.ndarray, stride: int) -> np.ndarray:
    return np.asarray(xy, dtype=np.float64) * stride + (stride - 1) / 2.0


def flip_heatmaps(h: ArrayOrTensor, flip_pairs: Iterable[tuple]) -> np.ndarray:
    """Mirror heatmaps [..., N, h', w'] horizontally and swap left/right channels."""
    arr = np.array(_as_array(h)[..., ::-1])
    swapped = arr.copy()
    for i, j in flip_pairs:
        swapped[..., i, :, :] = arr[..., j, :, :]
        swapped[..., j, :, :] = arr[..., i, :, :]
    return swapped


def write_keypoints_csv(path: str, rows: Iterable[tuple]) -> None:
    """Rows of (instance_id, kpt_id, x, y, score)."""
    with SafeFileWriter(path) as f:
        writer = csv.writer(f)
        writer.writerow(["instance_id", "kpt_id", "x", "y", "score"])
        for instance_id, kpt_id, x, y, score in rows:
            writer.writerow([instance_id, kpt_id, f"{x:.4f}", f"{y:.4f}", f"{score:.6f}"])
