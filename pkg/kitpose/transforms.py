"""
Transforms - top-down crops, warping and training augmentation.

Keypoints use pixel-centre coordinates: the centre of pixel (col, row) is
(col, row). Bounding boxes (x, y, w, h) are pixel-edge boxes, so a box covering
a whole W x H image is (0, 0, W, H) and its centre is ((W-1)/2, (H-1)/2).

Every crop is an affine map recorded in an AffineRecord; pixels and keypoints
always go through the same matrix.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from kitpose.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

ANIMAL_ROTATION = 40.0
COCO_ROTATION = 45.0


@dataclass
class AugmentConfig:
    """
    Probabilities and ranges of the training augmentations.

    Setting every probability to 0 reduces `augment` to a plain crop. A
    half-body crop needs `half_body_min_keypoints` visible keypoints overall
    and `half_body_part_min` inside the chosen part.
    """

    padding: float = 1.25
    rotate_prob: float = 0.6
    max_rotation: float = ANIMAL_ROTATION
    scale_prob: float = 1.0
    scale_range: tuple = (0.5, 1.5)
    flip_prob: float = 0.5
    half_body_prob: float = 0.3
    half_body_min_keypoints: int = 8
    half_body_part_min: int = 3
    cutmix_prob: float = 0.0
    cutmix_area: tuple = (0.1, 0.4)

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.cutmix_area = tuple(float(v) for v in self.cutmix_area)
        for name in ("rotate_prob", "scale_prob", "flip_prob", "half_body_prob", "cutmix_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"augment.{name} must lie in [0, 1], got {value}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"augment.scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        lo, hi = self.cutmix_area
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"augment.cutmix_area must satisfy 0 < lo <= hi < 1, got {self.cutmix_area}")
        if self.padding <= 0:
            raise ConfigError(f"augment.padding must be positive, got {self.padding}")
        if self.half_body_part_min < 2 or self.half_body_min_keypoints < 0:
            raise ConfigError(
                "augment.half_body_part_min must be >= 2 and half_body_min_keypoints >= 0, got "
                f"{self.half_body_part_min} and {self.half_body_min_keypoints}"
            )

    @classmethod
    def coco(cls, **kwargs) -> "AugmentConfig":
        """Human-pose preset: +-45 degree rotations."""
        kwargs.setdefault("max_rotation", COCO_ROTATION)
        return cls(**kwargs)

    @classmethod
    def disabled(cls, padding: float = 1.25) -> "AugmentConfig":
        return cls(padding=padding, rotate_prob=0.0, scale_prob=0.0, flip_prob=0.0,
                   half_body_prob=0.0, cutmix_prob=0.0)


def _homogeneous(m: np.ndarray) -> np.ndarray:
    return np.vstack([m, [0.0, 0.0, 1.0]])


@dataclass
class AffineRecord:
    """
    Forward map original frame -> crop frame.

    `flipped` marks that the crop was mirrored and its keypoint channels are
    swapped by the skeleton's flip pairs.
    """

    matrix: np.ndarray
    out_size: tuple
    flipped: bool = False

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(_homogeneous(self.matrix))[:2]

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map [.., 2] points forward."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def invert(self, points: np.ndarray) -> np.ndarray:
        """Map [.., 2] crop-frame points back to the original frame."""
        inv = self.inverse
        pts = np.asarray(points, dtype=np.float64)
        return pts @ inv[:, :2].T + inv[:, 2]

    def then(self, matrix: np.ndarray, out_size: Optional[tuple] = None, flipped: bool = False) -> "AffineRecord":
        """Compose with a further map applied after this one."""
        composed = (_homogeneous(matrix) @ _homogeneous(self.matrix))[:2]
        return AffineRecord(composed, out_size or self.out_size, self.flipped ^ flipped)

    def is_identity(self, in_size: tuple) -> bool:
        return tuple(self.out_size) == tuple(in_size) and np.array_equal(self.matrix, np.eye(3)[:2])


def bbox_center_size(bbox: Sequence[float]) -> tuple:
    """Centre (pixel-centre coordinates) and (w, h) of an edge box."""
    x, y, w, h = (float(v) for v in bbox)
    if not (w > 0 and h > 0):
        raise ShapeError(f"degenerate bounding box {tuple(bbox)}")
    return np.array([x + w / 2.0 - 0.5, y + h / 2.0 - 0.5]), (w, h)


def crop_affine(
    bbox: Sequence[float],
    out_size: tuple,
    padding: float = 1.25,
    rotation: float = 0.0,
    scale: float = 1.0,
) -> AffineRecord:
    """
    Centre-scale crop: the padded box, widened to the output aspect ratio, is
    scaled onto `out_size` = (H, W) and rotated by `rotation` degrees about
    its centre.

    Example:
        crop_affine((0, 0, 64, 64), (64, 64), padding=1.0)  # identity
    """
    out_h, out_w = out_size
    center, (w, h) = bbox_center_size(bbox)
    aspect = out_w / out_h
    if w > aspect * h:
        h = w / aspect
    else:
        w = h * aspect
    w *= padding * scale
    if w <= 0:
        raise ShapeError("crop region has no extent")

    s = out_w / w
    theta = math.radians(rotation)
    cos, sin = math.cos(theta), math.sin(theta)
    linear = s * np.array([[cos, -sin], [sin, cos]])
    out_center = np.array([(out_w - 1) / 2.0, (out_h - 1) / 2.0])
    offset = out_center - linear @ center
    return AffineRecord(np.hstack([linear, offset[:, None]]), (out_h, out_w))


def flip_matrix(width: int) -> np.ndarray:
    return np.array([[-1.0, 0.0, width - 1.0], [0.0, 1.0, 0.0]])


def warp_image(image: np.ndarray, record: AffineRecord) -> np.ndarray:
    """
    Resample a [C, H, W] float image into the crop frame (bilinear, zero fill).

    Pillow's affine transform works in pixel-edge coordinates and wants the
    output -> input map, so the record is shifted by half a pixel and inverted.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected a [C, H, W] image, got {image.shape}")
    out_h, out_w = record.out_size
    if record.is_identity(image.shape[1:]):
        return image.copy()

    shift = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]])
    unshift = np.array([[1.0, 0.0, -0.5], [0.0, 1.0, -0.5]])
    edge = (_homogeneous(shift) @ _homogeneous(record.matrix) @ _homogeneous(unshift))
    coeffs = tuple(np.linalg.inv(edge)[:2].reshape(-1))

    channels = []
    for channel in image:
        src = Image.fromarray(np.ascontiguousarray(channel, dtype=np.float32))
        warped = src.transform(
            (out_w, out_h),
            Image.Transform.AFFINE,
            data=coeffs,
            resample=Image.Resampling.BILINEAR,
            fillcolor=0.0,
        )
        channels.append(np.asarray(warped, dtype=np.float64))
    return np.clip(np.stack(channels), 0.0, 1.0)


def _visible_inside(points: np.ndarray, visibility: np.ndarray, out_size: tuple) -> np.ndarray:
    out_h, out_w = out_size
    inside = (
        (points[:, 0] >= 0) & (points[:, 0] <= out_w - 1)
        & (points[:, 1] >= 0) & (points[:, 1] <= out_h - 1)
    )
    return np.where(inside, visibility, 0).astype(visibility.dtype)


def apply_affine(inst, record: AffineRecord):
    """Warp image and keypoints of `inst`; keypoints leaving the crop become invisible."""
    points = record.apply(inst.keypoints)
    out_h, out_w = record.out_size
    return replace(
        inst,
        image=warp_image(inst.image, record),
        keypoints=points,
        visibility=_visible_inside(points, inst.visibility, record.out_size),
        bbox=(0.0, 0.0, float(out_w), float(out_h)),
        area=None,
    )


def crop_resize(inst, out_size: tuple, padding: float = 1.25) -> tuple:
    """
    Top-down crop of one instance.

    Returns:
        tuple: (cropped Instance, AffineRecord from the original frame)
    """
    record = crop_affine(inst.bbox, out_size, padding=padding)
    return apply_affine(inst, record), record


def hflip(inst, flip_pairs: Sequence[tuple]):
    """
    Mirror image and keypoints horizontally and swap left/right keypoints.

    x -> W - 1 - x, which is its own inverse for coordinates on a dyadic grid
    (the synthetic generator keeps keypoints on a 1/256 px grid).
    """
    width = inst.image.shape[-1]
    order = np.arange(len(inst.keypoints))
    for i, j in flip_pairs:
        order[i], order[j] = j, i
    points = inst.keypoints[order].copy()
    points[:, 0] = (width - 1.0) - points[:, 0]
    x, y, w, h = inst.bbox
    return replace(
        inst,
        image=np.ascontiguousarray(inst.image[:, :, ::-1]),
        keypoints=points,
        visibility=inst.visibility[order].copy(),
        bbox=(float(width) - x - w, y, w, h),
    )


def half_body_bbox(keypoints: np.ndarray, visibility: np.ndarray, indices: Sequence[int],
                   min_count: int, expand: float = 1.5) -> Optional[tuple]:
    """Edge box around the visible keypoints of `indices`, or None when too few are visible."""
    idx = [i for i in indices if visibility[i] > 0]
    if len(idx) < max(min_count, 2):
        return None
    pts = keypoints[idx]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    w, h = (hi - lo + 1.0) * expand
    if w <= 0 or h <= 0:
        return None
    return (center[0] + 0.5 - w / 2.0, center[1] + 0.5 - h / 2.0, w, h)


def cutmix(image: np.ndarray, donor: np.ndarray, rng: np.random.Generator, area_range: tuple) -> np.ndarray:
    """Paste a random rectangle of `donor` (same shape) into `image`; labels are left alone."""
    if donor.shape != image.shape:
        raise ShapeError(f"cutmix donor {donor.shape} does not match image {image.shape}")
    _, h, w = image.shape
    ratio = rng.uniform(*area_range)
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    ch = int(round(min(h, math.sqrt(ratio * h * w / aspect))))
    cw = int(round(min(w, ratio * h * w / max(ch, 1))))
    ch, cw = max(ch, 1), max(cw, 1)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    out = image.copy()
    out[:, y0:y0 + ch, x0:x0 + cw] = donor[:, y0:y0 + ch, x0:x0 + cw]
    return out


def augment(inst, cfg: AugmentConfig, rng: np.random.Generator, out_size: tuple,
            skeleton=None, donor=None) -> tuple:
    """
    Random training crop.

    Half-body selection, scale and rotation are folded into one crop affine;
    the crop is then optionally mirrored and cut-mixed with `donor`.

    Args:
        inst: source Instance in its original frame
        cfg: augmentation probabilities and ranges
        rng: per-instance generator (draw order is fixed)
        out_size: crop (H, W)
        skeleton: SkeletonSpec supplying flip pairs and half-body sets
        donor: another Instance for cutmix

    Returns:
        tuple: (augmented Instance, AffineRecord from the original frame)
    """
    bbox = inst.bbox
    n_visible = int(np.count_nonzero(np.asarray(inst.visibility) > 0))
    if skeleton is not None and rng.random() < cfg.half_body_prob and n_visible >= cfg.half_body_min_keypoints:
        parts = (skeleton.upper_body, skeleton.lower_body)
        first = int(rng.integers(0, 2))
        for indices in (parts[first], parts[1 - first]):
            candidate = half_body_bbox(inst.keypoints, inst.visibility, indices, cfg.half_body_part_min)
            if candidate is not None:
                bbox = candidate
                break

    scale = rng.uniform(*cfg.scale_range) if rng.random() < cfg.scale_prob else 1.0
    rotation = 0.0
    if rng.random() < cfg.rotate_prob:
        rotation = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))

    record = crop_affine(bbox, out_size, padding=cfg.padding, rotation=rotation, scale=scale)
    out = apply_affine(inst, record)

    if skeleton is not None and rng.random() < cfg.flip_prob:
        out = hflip(out, skeleton.flip_pairs)
        record = record.then(flip_matrix(out_size[1]), flipped=True)

    if donor is not None and rng.random() < cfg.cutmix_prob:
        donor_crop, _ = crop_resize(donor, out_size, padding=cfg.padding)
        out = replace(out, image=cutmix(out.image, donor_crop.image, rng, cfg.cutmix_area))
    return out, record
