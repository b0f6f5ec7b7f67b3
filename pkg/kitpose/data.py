"""
Data - skeletons, instances, synthetic generation and COCO-keypoint I/O.

Synthetic instances are articulated capsule figures on textured noise. Every
instance is a pure function of (seed, index), so datasets never need to be
stored to be reproduced; a small manifest JSON is enough.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image

from kitpose.errors import DatasetError
from kitpose.resource_manager import PathLike, SafeFileWriter, dumps_json, read_json, write_json

logger = logging.getLogger(__name__)

# Synthetic keypoints live on this sub-pixel grid, which keeps mirroring exact.
COORD_GRID = 256.0


@dataclass
class SkeletonSpec:
    """
    Keypoint tree and its left/right structure.

    `rest_angles` (degrees, image frame, 0 = +x, 90 = down) and `angle_jitter`
    drive the synthetic poser; `limb_length_ranges` are (min, max) px per edge,
    indexed by the child keypoint (entry 0 is unused).
    """

    names: List[str]
    parent: List[int]
    flip_pairs: List[tuple]
    limb_length_ranges: List[tuple]
    rest_angles: List[float]
    angle_jitter: List[float]
    upper_body: List[int]
    lower_body: List[int]

    def __post_init__(self):
        self.flip_pairs = [tuple(int(v) for v in p) for p in self.flip_pairs]
        self.limb_length_ranges = [tuple(float(v) for v in r) for r in self.limb_length_ranges]

    @property
    def n_keypoints(self) -> int:
        return len(self.parent)

    @property
    def edges(self) -> List[tuple]:
        return [(self.parent[i], i) for i in range(1, self.n_keypoints)]

    def flip_permutation(self) -> np.ndarray:
        order = np.arange(self.n_keypoints)
        for i, j in self.flip_pairs:
            order[i], order[j] = j, i
        return order

    def validate(self) -> tuple:
        """
        Check the tree and flip structure.

        Returns:
            tuple: (is_valid, error_message)
        """
        n = self.n_keypoints
        per_node = (self.names, self.limb_length_ranges, self.rest_angles, self.angle_jitter)
        if n < 1 or any(len(seq) != n for seq in per_node):
            return False, "names, parent, limb ranges and angles must all have one entry per keypoint"
        if self.parent[0] != -1:
            return False, "keypoint 0 must be the root (parent -1)"
        for i in range(1, n):
            seen, node = set(), i
            while node != 0:
                if node in seen or not 0 <= self.parent[node] < n:
                    return False, f"keypoint {i} does not reach the root"
                seen.add(node)
                node = self.parent[node]
        used = [k for pair in self.flip_pairs for k in pair]
        if len(used) != len(set(used)) or any(i == j for i, j in self.flip_pairs):
            return False, "flip_pairs must be disjoint pairs of distinct keypoints"
        if any(not 0 <= k < n for k in used):
            return False, "flip_pairs reference unknown keypoints"
        perm = self.flip_permutation()
        for i in range(1, n):
            pi = perm[i]
            if perm[self.parent[i]] != self.parent[pi]:
                return False, f"flip pairs do not respect the tree at keypoint {i}"
            if self.limb_length_ranges[i] != self.limb_length_ranges[pi]:
                return False, f"limb ranges of mirrored keypoints {i} and {pi} differ"
        for lo, hi in self.limb_length_ranges[1:]:
            if not 0 < lo <= hi:
                return False, "limb length ranges must satisfy 0 < min <= max"
        subsets = list(self.upper_body) + list(self.lower_body)
        if any(not 0 <= k < n for k in subsets):
            return False, "half-body sets reference unknown keypoints"
        return True, ""

    def check(self) -> "SkeletonSpec":
        ok, message = self.validate()
        if not ok:
            raise DatasetError(f"Invalid skeleton: {message}")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["flip_pairs"] = [list(p) for p in self.flip_pairs]
        data["limb_length_ranges"] = [list(r) for r in self.limb_length_ranges]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SkeletonSpec":
        try:
            return cls(**data).check()
        except TypeError as e:
            raise DatasetError(f"Malformed skeleton description: {e}") from None


def default_skeleton() -> SkeletonSpec:
    """
    17-keypoint quadruped seen from the side, root at the neck.

    Left limbs sit slightly behind right limbs so the two sides stay
    distinguishable in the rendering.
    """
    names = [
        "neck", "nose", "left_eye", "right_eye", "root_of_tail",
        "left_shoulder", "left_elbow", "left_front_paw",
        "right_shoulder", "right_elbow", "right_front_paw",
        "left_hip", "left_knee", "left_back_paw",
        "right_hip", "right_knee", "right_back_paw",
    ]
    parent = [-1, 0, 1, 1, 0, 0, 5, 6, 0, 8, 9, 4, 11, 12, 4, 14, 15]
    head, eye, spine = (14.0, 20.0), (5.0, 8.0), (40.0, 56.0)
    girdle, upper, lower = (8.0, 12.0), (14.0, 20.0), (12.0, 18.0)
    ranges = [(1.0, 1.0), head, eye, eye, spine,
              girdle, upper, lower, girdle, upper, lower,
              girdle, upper, lower, girdle, upper, lower]
    rest = [0.0, -20.0, -150.0, -100.0, 180.0,
            100.0, 95.0, 90.0, 80.0, 85.0, 90.0,
            100.0, 95.0, 90.0, 80.0, 85.0, 90.0]
    jitter = [0.0, 20.0, 15.0, 15.0, 10.0,
              10.0, 35.0, 35.0, 10.0, 35.0, 35.0,
              10.0, 35.0, 35.0, 10.0, 35.0, 35.0]
    return SkeletonSpec(
        names=names,
        parent=parent,
        flip_pairs=[(2, 3), (5, 8), (6, 9), (7, 10), (11, 14), (12, 15), (13, 16)],
        limb_length_ranges=ranges,
        rest_angles=rest,
        angle_jitter=jitter,
        upper_body=list(range(0, 11)),
        lower_body=[4, 11, 12, 13, 14, 15, 16],
    ).check()


COCO_PERSON_NAMES = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
]
COCO_PERSON_FLIP_PAIRS = [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)]


@dataclass
class DatasetLayout:
    """Keypoint names plus the left/right and half-body structure of a dataset."""

    names: List[str]
    flip_pairs: List[tuple] = field(default_factory=list)
    upper_body: List[int] = field(default_factory=list)
    lower_body: List[int] = field(default_factory=list)

    @property
    def n_keypoints(self) -> int:
        return len(self.names)


def resolve_layout(source: str, n_keypoints: int, flip_pairs=None, upper_body=None, lower_body=None):
    """
    Layout for a dataset: explicit settings win, then the synthetic skeleton,
    then the COCO person layout for 17 keypoints; otherwise no flip pairs.
    """
    if flip_pairs is None and source == "synthetic":
        return default_skeleton()
    if flip_pairs is None and n_keypoints == len(COCO_PERSON_NAMES):
        return DatasetLayout(list(COCO_PERSON_NAMES), list(COCO_PERSON_FLIP_PAIRS),
                             list(range(0, 11)), list(range(11, 17)))
    everything = list(range(n_keypoints))
    layout = DatasetLayout(
        names=[f"kpt_{i}" for i in range(n_keypoints)],
        flip_pairs=[tuple(int(v) for v in p) for p in (flip_pairs or [])],
        upper_body=list(upper_body) if upper_body is not None else everything,
        lower_body=list(lower_body) if lower_body is not None else everything,
    )
    for i, j in layout.flip_pairs:
        if not (0 <= i < n_keypoints and 0 <= j < n_keypoints) or i == j:
            raise DatasetError(f"flip pair ({i}, {j}) invalid for {n_keypoints} keypoints")
    return layout


@dataclass
class Instance:
    """
    One cropped-or-original sample.

    image is [3, H, W] in [0, 1]; keypoints [N, 2] pixel-centre (x, y);
    visibility [N] in {0, 1, 2}; bbox an (x, y, w, h) pixel-edge box.
    """

    image: np.ndarray
    keypoints: np.ndarray
    visibility: np.ndarray
    bbox: tuple
    species_id: int = 0
    instance_id: str = ""
    area: Optional[float] = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.int64).reshape(-1)
        self.bbox = tuple(float(v) for v in self.bbox)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"{self.instance_id}: image must be [3, H, W], got {self.image.shape}")
        if len(self.visibility) != len(self.keypoints):
            raise DatasetError(f"{self.instance_id}: {len(self.keypoints)} keypoints, {len(self.visibility)} flags")
        if not (self.bbox[2] > 0 and self.bbox[3] > 0):
            raise DatasetError(f"{self.instance_id}: bounding box {self.bbox} has no area")
        _, h, w = self.image.shape
        vis = self.visibility > 0
        xs, ys = self.keypoints[vis, 0], self.keypoints[vis, 1]
        if np.any((xs < 0) | (xs > w - 1) | (ys < 0) | (ys > h - 1)):
            raise DatasetError(f"{self.instance_id}: visible keypoint outside the {w}x{h} image")

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def eval_area(self) -> float:
        """Area for OKS: the annotated area when present, else the box area."""
        return float(self.area) if self.area else self.bbox[2] * self.bbox[3]

    def keypoint_triplets(self) -> np.ndarray:
        return np.hstack([self.keypoints, self.visibility[:, None].astype(np.float64)])


# ----- synthetic generation -----

@dataclass
class SyntheticConfig:
    image_size: int = 160
    occlusion_rate: float = 0.1
    n_species: int = 3
    margin: float = 2.0
    body_rotation: float = 25.0


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.random((3, max(size // 8, 2), max(size // 8, 2)))
    base = rng.uniform(0.2, 0.8, size=3)
    layers = []
    for c in range(3):
        tile = Image.fromarray(coarse[c].astype(np.float32))
        smooth = np.asarray(tile.resize((size, size), Image.Resampling.BICUBIC), dtype=np.float64)
        fine = rng.normal(0.0, 0.04, size=(size, size))
        layers.append(0.6 * base[c] + 0.3 * smooth + fine)
    return np.clip(np.stack(layers), 0.0, 1.0)


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _paint(image: np.ndarray, coverage: np.ndarray, color: np.ndarray) -> None:
    image *= 1.0 - coverage
    image += coverage * color[:, None, None]


def _pose(spec: SkeletonSpec, rng: np.random.Generator, body_rotation: float) -> np.ndarray:
    """Keypoints relative to the root for random limb lengths and joint angles."""
    rel = np.zeros((spec.n_keypoints, 2))
    base = rng.uniform(-body_rotation, body_rotation)
    for i in range(1, spec.n_keypoints):
        lo, hi = spec.limb_length_ranges[i]
        length = rng.uniform(lo, hi)
        angle = math.radians(base + spec.rest_angles[i] + rng.uniform(-spec.angle_jitter[i], spec.angle_jitter[i]))
        rel[i] = rel[spec.parent[i]] + length * np.array([math.cos(angle), math.sin(angle)])
    return rel


def generate_instance(spec: SkeletonSpec, seed: int, index: int, cfg: Optional[SyntheticConfig] = None) -> Instance:
    """Render instance `index` of the synthetic dataset `seed`."""
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng([seed, index])
    size = cfg.image_size
    species = int(rng.integers(0, cfg.n_species))
    thickness = 2.0 + 1.0 * species + rng.uniform(0.0, 1.0)
    joint_radius = thickness + 1.0
    margin = max(cfg.margin, joint_radius + 1.0)

    rel = _pose(spec, rng, cfg.body_rotation)
    lo, hi = rel.min(axis=0), rel.max(axis=0)
    extent = float(max(hi - lo))
    room = size - 2.0 * margin - 1.0
    if extent > room:
        rel = rel * (room / extent)
        lo, hi = rel.min(axis=0), rel.max(axis=0)
    slack = np.maximum(room - (hi - lo), 0.0)
    origin = margin + rng.uniform(0.0, 1.0, size=2) * slack - lo
    keypoints = np.round((rel + origin) * COORD_GRID) / COORD_GRID
    keypoints = np.clip(keypoints, 0.0, size - 1.0)

    image = _background(rng, size)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    hue0 = rng.uniform(0.0, 1.0)
    for parent, child in spec.edges:
        hue = (hue0 + 0.07 * child + rng.uniform(-0.02, 0.02)) % 1.0
        color = _hsv_to_rgb(hue, 0.7, rng.uniform(0.6, 1.0))
        d = _segment_distance(xs, ys, keypoints[parent], keypoints[child])
        _paint(image, np.clip(thickness + 0.5 - d, 0.0, 1.0), color)
    for k in range(spec.n_keypoints):
        color = _hsv_to_rgb((k / spec.n_keypoints) % 1.0, 0.9, 0.95)
        d = np.hypot(xs - keypoints[k, 0], ys - keypoints[k, 1])
        _paint(image, np.clip(joint_radius + 0.5 - d, 0.0, 1.0), color)

    visibility = np.full(spec.n_keypoints, 2, dtype=np.int64)
    occluded = rng.random(spec.n_keypoints) < cfg.occlusion_rate
    half = int(math.ceil(joint_radius)) + 2
    for k in np.flatnonzero(occluded):
        visibility[k] = 1
        cx, cy = int(round(keypoints[k, 0])), int(round(keypoints[k, 1]))
        y0, y1 = max(cy - half, 0), min(cy + half + 1, size)
        x0, x1 = max(cx - half, 0), min(cx + half + 1, size)
        image[:, y0:y1, x0:x1] = rng.random((3, y1 - y0, x1 - x0))

    pad = joint_radius + 4.0
    bx0, by0 = np.maximum(keypoints.min(axis=0) - pad, 0.0)
    bx1, by1 = np.minimum(keypoints.max(axis=0) + pad + 1.0, float(size))
    return Instance(
        image=np.clip(image, 0.0, 1.0),
        keypoints=keypoints,
        visibility=visibility,
        bbox=(bx0, by0, bx1 - bx0, by1 - by0),
        species_id=species,
        instance_id=f"syn-{seed}-{index:05d}",
    )


def generate_synthetic(spec: SkeletonSpec, seed: int, count: int, cfg: Optional[SyntheticConfig] = None,
                       start: int = 0) -> List[Instance]:
    """
    `count` synthetic instances, deterministic per (seed, index).

    Example:
        train = generate_synthetic(default_skeleton(), seed=0, count=500)
        val = generate_synthetic(default_skeleton(), seed=0, count=100, start=500)
    """
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")
    spec.check()
    return [generate_instance(spec, seed, start + i, cfg) for i in range(count)]


def write_manifest(path: PathLike, seed: int, spec: SkeletonSpec, count: int, **extra) -> Path:
    """Synthetic dataset manifest: enough to regenerate it bit-identically."""
    data = {"seed": seed, "spec": spec.to_dict(), "count": count}
    data.update(extra)
    return write_json(path, data)


def read_manifest(path: PathLike) -> dict:
    try:
        data = read_json(path)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"Cannot read manifest {path}: {e}") from None
    missing = {"seed", "spec", "count"} - set(data)
    if missing:
        raise DatasetError(f"Manifest {path} lacks {sorted(missing)}")
    data["spec"] = SkeletonSpec.from_dict(data["spec"])
    return data


# ----- COCO keypoint format -----

def _load_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"Missing image file: {path}")
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise DatasetError(f"Cannot decode image {path}: {e}") from None
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def load_coco_keypoints(annotation_file: PathLike, image_root: PathLike) -> List[Instance]:
    """
    One Instance per COCO keypoint annotation.

    Annotations without any labeled keypoint are skipped (and counted);
    labeled keypoints that fall outside their image are marked invisible.
    """
    try:
        with open(annotation_file, "r", encoding="utf-8") as f:
            coco = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"Malformed COCO JSON {annotation_file}: {e}") from None
    except OSError as e:
        raise DatasetError(f"Cannot read {annotation_file}: {e}") from None
    if not isinstance(coco, dict) or "annotations" not in coco or "images" not in coco:
        raise DatasetError(f"{annotation_file} is not a COCO keypoint file (needs images[] and annotations[])")

    annotations = coco["annotations"]
    if not annotations:
        logger.warning(f"⚠️ {annotation_file}: no annotations, dataset is empty")
        return []

    n_keypoints = None
    for category in coco.get("categories", []):
        if category.get("keypoints"):
            n_keypoints = len(category["keypoints"])
            break
    if n_keypoints is None:
        n_keypoints = len(annotations[0].get("keypoints", [])) // 3

    files = {img["id"]: img["file_name"] for img in coco["images"]}
    cache, instances, skipped, clipped = {}, [], 0, 0
    root = Path(image_root)
    for ann in annotations:
        flat = ann.get("keypoints", [])
        if len(flat) != 3 * n_keypoints:
            raise DatasetError(
                f"annotation {ann.get('id')}: {len(flat)} keypoint values, expected {3 * n_keypoints}"
            )
        triplets = np.asarray(flat, dtype=np.float64).reshape(n_keypoints, 3)
        if not np.any(triplets[:, 2] > 0):
            skipped += 1
            continue
        image_id = ann["image_id"]
        if image_id not in files:
            raise DatasetError(f"annotation {ann.get('id')} refers to unknown image {image_id}")
        if image_id not in cache:
            cache[image_id] = _load_image(root / files[image_id])
        image = cache[image_id]

        _, h, w = image.shape
        vis = triplets[:, 2].astype(np.int64)
        xs, ys = triplets[:, 0], triplets[:, 1]
        outside = (vis > 0) & ((xs < 0) | (xs > w - 1) | (ys < 0) | (ys > h - 1))
        clipped += int(outside.sum())
        vis[outside] = 0
        instances.append(Instance(
            image=image,
            keypoints=triplets[:, :2],
            visibility=vis,
            bbox=tuple(ann["bbox"]),
            species_id=int(ann.get("category_id", 0)),
            instance_id=str(ann.get("id", len(instances))),
            area=ann.get("area"),
        ))
    if skipped:
        logger.info(f"Skipped {skipped} annotation(s) without labeled keypoints")
    if clipped:
        logger.warning(f"⚠️ {clipped} labeled keypoint(s) outside their image marked invisible")
    logger.info(f"✅ Loaded {len(instances)} instance(s) from {annotation_file}")
    return instances


def export_coco_keypoints(instances: Sequence[Instance], out_dir: PathLike, spec: SkeletonSpec,
                          annotation_name: str = "annotations.json") -> Path:
    """
    Write instances as PNG images plus a COCO keypoint JSON.

    Returns:
        Path: the annotation file
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for n, inst in enumerate(instances):
        name = f"{inst.instance_id or n}.png"
        pixels = np.round(np.clip(inst.image, 0.0, 1.0).transpose(1, 2, 0) * 255.0).astype(np.uint8)
        with SafeFileWriter(out / "images" / name, mode="wb") as f:
            Image.fromarray(pixels).save(f, format="PNG")
        _, h, w = inst.image.shape
        images.append({"id": n, "file_name": f"images/{name}", "width": w, "height": h})
        flat = []
        for (x, y), v in zip(inst.keypoints, inst.visibility):
            flat.extend([float(x), float(y), int(v)] if v > 0 else [0, 0, 0])
        annotations.append({
            "id": inst.instance_id or n,
            "image_id": n,
            "category_id": inst.species_id,
            "bbox": list(inst.bbox),
            "area": inst.eval_area,
            "num_keypoints": int(np.sum(inst.visibility > 0)),
            "keypoints": flat,
            "iscrowd": 0,
        })
    species = sorted({inst.species_id for inst in instances})
    categories = [{
        "id": s, "name": f"species_{s}", "keypoints": spec.names,
        "skeleton": [[p + 1, c + 1] for p, c in spec.edges],
    } for s in species]
    path = out / annotation_name
    with SafeFileWriter(path) as f:
        f.write(dumps_json({"images": images, "annotations": annotations, "categories": categories}))
    logger.info(f"💾 Exported {len(annotations)} annotation(s) to {path}")
    return path


# ----- iteration -----

def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)


def iterate_batches(
    instances: Sequence[Instance],
    batch_size: int,
    seed: int,
    epoch: int,
    prepare: Callable[[Instance, np.random.Generator, int], object],
    shuffle: bool = True,
    workers: int = 0,
) -> Iterator[list]:
    """
    Yield lists of prepared items.

    Each instance gets its own generator seeded by (seed, epoch, index), so
    the result is the same for any number of workers.

    Args:
        prepare: callable(instance, rng, index) -> item
        workers: thread-pool size for preparation; 0 prepares inline
    """
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(instances), seed, epoch, shuffle)

    def run(index: int):
        rng = np.random.default_rng([seed, epoch, int(index)])
        return prepare(instances[index], rng, int(index))

    pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None
    try:
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            yield list(pool.map(run, chunk)) if pool else [run(i) for i in chunk]
    finally:
        if pool:
            pool.shutdown(wait=True)
