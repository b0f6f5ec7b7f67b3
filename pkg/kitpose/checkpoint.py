"""
Checkpoints - one deterministic zip per snapshot.

Layout:
    manifest.json          config echo, epoch, seed, precision, metrics, array index
    arrays/<name>.npy      one entry per parameter, buffer and optimizer moment

Entries are stored uncompressed, sorted, with a fixed timestamp, so equal
states give byte-identical files.
"""

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from kitpose.errors import CheckpointError
from kitpose.kit_model import KitPoseModel, ModelConfig
from kitpose.resource_manager import PathLike, dumps_json, write_bytes

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict = field(default_factory=dict)

    @property
    def model_config(self) -> dict:
        return self.manifest["config"]["model"]

    @property
    def epoch(self) -> int:
        return int(self.manifest.get("epoch", -1))


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(
    path: PathLike,
    arrays: dict,
    config: dict,
    epoch: int,
    seed: int,
    precision: str,
    metrics: Optional[dict] = None,
) -> None:
    """
    Write arrays plus manifest atomically.

    Args:
        arrays: name -> ndarray (model.state_arrays(), optimizer state, ...)
        config: resolved TrainConfig as a plain dict
    """
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "epoch": epoch,
        "seed": seed,
        "precision": precision,
        "metrics": metrics or {},
        "arrays": {k: {"shape": list(np.shape(v)), "dtype": str(np.asarray(v).dtype)} for k, v in arrays.items()},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_entry(MANIFEST_NAME), dumps_json(manifest))
        for name in sorted(arrays):
            zf.writestr(_entry(f"arrays/{name}.npy"), _npy_bytes(np.asarray(arrays[name])))
    write_bytes(path, buf.getvalue())
    logger.info(f"💾 Checkpoint saved: {path} (epoch {epoch})")


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    Raises:
        CheckpointError: missing file, corrupt archive or inconsistent index
    """
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read(MANIFEST_NAME).decode("utf-8"))
            arrays = {}
            for name in manifest.get("arrays", {}):
                with zf.open(f"arrays/{name}.npy") as f:
                    arrays[name] = np.lib.format.read_array(io.BytesIO(f.read()), allow_pickle=False)
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: {path}") from None
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}") from None

    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format {manifest.get('format_version')}")
    for name, meta in manifest["arrays"].items():
        if list(arrays[name].shape) != meta["shape"]:
            raise CheckpointError(f"{path}: array '{name}' has shape {arrays[name].shape}, index says {meta['shape']}")
    return Checkpoint(manifest=manifest, arrays=arrays)


def validate_checkpoint_compat(ckpt: Checkpoint, n_keypoints: int, flip_pairs=None) -> tuple:
    """
    Check a checkpoint against a dataset skeleton.

    Returns:
        tuple: (is_compatible, error_message)
    """
    ckpt_n = int(ckpt.model_config.get("n_keypoints", -1))
    if ckpt_n != n_keypoints:
        return False, f"checkpoint predicts {ckpt_n} keypoints, dataset skeleton has {n_keypoints}"
    for a, b in flip_pairs or ():
        if not (0 <= a < ckpt_n and 0 <= b < ckpt_n):
            return False, f"flip pair ({a}, {b}) out of range for {ckpt_n} keypoints"
    return True, ""


def restore_model(ckpt: Checkpoint) -> KitPoseModel:
    """Rebuild the model from the manifest and load its parameters and buffers."""
    from kitpose.config import model_config_from_dict

    model_cfg: ModelConfig = model_config_from_dict(ckpt.model_config)
    model = KitPoseModel(model_cfg, seed=int(ckpt.manifest.get("seed", 0)))
    state = {k: v for k, v in ckpt.arrays.items() if k.startswith(("param/", "buffer/"))}
    try:
        model.load_state_arrays(state)
    except ValueError as e:
        raise CheckpointError(f"Checkpoint does not fit its own model config: {e}") from None
    return model.eval()
