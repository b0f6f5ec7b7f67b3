"""
Configuration
TrainConfig tree loaded from TOML, dotted CLI overrides, validation and
provenance (resolved config + hash written beside every run).

Example:
    cfg = load_config("configs/desk.toml", overrides=["model.n_layers=0"])
    ok, message = validate_config(cfg)
"""

import dataclasses
import hashlib
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from kitpose.errors import ConfigError
from kitpose.heatmap_codec import DECODE_MODES, DISTRIBUTION_AWARE, LAPLACIAN_KERNELS
from kitpose.kit_model import ModelConfig
from kitpose.losses import WEIGHTING_KINDS
from kitpose.numerics import PRECISIONS
from kitpose.prompts import PromptConfig
from kitpose.resource_manager import PathLike, dumps_json, write_json
from kitpose.transforms import AugmentConfig

logger = logging.getLogger(__name__)

SEED_ENV = "KITPOSE_SEED"
DATA_SOURCES = ("synthetic", "coco_json")


@dataclass
class LossConfig:
    weighting: str = "adaptive"
    gamma: float = 2.0
    lam: float = 0.01
    ghrl_beta: float = 1.0
    ghrl_mu: float = 1.0
    use_ghrl: bool = True
    laplacian_size: int = 3
    ghrl_reduction: str = "mean"
    sigma: float = 1.0
    differentiable_weights: bool = False
    keypoint_weights: Optional[list] = None


@dataclass
class OptimConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class ScheduleConfig:
    epochs: int = 32
    milestones: list = field(default_factory=lambda: [20, 28])
    factor: float = 0.1


@dataclass
class DataConfig:
    source: str = "synthetic"
    train_count: int = 500
    val_count: int = 100
    canvas_size: int = 160
    occlusion_rate: float = 0.1
    n_species: int = 3
    train_annotations: str = ""
    val_annotations: str = ""
    image_root: str = ""
    flip_pairs: Optional[list] = None
    upper_body: Optional[list] = None
    lower_body: Optional[list] = None


@dataclass
class EvalConfig:
    flip_test: bool = True
    decode_mode: str = DISTRIBUTION_AWARE
    pck_alpha: float = 0.05
    val_every: int = 1


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    precision: str = "float32"
    batch_size: int = 16
    workers: int = 0
    run_dir: str = "runs/desk"


# section -> (dataclass, {toml key: field name})
_SECTIONS = {
    "model": (ModelConfig, {}),
    "model.prompt": (PromptConfig, {}),
    "loss": (LossConfig, {"lambda": "lam"}),
    "optim": (OptimConfig, {}),
    "schedule": (ScheduleConfig, {}),
    "data": (DataConfig, {}),
    "augment": (AugmentConfig, {}),
    "eval": (EvalConfig, {}),
}
_TOP_LEVEL = {f.name for f in dataclasses.fields(TrainConfig)} - {s for s in _SECTIONS if "." not in s}


def _build(section: str, data: Mapping):
    cls, aliases = _SECTIONS[section]
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        child = f"{section}.{key}"
        if child in _SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{child}] must be a table")
            kwargs[name] = _build(child, value)
        elif name in names:
            kwargs[name] = value
        else:
            raise ConfigError(f"Unknown config key '{child}'")
    return cls(**kwargs)


def from_dict(data: Mapping) -> TrainConfig:
    """Build a TrainConfig from a nested mapping (unknown keys are errors)."""
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{key}] must be a table")
            kwargs[key] = _build(key, value)
        elif key in _TOP_LEVEL:
            kwargs[key] = value
        else:
            raise ConfigError(f"Unknown config key '{key}'")
    try:
        return TrainConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}") from None


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items() if v is not None}
    return value


def to_dict(cfg: TrainConfig) -> dict:
    """Nested plain dict using the TOML key names; None values are dropped."""
    data = _plain(dataclasses.asdict(cfg))
    loss = data["loss"]
    loss["lambda"] = loss.pop("lam")
    return data


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    """
    Apply `section.key=value` strings; values are parsed as TOML literals and
    fall back to plain strings.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override '{dotted}' descends into a non-table")
        node[keys[-1]] = _parse_value(raw.strip())
    return data


def read_toml(path: PathLike) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Malformed TOML in {path}: {e}") from None


def load_config(
    path: Optional[PathLike] = None,
    overrides: Iterable[str] = (),
    env: Optional[Mapping[str, str]] = None,
) -> TrainConfig:
    """
    Defaults <- TOML file <- overrides <- KITPOSE_SEED.

    Raises:
        ConfigError: unknown keys, bad values or a failed validation
    """
    env = os.environ if env is None else env
    data = read_toml(path) if path else {}
    apply_overrides(data, overrides)
    if env.get(SEED_ENV):
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got '{env[SEED_ENV]}'") from None
    cfg = from_dict(data)
    ok, message = validate_config(cfg)
    if not ok:
        raise ConfigError(message)
    return cfg


def validate_config(cfg: TrainConfig) -> tuple:
    """
    Cross-field checks.

    Returns:
        tuple: (is_valid, error_message)
    """
    milestones = list(cfg.schedule.milestones)
    if cfg.schedule.epochs < 1:
        return False, "schedule.epochs must be >= 1"
    if any(b <= a for a, b in zip(milestones, milestones[1:])):
        return False, f"schedule.milestones must be strictly increasing, got {milestones}"
    if milestones and (milestones[0] < 1 or milestones[-1] >= cfg.schedule.epochs):
        return False, f"schedule.milestones must lie in [1, epochs), got {milestones}"
    if not 0 < cfg.schedule.factor <= 1:
        return False, "schedule.factor must lie in (0, 1]"
    if cfg.precision not in PRECISIONS:
        return False, f"precision must be one of {sorted(PRECISIONS)}"
    if cfg.batch_size < 1:
        return False, "batch_size must be >= 1"
    if cfg.workers < 0:
        return False, "workers must be >= 0"

    loss = cfg.loss
    if loss.weighting not in WEIGHTING_KINDS:
        return False, f"loss.weighting must be one of {WEIGHTING_KINDS}"
    if loss.gamma < 0 or loss.lam < 0 or loss.ghrl_beta < 0 or loss.ghrl_mu < 0:
        return False, "loss.gamma, loss.lambda, loss.ghrl_beta and loss.ghrl_mu must be >= 0"
    if loss.laplacian_size not in LAPLACIAN_KERNELS:
        return False, f"loss.laplacian_size must be one of {sorted(LAPLACIAN_KERNELS)}"
    if loss.ghrl_reduction not in ("mean", "sum"):
        return False, "loss.ghrl_reduction must be 'mean' or 'sum'"
    if loss.sigma <= 0:
        return False, "loss.sigma must be positive"
    if loss.keypoint_weights is not None:
        if len(loss.keypoint_weights) != cfg.model.n_keypoints:
            return False, "loss.keypoint_weights needs one entry per keypoint"
        if any(w < 0 for w in loss.keypoint_weights):
            return False, "loss.keypoint_weights must be non-negative"

    opt = cfg.optim
    if opt.lr <= 0 or not 0 <= opt.beta1 < 1 or not 0 <= opt.beta2 < 1 or opt.weight_decay < 0:
        return False, "optimizer needs lr > 0, betas in [0, 1) and weight_decay >= 0"

    data = cfg.data
    if data.source not in DATA_SOURCES:
        return False, f"data.source must be one of {DATA_SOURCES}"
    if data.source == "synthetic":
        if data.train_count < 1 or data.val_count < 1:
            return False, "data.train_count and data.val_count must be >= 1"
        if not 0 <= data.occlusion_rate < 1:
            return False, "data.occlusion_rate must lie in [0, 1)"
    else:
        for key in ("train_annotations", "val_annotations"):
            if not getattr(data, key):
                return False, f"data.{key} is required for coco_json data"

    if cfg.eval.decode_mode not in DECODE_MODES:
        return False, f"eval.decode_mode must be one of {DECODE_MODES}"
    if cfg.eval.pck_alpha <= 0 or cfg.eval.val_every < 1:
        return False, "eval.pck_alpha must be > 0 and eval.val_every >= 1"
    return True, ""


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(dumps_json(to_dict(cfg)).encode("utf-8")).hexdigest()


def write_resolved_config(cfg: TrainConfig, run_dir: PathLike) -> str:
    """Write resolved_config.json into `run_dir` and return the config hash."""
    path = Path(run_dir) / "resolved_config.json"
    write_json(path, to_dict(cfg))
    digest = config_hash(cfg)
    logger.info(f"💾 Resolved config written to {path} (hash {digest[:12]})")
    return digest


def model_config_from_dict(data: Mapping) -> ModelConfig:
    """Rebuild a ModelConfig from its to_dict() form (checkpoint manifests)."""
    return _build("model", data)
