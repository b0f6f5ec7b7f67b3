"""
Trainer - dataset resolution, the training loop and checkpoint evaluation.

Example:
    cfg = load_config("configs/desk.toml")
    result = train(cfg)
    stats = evaluate(result.best_path, *load_datasets(cfg)[1:], flip_test=True)
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np

from kitpose import numerics as nx
from kitpose.checkpoint import Checkpoint, load_checkpoint, restore_model, save_checkpoint, validate_checkpoint_compat
from kitpose.config import TrainConfig, config_hash, from_dict, to_dict, write_resolved_config
from kitpose.data import (
    Instance,
    SyntheticConfig,
    default_skeleton,
    generate_synthetic,
    iterate_batches,
    load_coco_keypoints,
    resolve_layout,
    write_manifest,
)
from kitpose.errors import CheckpointError, DatasetError, NumericalError
from kitpose.heatmap_codec import (
    HeatmapTarget,
    decode_batch,
    encode_targets,
    flip_heatmaps,
    heatmap_to_image,
    image_to_heatmap,
    laplacian_spec,
    stack_targets,
    write_keypoints_csv,
)
from kitpose.kit_model import BACKBONE_STRIDE, KitPoseModel
from kitpose.losses import GhrlConfig, WeightStrategy, total_loss
from kitpose.metrics import EvalRecord, summarize, write_per_keypoint_csv, write_results
from kitpose.optim import Adam, MultiStepLR
from kitpose.plotting import plot_curves, write_csv
from kitpose.resource_manager import PathLike, ensure_run_dir, write_json
from kitpose.transforms import AffineRecord, augment, crop_resize

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "lr", "loss", "final", "ghrl", "val_pck", "val_ap", "seconds"]
SELECTION_METRIC = "PCK05"


class Sample(NamedTuple):
    instance_id: str
    image: np.ndarray
    target: HeatmapTarget
    record: AffineRecord


@dataclass
class TrainResult:
    run_dir: Path
    best_path: Path
    last_path: Path
    config_hash: str
    history: List[dict] = field(default_factory=list)
    best_metric: float = float("-inf")

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"] if self.history else float("nan")


# ----- data -----

def load_datasets(cfg: TrainConfig) -> tuple:
    """
    Returns:
        tuple: (train instances, val instances, layout with names / flip_pairs / half-body sets)
    """
    data = cfg.data
    if data.source == "synthetic":
        spec = default_skeleton()
        if spec.n_keypoints != cfg.model.n_keypoints:
            raise DatasetError(
                f"the synthetic skeleton has {spec.n_keypoints} keypoints, model.n_keypoints is {cfg.model.n_keypoints}"
            )
        syn = SyntheticConfig(image_size=data.canvas_size, occlusion_rate=data.occlusion_rate, n_species=data.n_species)
        train_set = generate_synthetic(spec, cfg.seed, data.train_count, syn)
        val_set = generate_synthetic(spec, cfg.seed, data.val_count, syn, start=data.train_count)
        logger.info(f"✅ Synthetic data: {len(train_set)} train / {len(val_set)} val (seed {cfg.seed})")
        return train_set, val_set, spec

    root = data.image_root or str(Path(data.train_annotations).parent)
    train_set = load_coco_keypoints(data.train_annotations, root)
    val_root = data.image_root or str(Path(data.val_annotations).parent)
    val_set = load_coco_keypoints(data.val_annotations, val_root)
    if not train_set or not val_set:
        raise DatasetError("COCO train and val splits must both contain instances")
    n = train_set[0].n_keypoints
    if n != cfg.model.n_keypoints:
        raise DatasetError(f"annotations carry {n} keypoints, model.n_keypoints is {cfg.model.n_keypoints}")
    layout = resolve_layout(data.source, n, data.flip_pairs, data.upper_body, data.lower_body)
    return train_set, val_set, layout


def ghrl_config(cfg: TrainConfig) -> Optional[GhrlConfig]:
    if not cfg.loss.use_ghrl:
        return None
    return GhrlConfig(
        beta=cfg.loss.ghrl_beta,
        kernel_spec=laplacian_spec(cfg.loss.laplacian_size),
        reduction=cfg.loss.ghrl_reduction,
        differentiable_weights=cfg.loss.differentiable_weights,
    )


def weight_strategy(cfg: TrainConfig) -> WeightStrategy:
    loss = cfg.loss
    return WeightStrategy.create(
        loss.weighting, cfg.model.n_keypoints, w=loss.keypoint_weights, lam=loss.lam,
        gamma=loss.gamma, differentiable_weights=loss.differentiable_weights,
    )


def make_target(inst: Instance, cfg: TrainConfig) -> HeatmapTarget:
    """Heatmap targets for a crop; keypoints that miss the heatmap grid count as invisible."""
    h, w = cfg.model.heatmap_size
    xy = image_to_heatmap(inst.keypoints, BACKBONE_STRIDE)
    vis = inst.visibility > 0
    vis &= (xy[:, 0] >= 0) & (xy[:, 0] < w) & (xy[:, 1] >= 0) & (xy[:, 1] < h)
    triplets = np.hstack([xy, vis[:, None].astype(np.float64)])
    kernel = laplacian_spec(cfg.loss.laplacian_size)
    return encode_targets(triplets, h, w, cfg.loss.sigma, kernel_spec=kernel)


class SamplePreparer:
    """callable(instance, rng, index) -> Sample, for `iterate_batches`."""

    def __init__(self, cfg: TrainConfig, layout, instances: Sequence[Instance], training: bool):
        self.cfg = cfg
        self.layout = layout
        self.instances = instances
        self.training = training

    def __call__(self, inst: Instance, rng: np.random.Generator, index: int) -> Sample:
        out_size = self.cfg.model.image_size
        if self.training:
            donor = None
            if self.cfg.augment.cutmix_prob > 0 and len(self.instances) > 1:
                donor = self.instances[int(rng.integers(len(self.instances)))]
            crop, record = augment(inst, self.cfg.augment, rng, out_size, skeleton=self.layout, donor=donor)
        else:
            crop, record = crop_resize(inst, out_size, padding=self.cfg.augment.padding)
        image = crop.image.astype(nx.get_dtype())
        return Sample(inst.instance_id, image, make_target(crop, self.cfg), record)


def collate(samples: Sequence[Sample]) -> tuple:
    """Returns: (images [B, 3, H, W], stacked target, visibility [B, N], instance ids)."""
    images = np.stack([s.image for s in samples])
    target = stack_targets([s.target for s in samples])
    vis = target.visible.astype(np.float64)
    return images, target, vis, [s.instance_id for s in samples]


# ----- training -----

def _dump_nan(run_dir: Path, epoch: int, ids: list, terms: dict, error: Exception) -> Path:
    path = run_dir / "nan_dump.json"
    write_json(path, {
        "epoch": epoch,
        "instance_ids": list(ids),
        "loss_terms": {k: (v if math.isfinite(v) else str(v)) for k, v in terms.items()},
        "error": str(error),
    })
    logger.error(f"❌ Non-finite loss at epoch {epoch}; diagnostics in {path}")
    return path


def train_step(model: KitPoseModel, optimizer: Adam, batch: tuple, strategy: WeightStrategy,
               ghrl_cfg: Optional[GhrlConfig], mu: float) -> dict:
    """One forward/backward/update; returns the float loss terms."""
    images, target, vis, _ = batch
    optimizer.zero_grad()
    out = model(images)
    loss, terms = total_loss(out.heatmaps, out.f_k, target, vis, strategy, ghrl_cfg, mu)
    if not math.isfinite(terms["total"]):
        error = NumericalError(f"loss is {terms['total']}")
        error.terms = terms
        raise error
    nx.backward(loss)
    optimizer.step()
    return terms


def _log_row(path: Path, history: List[dict]) -> None:
    write_csv(path, LOG_COLUMNS, ([row.get(c, "") for c in LOG_COLUMNS] for row in history))


def train(cfg: TrainConfig, run_dir: Optional[PathLike] = None) -> TrainResult:
    """
    Full training run into `run_dir` (defaults to cfg.run_dir).

    Writes resolved_config.json, train_log.csv + train_curve.png, best.ckpt
    (highest val PCK) and last.ckpt. Single-worker runs are bit-reproducible.

    Raises:
        NumericalError: non-finite loss (after writing nan_dump.json)
    """
    run_dir = ensure_run_dir(run_dir or cfg.run_dir)
    with nx.precision(cfg.precision):
        digest = write_resolved_config(cfg, run_dir)
        train_set, val_set, layout = load_datasets(cfg)
        if cfg.data.source == "synthetic":
            write_manifest(run_dir / "dataset_manifest.json", cfg.seed, layout, cfg.data.train_count,
                           val_count=cfg.data.val_count)

        model = KitPoseModel(cfg.model, seed=cfg.seed)
        model.workers = cfg.workers
        strategy = weight_strategy(cfg)
        ghrl_cfg = ghrl_config(cfg)
        params = dict(model.params)
        params.update(strategy.parameters())
        opt = cfg.optim
        optimizer = Adam(params, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
                         weight_decay=opt.weight_decay, no_decay=tuple(strategy.parameters()))
        scheduler = MultiStepLR(optimizer, cfg.schedule.milestones, cfg.schedule.factor)
        prepare = SamplePreparer(cfg, layout, train_set, training=True)

        result = TrainResult(run_dir, run_dir / "best.ckpt", run_dir / "last.ckpt", digest)
        config_echo = to_dict(cfg)
        logger.info(f"🔄 Training {cfg.model.tag} for {cfg.schedule.epochs} epoch(s) into {run_dir}")

        for epoch in range(cfg.schedule.epochs):
            started = time.perf_counter()
            lr = scheduler.set_epoch(epoch)
            model.train()
            sums, n_batches = {}, 0
            for batch_samples in iterate_batches(train_set, cfg.batch_size, cfg.seed, epoch, prepare,
                                                 shuffle=True, workers=cfg.workers):
                batch = collate(batch_samples)
                try:
                    terms = train_step(model, optimizer, batch, strategy, ghrl_cfg, cfg.loss.ghrl_mu)
                except NumericalError as e:
                    _dump_nan(run_dir, epoch, batch[3], getattr(e, "terms", {}), e)
                    raise
                for key, value in terms.items():
                    sums[key] = sums.get(key, 0.0) + value
                n_batches += 1
                logger.debug(f"epoch {epoch} batch {n_batches}: " + ", ".join(f"{k}={v:.6f}" for k, v in terms.items()))

            row = {"epoch": epoch, "lr": lr, "loss": sums["total"] / n_batches,
                   "final": sums["final"] / n_batches, "ghrl": sums.get("ghrl", 0.0) / n_batches}
            last_epoch = epoch == cfg.schedule.epochs - 1
            stats = None
            if last_epoch or (epoch + 1) % cfg.eval.val_every == 0:
                stats, _ = evaluate_model(model, val_set, layout, cfg, flip_test=cfg.eval.flip_test)
                row["val_pck"], row["val_ap"] = stats[SELECTION_METRIC], stats["AP"]
            row["seconds"] = round(time.perf_counter() - started, 3)
            result.history.append(row)

            val_text = f", val PCK {row['val_pck']:.4f} AP {row['val_ap']:.4f}" if stats else ""
            logger.info(f"Epoch {epoch + 1}/{cfg.schedule.epochs}: loss {row['loss']:.6f} "
                        f"(final {row['final']:.6f}, ghrl {row['ghrl']:.6f}), lr {lr:.1e}{val_text}")

            arrays = _state_arrays(model, strategy, optimizer)
            metrics = {k: v for k, v in row.items() if k != "seconds"}
            if stats and stats[SELECTION_METRIC] > result.best_metric:
                result.best_metric = stats[SELECTION_METRIC]
                save_checkpoint(result.best_path, arrays, config_echo, epoch, cfg.seed, cfg.precision, metrics)
            save_checkpoint(result.last_path, arrays, config_echo, epoch, cfg.seed, cfg.precision, metrics)

        _log_row(run_dir / "train_log.csv", result.history)
        epochs = [r["epoch"] for r in result.history]
        plot_curves(run_dir / "train_curve.png", epochs, {
            "loss": [r["loss"] for r in result.history],
            "val PCK@0.05": [r.get("val_pck") for r in result.history],
        })
    logger.info(f"✅ Training done: best val {SELECTION_METRIC} {result.best_metric:.4f}")
    return result


def _state_arrays(model: KitPoseModel, strategy: WeightStrategy, optimizer: Adam) -> dict:
    arrays = dict(model.state_arrays())
    if strategy.learnable_w is not None:
        arrays["loss/keypoint_weights"] = strategy.learnable_w.data
    arrays.update(optimizer.state_arrays())
    return arrays


# ----- evaluation -----

def predict(model: KitPoseModel, instances: Sequence[Instance], layout, cfg: TrainConfig,
            flip_test: bool = True) -> np.ndarray:
    """
    Keypoint predictions [M, N, 3] (x, y, score) in each instance's original frame.

    With `flip_test` the heatmaps of the mirrored crop are mirrored back,
    left/right channels swapped, and averaged with the plain heatmaps before
    decoding.
    """
    model.eval()
    prepare = SamplePreparer(cfg, layout, instances, training=False)
    preds = []
    with nx.no_grad():
        for samples in iterate_batches(instances, cfg.batch_size, cfg.seed, 0, prepare, shuffle=False):
            images = np.stack([s.image for s in samples])
            heatmaps = model(images).heatmaps.data
            if flip_test:
                mirrored = np.ascontiguousarray(images[..., ::-1])
                heatmaps = 0.5 * (heatmaps + flip_heatmaps(model(mirrored).heatmaps.data, layout.flip_pairs))
            decoded = decode_batch(heatmaps, cfg.eval.decode_mode)
            for sample, kp in zip(samples, decoded):
                xy = sample.record.invert(heatmap_to_image(kp[:, :2], BACKBONE_STRIDE))
                preds.append(np.hstack([xy, kp[:, 2:]]))
    return np.stack(preds)


def evaluate_model(model: KitPoseModel, instances: Sequence[Instance], layout, cfg: TrainConfig,
                   flip_test: bool = True) -> tuple:
    """Returns: (summary stats dict, predictions [M, N, 3])."""
    preds = predict(model, instances, layout, cfg, flip_test=flip_test)
    records = [EvalRecord.from_instance(inst, p) for inst, p in zip(instances, preds)]
    return summarize(records, cfg.eval.pck_alpha), preds


def load_eval_instances(ckpt: Checkpoint, data: Optional[PathLike] = None,
                        image_root: Optional[PathLike] = None) -> tuple:
    """
    Instances to score a checkpoint on: a COCO keypoint JSON when `data` is
    given, else the validation split of the checkpoint's own config.

    Returns:
        tuple: (instances, layout)
    """
    cfg = from_dict(ckpt.manifest["config"])
    if data is None:
        _, val_set, layout = load_datasets(cfg)
        return val_set, layout
    instances = load_coco_keypoints(data, image_root or Path(data).parent)
    if not instances:
        raise DatasetError(f"{data} holds no instances to evaluate")
    n = instances[0].n_keypoints
    layout = resolve_layout(cfg.data.source, n, cfg.data.flip_pairs, cfg.data.upper_body, cfg.data.lower_body)
    return instances, layout


def evaluate(
    checkpoint: Union[PathLike, Checkpoint],
    instances: Sequence[Instance],
    layout,
    flip_test: bool = True,
    out_dir: Optional[PathLike] = None,
) -> dict:
    """
    Score a checkpoint. With `out_dir`, writes results.json,
    per_keypoint_pck.csv and predictions.csv there.

    Raises:
        CheckpointError: keypoint count or flip pairs do not fit the checkpoint
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if not instances:
        raise DatasetError("nothing to evaluate")
    ok, message = validate_checkpoint_compat(ckpt, instances[0].n_keypoints, layout.flip_pairs)
    if not ok:
        raise CheckpointError(message)
    cfg = from_dict(ckpt.manifest["config"])
    with nx.precision(ckpt.manifest.get("precision", cfg.precision)):
        model = restore_model(ckpt)
        stats, preds = evaluate_model(model, instances, layout, cfg, flip_test=flip_test)
    stats["flip_test"] = bool(flip_test)
    stats["n_instances"] = len(instances)
    digest = config_hash(cfg)
    logger.info(f"✅ AP {stats['AP']:.4f}, PCK@{cfg.eval.pck_alpha} {stats[SELECTION_METRIC]:.4f} "
                f"over {len(instances)} instance(s)")

    if out_dir is not None:
        out = ensure_run_dir(out_dir)
        write_results(out / "results.json", stats, digest)
        write_per_keypoint_csv(out / "per_keypoint_pck.csv", layout.names, stats["per_keypoint_pck"])
        write_keypoints_csv(out / "predictions.csv", (
            (inst.instance_id, k, x, y, s)
            for inst, p in zip(instances, preds) for k, (x, y, s) in enumerate(p)
        ))
    return stats


def evaluate_ground_truth(instances: Sequence[Instance], alpha: float = 0.05) -> dict:
    """Metrics with the annotations themselves as predictions (a sanity baseline)."""
    records = [
        EvalRecord.from_instance(inst, np.hstack([inst.keypoints, np.ones((inst.n_keypoints, 1))]))
        for inst in instances
    ]
    return summarize(records, alpha)

