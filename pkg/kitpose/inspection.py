"""
Inspection - gradient verification, body-part cluster dumps, the prompt-count
sweep and ablation rows.

The gradient report compares backward() against central differences for every
block with trainable state. Stop-gradient quantities (adaptive weights, GHRL
modulation, body-part biases) are computed once at the unperturbed point and
held fixed, so both sides differentiate the same function.
"""

import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from kitpose import layers
from kitpose import numerics as nx
from kitpose.checkpoint import Checkpoint, load_checkpoint, restore_model
from kitpose.config import TrainConfig, from_dict
from kitpose.data import Instance
from kitpose.errors import ConfigError
from kitpose.heatmap_codec import encode_targets, laplacian_spec, stack_targets
from kitpose.kit_model import KitPoseModel, ModelConfig, attention_layer
from kitpose.losses import (
    CONSTRAINED,
    HAND_CRAFTED,
    WEIGHTING_KINDS,
    GhrlConfig,
    WeightStrategy,
    adaptive_mse,
    adaptive_weight_map,
    constrained_loss,
    ghrl,
    ghrl_modulation,
    total_loss,
)
from kitpose.numerics import Tensor
from kitpose.plotting import plot_assignment, plot_attention, plot_bars, plot_curves, write_csv
from kitpose.prompts import init_nanoblock, nanoblock_context
from kitpose.resource_manager import PathLike, ensure_run_dir
from kitpose.trainer import ghrl_config, train, weight_strategy
from kitpose.transforms import crop_resize

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
DEFAULT_PROBES = 24
GRADCHECK_BATCH = 2
QUADRANTS = ("BP-to-BP", "BP-to-KPT", "KPT-to-BP", "KPT-to-KPT")
SWEEP_PROMPTS = tuple(range(1, 7))


# ----- gradient report -----

@dataclass
class GradcheckRow:
    block: str
    tensor: str
    shape: tuple
    probed: int
    rel_error: float


@dataclass
class GradcheckReport:
    rows: List[GradcheckRow] = field(default_factory=list)
    tolerance: float = GRADCHECK_TOLERANCE

    def block_errors(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for row in self.rows:
            out[row.block] = max(out.get(row.block, 0.0), row.rel_error)
        return out

    @property
    def max_error(self) -> float:
        return max((r.rel_error for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.rel_error <= self.tolerance for r in self.rows)

    def tensors(self, block: str) -> List[str]:
        return [r.tensor for r in self.rows if r.block == block]

    def write(self, out_dir: PathLike) -> Path:
        path = Path(out_dir) / "gradcheck_report.csv"
        write_csv(path, ["block", "tensor", "shape", "probed", "rel_error", "passed"], (
            [r.block, r.tensor, "x".join(map(str, r.shape)), r.probed, r.rel_error,
             int(r.rel_error <= self.tolerance)]
            for r in self.rows
        ))
        return path


def _probe_indices(rng: np.random.Generator, size: int, probes: int) -> List[int]:
    if size <= probes:
        return list(range(size))
    return sorted(int(i) for i in rng.choice(size, probes, replace=False))


def check_block(name: str, f: Callable[[], Tensor], tensors: Dict[str, Tensor],
                rng: np.random.Generator, probes: int = DEFAULT_PROBES) -> List[GradcheckRow]:
    """Relative error of backward() against central differences for each named tensor."""
    nx.zero_grad(tensors.values())
    nx.backward(f())
    analytic = {k: t.grad.copy() for k, t in tensors.items()}
    indices = [_probe_indices(rng, t.size, probes) for t in tensors.values()]
    numeric = nx.finite_diff_gradient(f, list(tensors.values()), indices=indices)
    rows = []
    for (key, t), num, idx in zip(tensors.items(), numeric, indices):
        err = nx.relative_error(analytic[key], num)
        rows.append(GradcheckRow(name, key, tuple(t.shape), len(idx), err))
    worst = max((r.rel_error for r in rows), default=0.0)
    logger.debug(f"gradcheck {name}: {len(rows)} tensor(s), max rel error {worst:.2e}")
    return rows


def _random_targets(rng: np.random.Generator, model_cfg: ModelConfig, ghrl_cfg: GhrlConfig, sigma: float,
                    batch: int) -> tuple:
    h, w = model_cfg.heatmap_size
    n = model_cfg.n_keypoints
    targets = []
    for _ in range(batch):
        xy = np.column_stack([rng.uniform(1.0, w - 2.0, n), rng.uniform(1.0, h - 2.0, n)])
        vis = np.ones(n)
        vis[-1] = 0.0
        targets.append(encode_targets(np.column_stack([xy, vis]), h, w, sigma, kernel_spec=ghrl_cfg.kernel_spec,
                                      blur_kernel=ghrl_cfg.blur_kernel, blur_sigma=ghrl_cfg.blur_sigma))
    target = stack_targets(targets)
    return target, target.visible.astype(np.float64)


def _readout(rng: np.random.Generator, shape: tuple) -> Callable[[Tensor], Tensor]:
    """Fixed random linear functional, turning a tensor output into a scalar."""
    weights = nx.Tensor(rng.standard_normal(shape))
    return lambda out: (out * weights).sum()


def gradcheck(cfg: TrainConfig, probes: int = DEFAULT_PROBES, tolerance: float = GRADCHECK_TOLERANCE,
              out_dir: Optional[PathLike] = None) -> GradcheckReport:
    """
    Check GHRL, adaptive MSE, the constrained loss, one attention layer, the
    NanoBlock and the full model in 64-bit precision.

    Returns:
        GradcheckReport: one row per (block, tensor); `passed` is False when
        any relative error exceeds `tolerance`
    """
    report = GradcheckReport(tolerance=tolerance)
    mcfg = cfg.model
    with nx.precision("float64"):
        rng = np.random.default_rng(cfg.seed)
        ghrl_cfg = ghrl_config(cfg) or GhrlConfig(kernel_spec=laplacian_spec(cfg.loss.laplacian_size))
        target, vis = _random_targets(rng, mcfg, ghrl_cfg, cfg.loss.sigma, GRADCHECK_BATCH)
        noisy = target.base + 0.1 * rng.standard_normal(target.base.shape)

        # GHRL on intermediate features
        f_k = nx.parameter(noisy.copy())
        modulation = ghrl_modulation(f_k.data, target, ghrl_cfg.beta)
        report.rows += check_block(
            "ghrl", lambda: ghrl(f_k, target, ghrl_cfg, vis, modulation=modulation), {"f_k": f_k}, rng, probes)

        # adaptive MSE
        pred = nx.parameter(noisy.copy())
        weights = adaptive_weight_map(pred, target.base, cfg.loss.gamma)
        report.rows += check_block(
            "adaptive_mse", lambda: adaptive_mse(pred, target.base, cfg.loss.gamma, vis, weights=weights),
            {"pred": pred}, rng, probes)

        # constrained loss with learnable keypoint weights
        pred_c = nx.parameter(noisy.copy())
        strategy = WeightStrategy.create(CONSTRAINED, mcfg.n_keypoints, lam=cfg.loss.lam)
        strategy.learnable_w.assign(rng.uniform(0.5, 1.5, mcfg.n_keypoints))
        report.rows += check_block(
            "constrained_loss", lambda: constrained_loss(pred_c, target.base, strategy, vis),
            {"pred": pred_c, **strategy.parameters()}, rng, probes)

        # one attention layer over keypoint tokens and prompts
        n_tokens = mcfg.n_keypoints + (mcfg.n_prompts if mcfg.prompts_active else 0)
        att_params: dict = {}
        init_rng = np.random.default_rng([cfg.seed, 1])
        for proj in ("q", "k", "v", "o"):
            layers.init_linear(att_params, f"kit.0.attn.{proj}", init_rng, mcfg.embed_dim, mcfg.embed_dim,
                               bias=False, std=0.5)
        layers.init_linear(att_params, "kit.0.ffn.fc1", init_rng, mcfg.embed_dim, mcfg.ffn_expansion * mcfg.embed_dim, std=0.5)
        layers.init_linear(att_params, "kit.0.ffn.fc2", init_rng, mcfg.ffn_expansion * mcfg.embed_dim, mcfg.embed_dim, std=0.5)
        if mcfg.norm != "none":
            for which in ("norm1", "norm2"):
                layers.init_norm(att_params, f"kit.0.{which}", mcfg.embed_dim)
                att_params[f"kit.0.{which}.gain"].assign(rng.uniform(0.5, 1.5, mcfg.embed_dim))
        tokens = nx.parameter(rng.standard_normal((GRADCHECK_BATCH, n_tokens, mcfg.embed_dim)))
        readout = _readout(rng, tokens.shape)
        report.rows += check_block(
            "attention_layer", lambda: readout(attention_layer(tokens, att_params, "kit.0", norm=mcfg.norm)[0]),
            {"tokens": tokens, **att_params}, rng, probes)

        # NanoBlock in training mode (batch statistics, running stats untouched)
        h, w = mcfg.heatmap_size
        nb_params: dict = {}
        init_nanoblock(nb_params, {}, np.random.default_rng([cfg.seed, 2]), mcfg.backbone_channels,
                       mcfg.n_prompts, mcfg.spatial, mcfg.embed_dim)
        f_i = nx.parameter(rng.standard_normal((GRADCHECK_BATCH, mcfg.backbone_channels, h, w)))
        readout_nb = _readout(rng, (GRADCHECK_BATCH, mcfg.n_prompts, mcfg.embed_dim))
        report.rows += check_block(
            "nanoblock", lambda: readout_nb(nanoblock_context(f_i, nb_params, buffers=None, training=True)),
            {"f_i": f_i, **nb_params}, rng, probes)

        # the whole model under the configured loss
        report.rows += _check_model(cfg, rng, target, vis, probes)

    for block, err in report.block_errors().items():
        mark = "✅" if err <= tolerance else "❌"
        logger.info(f"{mark} gradcheck {block:<16} max rel error {err:.3e}")
    if out_dir is not None:
        report.write(ensure_run_dir(out_dir))
    return report


def _check_model(cfg: TrainConfig, rng: np.random.Generator, target, vis: np.ndarray, probes: int) -> List[GradcheckRow]:
    model = KitPoseModel(cfg.model, seed=cfg.seed).train()
    strategy = weight_strategy(cfg)
    ghrl_cfg = ghrl_config(cfg)
    images = rng.uniform(0.0, 1.0, (GRADCHECK_BATCH, 3, *cfg.model.image_size))

    with nx.no_grad():
        base = model.forward(images, update_stats=False)
    biases = None
    if base.clusters is not None:
        biases = np.stack([c.biases for c in base.clusters])
    frozen = {}
    if strategy.kind not in (HAND_CRAFTED, CONSTRAINED):
        frozen["adaptive_weights"] = adaptive_weight_map(base.heatmaps, target.base, strategy.gamma).data
    if ghrl_cfg is not None:
        frozen["ghrl_modulation"] = ghrl_modulation(base.f_k.data, target, ghrl_cfg.beta)

    def loss() -> Tensor:
        out = model.forward(images, frozen_biases=biases, update_stats=False)
        total, _ = total_loss(out.heatmaps, out.f_k, target, vis, strategy, ghrl_cfg, cfg.loss.ghrl_mu, frozen=frozen)
        return total

    tensors = dict(model.params)
    tensors.update(strategy.parameters())
    return check_block("model", loss, tensors, rng, probes)


# ----- body-part clusters and attention -----

@dataclass
class ClusterDump:
    instance_id: str
    assignment: Optional[np.ndarray]
    medoids: Optional[List[int]]
    biases: Optional[np.ndarray]
    prompts: Optional[np.ndarray]
    attn_maps: List[np.ndarray]
    n_keypoints: int

    def quadrant_means(self, layer: int) -> Dict[str, float]:
        """Mean attention per block; rows are queries, tokens < N are keypoints."""
        a, n = self.attn_maps[layer], self.n_keypoints
        return {
            "BP-to-BP": float(a[n:, n:].mean()) if a.shape[0] > n else float("nan"),
            "BP-to-KPT": float(a[n:, :n].mean()) if a.shape[0] > n else float("nan"),
            "KPT-to-BP": float(a[:n, n:].mean()) if a.shape[0] > n else float("nan"),
            "KPT-to-KPT": float(a[:n, :n].mean()),
        }


def cluster_inspect(checkpoint, instance: Instance, layout, out_dir: Optional[PathLike] = None) -> ClusterDump:
    """
    Run one instance through a checkpoint and dump its token clusters,
    body-part biases and prompts, and every layer's attention grid.

    Files (in `out_dir`): clusters.csv, biases.csv, prompts.csv,
    attention_layer{i}.csv / .png, quadrants.csv, clusters.png.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    cfg = from_dict(ckpt.manifest["config"])
    with nx.precision(ckpt.manifest.get("precision", cfg.precision)):
        model = restore_model(ckpt)
        if model.cfg.n_layers == 0:
            raise ConfigError("checkpoint has no attention layers to inspect")
        crop, _ = crop_resize(instance, model.cfg.image_size, padding=cfg.augment.padding)
        with nx.no_grad():
            out = model(crop.image.astype(nx.get_dtype()))
            assignment = medoids = biases = prompts = None
            if out.clusters:
                result = out.clusters[0]
                assignment, medoids, biases = result.assignment, list(result.medoid_indices), result.biases
                context = nanoblock_context(out.f_i, model.params, model.buffers, training=False)
                prompts = context.data + biases

    dump = ClusterDump(instance.instance_id, assignment, medoids, biases, prompts,
                       [np.asarray(a) for a in out.attn_maps], model.cfg.n_keypoints)
    if out_dir is not None:
        _write_cluster_dump(dump, layout, ensure_run_dir(out_dir))
    return dump


def _write_cluster_dump(dump: ClusterDump, layout, out: Path) -> None:
    n = dump.n_keypoints
    if dump.assignment is not None:
        write_csv(out / "clusters.csv", ["kpt_id", "name", "cluster", "is_medoid"], (
            [i, layout.names[i], int(c), int(i in dump.medoids)] for i, c in enumerate(dump.assignment)
        ))
        dims = [f"c{j}" for j in range(dump.biases.shape[-1])]
        write_csv(out / "biases.csv", ["cluster", *dims], ([j, *row] for j, row in enumerate(dump.biases)))
        write_csv(out / "prompts.csv", ["prompt", *dims], ([j, *row] for j, row in enumerate(dump.prompts)))
        plot_assignment(out / "clusters.png", layout.names, dump.assignment)
    else:
        logger.warning("⚠️ Prompts are disabled in this checkpoint; dumping attention only")

    quadrant_rows = []
    for i, attn in enumerate(dump.attn_maps):
        k = attn.shape[-1]
        write_csv(out / f"attention_layer{i}.csv", [f"k{j}" for j in range(k)], attn.tolist())
        plot_attention(out / f"attention_layer{i}.png", attn, n, title=f"layer {i}")
        for quadrant, value in dump.quadrant_means(i).items():
            quadrant_rows.append([i, quadrant, value])
    write_csv(out / "quadrants.csv", ["layer", "quadrant", "mean_attention"], quadrant_rows)
    logger.info(f"💾 Cluster dump for {dump.instance_id} written to {out}")


# ----- sweeps and ablations -----

def _median(values: Sequence[float]) -> float:
    return float(statistics.median(values)) if values else float("nan")


def sweep_prompts(cfg: TrainConfig, out_dir: PathLike, counts: Sequence[int] = SWEEP_PROMPTS) -> List[dict]:
    """
    Train one model per prompt count and record its validation PCK / AP.

    Writes np_sweep.csv and np_sweep.png into `out_dir`.
    """
    out = ensure_run_dir(out_dir)
    rows = []
    for count in counts:
        if count > cfg.model.n_keypoints:
            raise ConfigError(f"cannot form {count} body parts from {cfg.model.n_keypoints} keypoints")
        model_cfg = replace(cfg.model, use_prompts=True, prompt=replace(cfg.model.prompt, n_prompts=count))
        run_cfg = replace(cfg, model=model_cfg, run_dir=str(out / f"np{count}"))
        result = train(run_cfg)
        last = result.history[-1]
        rows.append({"n_prompts": count, "val_pck": last["val_pck"], "val_ap": last["val_ap"]})
        logger.info(f"N_p={count}: val PCK {last['val_pck']:.4f}, AP {last['val_ap']:.4f}")
    write_csv(out / "np_sweep.csv", ["n_prompts", "val_pck", "val_ap"],
              ([r["n_prompts"], r["val_pck"], r["val_ap"]] for r in rows))
    plot_curves(out / "np_sweep.png", [r["n_prompts"] for r in rows],
                {"val PCK@0.05": [r["val_pck"] for r in rows], "val AP": [r["val_ap"] for r in rows]},
                xlabel="number of body-part prompts")
    return rows


def component_rows(cfg: TrainConfig) -> Dict[str, TrainConfig]:
    """baseline -> +KIT -> +adaptive weighting -> +body-part prompts."""
    layers_kept = max(cfg.model.n_layers, 1)

    def variant(n_layers: int, weighting: str, prompts: bool) -> TrainConfig:
        return replace(cfg, model=replace(cfg.model, n_layers=n_layers, use_prompts=prompts),
                       loss=replace(cfg.loss, weighting=weighting))

    return {
        "baseline": variant(0, HAND_CRAFTED, False),
        "kit": variant(layers_kept, HAND_CRAFTED, False),
        "kit_adaptive": variant(layers_kept, "adaptive", False),
        "full": variant(layers_kept, "adaptive", True),
    }


def weighting_rows(cfg: TrainConfig) -> Dict[str, TrainConfig]:
    """The full model under each keypoint weighting strategy."""
    return {kind: replace(cfg, loss=replace(cfg.loss, weighting=kind)) for kind in WEIGHTING_KINDS}


ABLATIONS = {"components": component_rows, "weighting": weighting_rows}


def ablate(cfg: TrainConfig, out_dir: PathLike, seeds: Sequence[int] = (0, 1, 2), table: str = "components") -> dict:
    """
    Train every ablation row for every seed.

    Writes ablation_<table>.csv (one line per row and seed), a median summary
    CSV and a bar chart of the medians.

    Returns:
        dict: row name -> median val PCK@0.05
    """
    if table not in ABLATIONS:
        raise ConfigError(f"Unknown ablation table '{table}', expected one of {sorted(ABLATIONS)}")
    out = ensure_run_dir(out_dir)
    variants = ABLATIONS[table](cfg)
    raw, per_row = [], {name: [] for name in variants}
    for seed in seeds:
        for name, row_cfg in variants.items():
            result = train(replace(row_cfg, seed=int(seed), run_dir=str(out / f"{name}_seed{seed}")))
            last = result.history[-1]
            raw.append([name, seed, last["val_pck"], last["val_ap"]])
            per_row[name].append(last["val_pck"])

    medians = {name: _median(values) for name, values in per_row.items()}
    write_csv(out / f"ablation_{table}.csv", ["row", "seed", "val_pck", "val_ap"], raw)
    write_csv(out / f"ablation_{table}_median.csv", ["row", "median_val_pck"], medians.items())
    plot_bars(out / f"ablation_{table}.png", list(medians), list(medians.values()), ylabel="median val PCK@0.05")
    for name, value in medians.items():
        logger.info(f"{table} {name:<14} median PCK {value:.4f}")
    return medians
