"""
Body part prompts.

Keypoint tokens of one instance are grouped with a deterministic k-medoids
(KKZ seeding, then alternating assignment and medoid update). The per-cluster
token means are the body-part biases; a small conv stack (NanoBlock) turns the
backbone features into context tokens; prompts are biases + context.

Clustering runs on detached numpy copies of the tokens: no gradient reaches
the tokens through the biases.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from kitpose import layers
from kitpose import numerics as nx
from kitpose.errors import ConfigError, NumericalError, ShapeError
from kitpose.numerics import Tensor

logger = logging.getLogger(__name__)

METRICS = ("euclidean", "cosine")
_COSINE_EPS = 1e-12


@dataclass
class PromptConfig:
    n_prompts: int = 4
    metric: str = "euclidean"
    threshold: float = 1e-6
    max_iters: int = 100

    def __post_init__(self):
        if self.n_prompts < 1:
            raise ConfigError(f"n_prompts must be >= 1, got {self.n_prompts}")
        if self.metric not in METRICS:
            raise ConfigError(f"Unknown distance metric '{self.metric}', expected one of {METRICS}")
        if not self.threshold > 0:
            raise ConfigError(f"cluster threshold must be > 0, got {self.threshold}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class ClusterResult:
    """
    Outcome of clustering one instance's tokens.

    Cluster j is the cluster of medoid_indices[j]; clusters are numbered in
    medoid discovery order.
    """

    medoid_indices: List[int]
    assignment: np.ndarray
    biases: np.ndarray
    iterations: int
    converged: bool
    objective_history: List[float] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_history[-1] if self.objective_history else float("nan")


def _as_tokens(tokens) -> np.ndarray:
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    arr = np.array(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"tokens must be [N, C], got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError("tokens contain non-finite values")
    return arr


def pairwise_distances(tokens: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """
    Dissimilarity matrix [N, N].

    euclidean: squared l2 distance; cosine: 1 - cosine similarity.
    """
    if metric == "euclidean":
        diff = tokens[:, None, :] - tokens[None, :, :]
        return np.einsum("ijc,ijc->ij", diff, diff)
    if metric == "cosine":
        norms = np.maximum(np.linalg.norm(tokens, axis=1), _COSINE_EPS)
        unit = tokens / norms[:, None]
        d = 1.0 - unit @ unit.T
        np.fill_diagonal(d, 0.0)
        return np.maximum(d, 0.0)
    raise ConfigError(f"Unknown distance metric '{metric}'")


def kkz_init(tokens, n_prompts: int, metric: str = "euclidean") -> List[int]:
    """
    KKZ seeding: the token with the largest l2 norm first, then repeatedly the
    token farthest (by its nearest chosen medoid) from the medoids so far.

    Ties go to the lowest index.

    Example:
        >>> kkz_init(np.array([[0, 0], [0, 1], [10, 0], [10, 1]]), 2)
        [3, 0]
    """
    arr = _as_tokens(tokens)
    n = arr.shape[0]
    if n_prompts > n:
        raise ConfigError(f"cannot pick {n_prompts} medoids from {n} tokens")

    dist = pairwise_distances(arr, metric)
    chosen = [int(np.argmax(np.linalg.norm(arr, axis=1)))]
    nearest = dist[chosen[0]].copy()
    while len(chosen) < n_prompts:
        candidate = nearest.copy()
        candidate[chosen] = -np.inf
        idx = int(np.argmax(candidate))
        chosen.append(idx)
        nearest = np.minimum(nearest, dist[idx])
    return chosen


def _assign(dist: np.ndarray, medoids: Sequence[int]) -> np.ndarray:
    # argmin returns the first minimum, i.e. the lowest cluster id on ties
    return np.argmin(dist[:, medoids], axis=1)


def _objective(dist: np.ndarray, medoids: Sequence[int], assignment: np.ndarray) -> float:
    return float(np.sum(dist[np.arange(len(assignment)), np.asarray(medoids)[assignment]]))


def _repair_empty(dist: np.ndarray, medoids: List[int], assignment: np.ndarray) -> np.ndarray:
    """
    Reseed empty clusters with the token farthest from its own medoid, then
    reassign every token to its nearest medoid, until no cluster is empty.

    A cluster can only empty out when its medoid sits at distance 0 from an
    earlier medoid, so reseeding never raises the objective.
    """
    for _ in range(len(assignment)):
        empty = [j for j in range(len(medoids)) if not np.any(assignment == j)]
        if not empty:
            return assignment
        own = dist[np.arange(len(assignment)), np.asarray(medoids)[assignment]].copy()
        own[medoids] = -np.inf
        far = int(np.argmax(own))
        if not own[far] > 0:
            break
        logger.debug(f"Empty cluster {empty[0]}: reseeded with token {far}")
        medoids[empty[0]] = far
        assignment = _assign(dist, medoids)

    # every token coincides with a medoid: give each empty cluster its own medoid
    for j in range(len(medoids)):
        if not np.any(assignment == j):
            assignment[medoids[j]] = j
    return assignment


def kmedoids_cluster(tokens, cfg: PromptConfig) -> ClusterResult:
    """
    Cluster keypoint tokens into cfg.n_prompts groups.

    Args:
        tokens: [N, C] Tensor or array, detached before clustering
        cfg: prompt settings (metric, shift threshold, iteration cap)

    Returns:
        ClusterResult: medoids, assignment, per-cluster token means and the
        within-cluster objective after every iteration
    """
    arr = _as_tokens(tokens)
    dist = pairwise_distances(arr, cfg.metric)
    medoids = kkz_init(arr, cfg.n_prompts, cfg.metric)

    assignment = _repair_empty(dist, medoids, _assign(dist, medoids))
    history = [_objective(dist, medoids, assignment)]
    converged = False
    iterations = 0

    for iterations in range(1, cfg.max_iters + 1):
        new_medoids = []
        for j in range(len(medoids)):
            members = np.flatnonzero(assignment == j)
            within = dist[np.ix_(members, members)].sum(axis=1)
            new_medoids.append(int(members[np.argmin(within)]))

        shift = max(float(np.linalg.norm(arr[a] - arr[b])) for a, b in zip(medoids, new_medoids))
        unchanged = new_medoids == medoids
        medoids = new_medoids
        assignment = _repair_empty(dist, medoids, _assign(dist, medoids))
        history.append(_objective(dist, medoids, assignment))

        if history[-1] > history[-2] + 1e-12 * max(1.0, abs(history[-2])):
            raise NumericalError(
                f"k-medoids objective increased: {history[-2]!r} -> {history[-1]!r}"
            )
        if unchanged or shift < cfg.threshold:
            converged = True
            break

    n_clusters = len(medoids)
    biases = np.stack([arr[assignment == j].mean(axis=0) for j in range(n_clusters)])
    return ClusterResult(
        medoid_indices=list(medoids),
        assignment=assignment,
        biases=biases,
        iterations=iterations,
        converged=converged,
        objective_history=history,
    )


def cluster_batch(tokens, cfg: PromptConfig, workers: int = 0) -> List[ClusterResult]:
    """Cluster every instance of a [B, N, C] batch independently."""
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    if arr.ndim != 3:
        raise ShapeError(f"batched tokens must be [B, N, C], got {arr.shape}")
    if workers and workers > 1 and arr.shape[0] > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda t: kmedoids_cluster(t, cfg), arr))
    return [kmedoids_cluster(t, cfg) for t in arr]


# ----- NanoBlock -----

def init_nanoblock(params: dict, buffers: dict, rng: np.random.Generator,
                   n_channels: int, n_prompts: int, spatial: int, embed_dim: int) -> None:
    """Two Conv-BN-ReLU layers (N_c -> N_c -> N_p) and a flatten + linear to C."""
    layers.init_conv(params, "nanoblock.block1.conv", rng, n_channels, n_channels, 3)
    layers.init_batch_norm(params, buffers, "nanoblock.block1.bn", n_channels)
    layers.init_conv(params, "nanoblock.block2.conv", rng, n_channels, n_prompts, 3)
    layers.init_batch_norm(params, buffers, "nanoblock.block2.bn", n_prompts)
    layers.init_linear(params, "nanoblock.proj", rng, spatial, embed_dim)


def nanoblock_context(f_i: Tensor, params: dict, buffers: Optional[dict] = None, training: bool = False) -> Tensor:
    """
    Context tokens T_c from backbone features.

    Args:
        f_i: [N_c, h', w'] or [B, N_c, h', w']
        params: holds nanoblock.block1/2 (conv + bn) and nanoblock.proj

    Returns:
        Tensor: [N_p, C] or [B, N_p, C]
    """
    expected = params["nanoblock.block1.conv.weight"].shape[1]
    if f_i.ndim not in (3, 4) or f_i.shape[-3] != expected:
        raise ShapeError(f"NanoBlock expects {expected} input channels, got features {f_i.shape}")
    out = layers.conv_bn_relu(f_i, params, "nanoblock.block1", buffers, training)
    out = layers.conv_bn_relu(out, params, "nanoblock.block2", buffers, training)
    h, w = out.shape[-2:]
    flat = out.reshape(*out.shape[:-2], h * w)
    return layers.linear(flat, params, "nanoblock.proj")


def make_body_part_prompts(
    tokens: Tensor,
    f_i: Tensor,
    cfg: PromptConfig,
    params: dict,
    buffers: Optional[dict] = None,
    training: bool = False,
    frozen_biases: Optional[np.ndarray] = None,
    workers: int = 0,
) -> tuple:
    """
    P_bp = Delta_bp + T_c.

    Args:
        tokens: keypoint tokens [N, C] or [B, N, C]
        f_i: backbone features matching the token batch layout
        frozen_biases: use these biases instead of clustering (held constant)

    Returns:
        tuple: (prompts Tensor [.., N_p, C], list of ClusterResult or None)
    """
    context = nanoblock_context(f_i, params, buffers=buffers, training=training)
    if frozen_biases is not None:
        biases, clusters = np.asarray(frozen_biases), None
    elif tokens.ndim == 2:
        clusters = [kmedoids_cluster(tokens.data, cfg)]
        biases = clusters[0].biases
    else:
        clusters = cluster_batch(tokens.data, cfg, workers=workers)
        biases = np.stack([c.biases for c in clusters])

    if biases.shape != context.shape:
        raise ShapeError(f"body-part biases {biases.shape} do not match context tokens {context.shape}")
    return nx.stop_gradient(biases) + context, clusters
