"""
KIT Model - backbone, keypoint tokens, keypoint-interactive encoder, heatmap head.

Pipeline for one instance (a leading batch axis is allowed everywhere):

    image [3, H, W]
      -> mini_backbone          f_i [N_c, h', w']     (stride 4)
      -> keypoint_feature_head  f_k [N, h', w']       (1x1 conv, GHRL-supervised)
      -> tokenize_channels      [N, C]  (+ pos_embed)
      -> [tokens | prompts]     [N + N_p, C]
      -> E x attention_layer    single-head self-attention + FFN
      -> first N tokens -> linear C -> h'*w' -> heatmaps [N, h', w']
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from kitpose import layers
from kitpose import numerics as nx
from kitpose.errors import ConfigError, ShapeError
from kitpose.numerics import Tensor
from kitpose.prompts import PromptConfig, init_nanoblock, make_body_part_prompts

logger = logging.getLogger(__name__)

NORM_PLACEMENTS = ("pre", "post", "none")
BACKBONE_STRIDE = 4


@dataclass
class ModelConfig:
    """
    Network hyperparameters.

    `n_layers = 0` removes the encoder (backbone + heads only) and
    `use_prompts = False` drops the body-part prompts.
    """

    n_keypoints: int = 17
    embed_dim: int = 128
    n_layers: int = 2
    heatmap_size: tuple = (32, 32)
    backbone_channels: int = 32
    backbone_width: int = 16
    ffn_expansion: int = 3
    norm: str = "pre"
    use_prompts: bool = True
    prompt: PromptConfig = field(default_factory=PromptConfig)

    def __post_init__(self):
        self.heatmap_size = tuple(int(v) for v in self.heatmap_size)
        if self.n_keypoints < 1 or self.embed_dim < 1 or self.backbone_channels < 1:
            raise ConfigError("n_keypoints, embed_dim and backbone_channels must be positive")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.norm not in NORM_PLACEMENTS:
            raise ConfigError(f"norm must be one of {NORM_PLACEMENTS}, got '{self.norm}'")
        if len(self.heatmap_size) != 2 or min(self.heatmap_size) < 1:
            raise ConfigError(f"heatmap_size must be (h, w), got {self.heatmap_size}")
        if self.prompts_active and self.prompt.n_prompts > self.n_keypoints:
            raise ConfigError(
                f"n_prompts ({self.prompt.n_prompts}) cannot exceed n_keypoints ({self.n_keypoints})"
            )

    @property
    def n_prompts(self) -> int:
        return self.prompt.n_prompts

    @property
    def prompts_active(self) -> bool:
        return self.use_prompts and self.n_layers > 0

    @property
    def image_size(self) -> tuple:
        h, w = self.heatmap_size
        return h * BACKBONE_STRIDE, w * BACKBONE_STRIDE

    @property
    def spatial(self) -> int:
        h, w = self.heatmap_size
        return h * w

    @property
    def tag(self) -> str:
        """Short name in the E#C# style, e.g. "E2C128"."""
        return f"E{self.n_layers}C{self.embed_dim}"


class KitOutput(NamedTuple):
    heatmaps: Tensor
    f_k: Tensor
    attn_maps: list
    clusters: Optional[list]
    f_i: Optional[Tensor] = None


def init_params(cfg: ModelConfig, seed: int = 0) -> tuple:
    """
    Fresh parameters and batch-norm buffers for `cfg`.

    Returns:
        tuple: (params dict name -> Tensor, buffers dict name -> ndarray)
    """
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    c, width, n_c = cfg.embed_dim, cfg.backbone_width, cfg.backbone_channels

    layers.init_conv(params, "backbone.conv1", rng, 3, width, 3)
    layers.init_conv(params, "backbone.conv2", rng, width, width, 3)
    layers.init_conv(params, "backbone.conv3", rng, width, n_c, 3)
    layers.init_conv(params, "head.keypoint", rng, n_c, cfg.n_keypoints, 1)

    params["tokenize.proj"] = nx.parameter(layers.truncated_normal(rng, (cfg.spatial, c)))
    params["tokenize.pos_embed"] = nx.parameter(layers.truncated_normal(rng, (cfg.n_keypoints, c)))

    if cfg.prompts_active:
        init_nanoblock(params, buffers, rng, n_c, cfg.n_prompts, cfg.spatial, c)

    hidden = cfg.ffn_expansion * c
    for i in range(cfg.n_layers):
        name = f"kit.{i}"
        for proj in ("q", "k", "v", "o"):
            layers.init_linear(params, f"{name}.attn.{proj}", rng, c, c, bias=False)
        layers.init_linear(params, f"{name}.ffn.fc1", rng, c, hidden)
        layers.init_linear(params, f"{name}.ffn.fc2", rng, hidden, c)
        if cfg.norm != "none":
            layers.init_norm(params, f"{name}.norm1", c)
            layers.init_norm(params, f"{name}.norm2", c)

    layers.init_linear(params, "head.out", rng, c, cfg.spatial)
    return params, buffers


def mini_backbone(image: Tensor, params: dict) -> Tensor:
    """
    Small conv stack with stride 4: conv-relu-pool, conv-relu-pool, conv-relu.

    Stands in for a large backbone; anything returning [N_c, H/4, W/4]
    features can replace it.
    """
    h, w = image.shape[-2:]
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise ShapeError(f"backbone expects [3, H, W] images, got {image.shape}")
    if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
        raise ShapeError(f"image size {h}x{w} is not divisible by {BACKBONE_STRIDE}")
    out = nx.relu(layers.conv(image, params, "backbone.conv1"))
    out = nx.avg_pool2d(out, 2)
    out = nx.relu(layers.conv(out, params, "backbone.conv2"))
    out = nx.avg_pool2d(out, 2)
    return nx.relu(layers.conv(out, params, "backbone.conv3"))


def keypoint_feature_head(f_i: Tensor, params: dict) -> Tensor:
    """1x1 conv N_c -> N: the intermediate keypoint features F_k."""
    return layers.conv(f_i, params, "head.keypoint")


def tokenize_channels(f_k: Tensor, proj: Tensor) -> Tensor:
    """Flatten each channel row-major and project it to one C-dim token."""
    h, w = f_k.shape[-2:]
    if proj.ndim != 2 or proj.shape[0] != h * w:
        raise ShapeError(f"token projection {proj.shape} does not take {h}x{w} slices")
    flat = f_k.reshape(*f_k.shape[:-2], h * w)
    return nx.matmul(flat, proj)


def _self_attention(x: Tensor, params: dict, name: str) -> tuple:
    c = x.shape[-1]
    q = layers.linear(x, params, f"{name}.q")
    k = layers.linear(x, params, f"{name}.k")
    v = layers.linear(x, params, f"{name}.v")
    scores = nx.matmul(q, nx.swap_last(k)) * (1.0 / math.sqrt(c))
    attn = nx.softmax_rows(scores)
    y = nx.matmul(attn, v)
    return layers.linear(y, params, f"{name}.o"), attn


def _ffn(x: Tensor, params: dict, name: str) -> Tensor:
    return layers.linear(nx.gelu(layers.linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def attention_layer(tokens: Tensor, params: dict, name: str = "kit.0", norm: str = "pre") -> tuple:
    """
    One KIT block: single-head self-attention then a C -> 3C -> C FFN, each
    wrapped in a residual connection.

    Args:
        tokens: [K, C] or [B, K, C]
        params: holds {name}.attn.{q,k,v,o}, {name}.ffn.fc1/fc2 and, unless
            norm == "none", {name}.norm1/norm2
        norm: "pre" normalises sublayer inputs, "post" the residual sums

    Returns:
        tuple: (output tokens, attention map [.., K, K])
    """
    if norm not in NORM_PLACEMENTS:
        raise ConfigError(f"norm must be one of {NORM_PLACEMENTS}, got '{norm}'")

    def normed(x, which):
        return layers.layer_norm(x, params, f"{name}.{which}")

    if norm == "pre":
        delta, attn = _self_attention(normed(tokens, "norm1"), params, f"{name}.attn")
        out = tokens + delta
        out = out + _ffn(normed(out, "norm2"), params, f"{name}.ffn")
    elif norm == "post":
        delta, attn = _self_attention(tokens, params, f"{name}.attn")
        out = normed(tokens + delta, "norm1")
        out = normed(out + _ffn(out, params, f"{name}.ffn"), "norm2")
    else:
        delta, attn = _self_attention(tokens, params, f"{name}.attn")
        out = tokens + delta
        out = out + _ffn(out, params, f"{name}.ffn")
    return out, attn


def kit_forward(
    f_i: Tensor,
    cfg: ModelConfig,
    params: dict,
    buffers: Optional[dict] = None,
    training: bool = False,
    frozen_biases: Optional[np.ndarray] = None,
    workers: int = 0,
) -> KitOutput:
    """
    Everything after the backbone.

    Args:
        f_i: backbone features [N_c, h', w'] or [B, N_c, h', w']
        frozen_biases: body-part biases to use instead of clustering

    Returns:
        KitOutput: heatmaps and f_k shaped [.., N, h', w'], one attention map
        per layer, the cluster results (None when prompts are off or frozen)
    """
    h, w = cfg.heatmap_size
    if f_i.shape[-2:] != (h, w):
        raise ShapeError(f"features {f_i.shape} do not match heatmap size {cfg.heatmap_size}")

    f_k = keypoint_feature_head(f_i, params)
    n = cfg.n_keypoints
    if f_k.shape[-3] != n:
        raise ShapeError(f"keypoint head emits {f_k.shape[-3]} channels, expected {n}")
    tokens = tokenize_channels(f_k, params["tokenize.proj"]) + params["tokenize.pos_embed"]

    clusters, attn_maps = None, []
    seq = tokens
    if cfg.prompts_active:
        prompts, clusters = make_body_part_prompts(
            tokens, f_i, cfg.prompt, params, buffers=buffers, training=training,
            frozen_biases=frozen_biases, workers=workers,
        )
        seq = nx.concat([tokens, prompts], axis=-2)

    for i in range(cfg.n_layers):
        seq, attn = attention_layer(seq, params, f"kit.{i}", norm=cfg.norm)
        attn_maps.append(attn.data)

    if seq.shape[-2] == n:
        keypoint_tokens = seq
    else:
        keypoint_tokens = seq[:, :n] if seq.ndim == 3 else seq[:n]
    flat = layers.linear(keypoint_tokens, params, "head.out")
    heatmaps = flat.reshape(*flat.shape[:-1], h, w)
    return KitOutput(heatmaps=heatmaps, f_k=f_k, attn_maps=attn_maps, clusters=clusters)


class KitPoseModel:
    """
    Named parameters, batch-norm buffers and the train/eval switch.

    Example:
        model = KitPoseModel(ModelConfig(n_keypoints=17), seed=0)
        out = model.forward(images)
        loss, terms = total_loss(out.heatmaps, out.f_k, target, vis, strategy)
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params, self.buffers = init_params(cfg, seed)
        self.training = True
        self.workers = 0
        logger.info(
            f"🔄 Model {cfg.tag}: {len(self.params)} tensors, "
            f"{self.num_parameters()} weights, prompts {'on' if cfg.prompts_active else 'off'}"
        )

    def train(self) -> "KitPoseModel":
        self.training = True
        return self

    def eval(self) -> "KitPoseModel":
        self.training = False
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        nx.zero_grad(self.parameters())

    def forward(self, images, frozen_biases: Optional[np.ndarray] = None, update_stats: bool = True) -> KitOutput:
        """
        Run the network on [3, H, W] or [B, 3, H, W] images.

        update_stats=False keeps the batch-norm running statistics untouched
        in training mode.
        """
        images = nx.as_tensor(images)
        if tuple(images.shape[-2:]) != self.cfg.image_size:
            raise ShapeError(f"images {images.shape} do not match model input {self.cfg.image_size}")
        f_i = mini_backbone(images, self.params)
        buffers = self.buffers if (update_stats or not self.training) else None
        out = kit_forward(
            f_i, self.cfg, self.params, buffers=buffers, training=self.training,
            frozen_biases=frozen_biases, workers=self.workers,
        )
        return out._replace(f_i=f_i)

    __call__ = forward

    def state_arrays(self) -> dict:
        """Every parameter and buffer as a plain array, keyed by name."""
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        arrays.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return arrays

    def load_state_arrays(self, arrays: dict) -> None:
        expected = set(self.state_arrays())
        missing, extra = expected - set(arrays), set(arrays) - expected
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for key, value in arrays.items():
            kind, name = key.split("/", 1)
            if kind == "param":
                self.params[name].assign(value)
            else:
                if value.shape != self.buffers[name].shape:
                    raise ShapeError(f"buffer {name}: shape {value.shape} != {self.buffers[name].shape}")
                self.buffers[name] = np.array(value, dtype=np.float64)
