"""ViT, TNT and Nested-TNT assembled from the layers in :mod:`nested_tnt.layers`.

A model is a :class:`ModelConfig` plus a flat, ordered ``name -> Tensor``
parameter dict. Forward functions look parameters up by name, so replacing a
tensor in the dict (as the optimizer does) is all an update needs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from .layers import (
    AttentionState,
    FusionMlpParams,
    LinearParams,
    MhaParams,
    MlpBlockParams,
    linear_forward,
    mha_forward,
    mlp_block_forward,
    nested_mha_forward,
)
from .tensor import (
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    getitem,
    layer_norm,
    reshape,
    transpose,
    vectorize,
)

VARIANTS = ("vit", "tnt", "nested_tnt")
LN_EPS = 1e-6
INIT_STD = 0.02


class ConfigError(ValueError):
    """Invalid or inconsistent model/training configuration."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "nested_tnt"
    image_size: int = 224
    patch_size: int = 16
    word_size: int = 4
    outer_dim: int = 384
    inner_dim: int = 24
    outer_heads: int = 6
    inner_heads: int = 4
    depth: int = 12
    mlp_ratio: int = 4
    num_classes: int = 100
    fusion_hidden: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("image_size", "patch_size", "outer_dim", "outer_heads", "depth",
                     "mlp_ratio", "num_classes"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.outer_dim % self.outer_heads:
            raise ConfigError(f"outer_dim {self.outer_dim} not divisible by outer_heads {self.outer_heads}")
        if self.variant != "vit":
            for name in ("word_size", "inner_dim", "inner_heads"):
                if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                    raise ConfigError(f"{name} must be a positive integer")
            if self.patch_size % self.word_size:
                raise ConfigError(f"patch_size {self.patch_size} not divisible by word_size {self.word_size}")
            if self.inner_dim % self.inner_heads:
                raise ConfigError(f"inner_dim {self.inner_dim} not divisible by inner_heads {self.inner_heads}")
        if self.fusion_hidden is not None and self.fusion_hidden < 1:
            raise ConfigError("fusion_hidden must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_words(self) -> int:
        return (self.patch_size // self.word_size) ** 2

    @property
    def fusion_width(self) -> int:
        return self.fusion_hidden or 2 * self.outer_heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad value type in model config: {e}") from None

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"model config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("model config must be a JSON object")
        return cls.from_dict(d)


@dataclass
class LayerState:
    """Per-layer triple: word embeddings, sentence embeddings, raw outer logits."""

    gamma: Tensor | None  # [B, n, m, D_w]; None for ViT
    beta: Tensor  # [B, n+1, D]
    z_outer: Tensor | None  # [B, h, n+1, n+1]


@dataclass
class ForwardTrace:
    layer_states: list[LayerState] = field(default_factory=list)
    inner_attention: list[AttentionState] = field(default_factory=list)
    outer_attention: list[AttentionState] = field(default_factory=list)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def with_grad(self, flag: bool = True) -> "Model":
        return Model(
            self.config,
            {k: Tensor(v.data, requires_grad=flag, dtype=v.dtype) for k, v in self.params.items()},
        )

    # parameter views

    def linear(self, prefix: str) -> LinearParams:
        return LinearParams(self.params[f"{prefix}.weight"], self.params.get(f"{prefix}.bias"))

    def mlp(self, prefix: str) -> MlpBlockParams:
        return MlpBlockParams(self.linear(f"{prefix}.fc1"), self.linear(f"{prefix}.fc2"))

    def mha(self, prefix: str, heads: int) -> MhaParams:
        p = self.params
        return MhaParams(p[f"{prefix}.w_q"], p[f"{prefix}.w_k"], p[f"{prefix}.w_v"],
                         p[f"{prefix}.w_o"], heads)

    def fusion(self, prefix: str) -> FusionMlpParams | None:
        if f"{prefix}.w1.weight" not in self.params:
            return None
        return FusionMlpParams(self.linear(f"{prefix}.w1"), self.linear(f"{prefix}.w2"))

    def norm(self, prefix: str) -> tuple[Tensor, Tensor]:
        return self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"]


# ---------------------------------------------------------------------------
# parameter layout


def parameter_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init) for every parameter of ``config``.

    init is one of ``trunc``, ``zeros``, ``ones``, ``fusion_trunc``.
    """
    c = config
    D, n = c.outer_dim, c.num_patches
    spec: list[tuple[str, tuple[int, ...], str]] = []

    def linear(prefix, d_in, d_out, weight_init="trunc", bias_init="zeros"):
        spec.append((f"{prefix}.weight", (d_in, d_out), weight_init))
        spec.append((f"{prefix}.bias", (d_out,), bias_init))

    def norm(prefix, d):
        spec.append((f"{prefix}.gamma", (d,), "ones"))
        spec.append((f"{prefix}.beta", (d,), "zeros"))

    def attn(prefix, d):
        for w in ("w_q", "w_k", "w_v", "w_o"):
            spec.append((f"{prefix}.{w}", (d, d), "trunc"))

    def mlp(prefix, d):
        linear(f"{prefix}.fc1", d, d * c.mlp_ratio)
        linear(f"{prefix}.fc2", d * c.mlp_ratio, d)

    if c.variant == "vit":
        linear("embed.sentence_proj", 3 * c.patch_size**2, D)
    else:
        m, dw = c.num_words, c.inner_dim
        linear("embed.word_proj", 3 * c.word_size**2, dw)
        spec.append(("embed.word_pos", (m, dw), "trunc"))
        linear("embed.sentence_proj", m * dw, D)
    spec.append(("embed.sentence_pos", (n + 1, D), "trunc"))
    spec.append(("embed.class_token", (1, D), "trunc"))

    h = c.outer_heads
    for layer in range(c.depth):
        pre = f"blocks.{layer}"
        if c.variant != "vit":
            norm(f"{pre}.inner.norm1", c.inner_dim)
            attn(f"{pre}.inner.attn", c.inner_dim)
            norm(f"{pre}.inner.norm2", c.inner_dim)
            mlp(f"{pre}.inner.mlp", c.inner_dim)
            linear(f"{pre}.augment", c.num_words * c.inner_dim, D)
        norm(f"{pre}.outer.norm1", D)
        attn(f"{pre}.outer.attn", D)
        if c.variant == "nested_tnt" and layer > 0:
            r = c.fusion_width
            linear(f"{pre}.outer.fusion.w1", 2 * h, r, "fusion_trunc", "zeros")
            linear(f"{pre}.outer.fusion.w2", r, h, "zeros", "zeros")
        norm(f"{pre}.outer.norm2", D)
        mlp(f"{pre}.outer.mlp", D)
    norm("head_norm", D)
    linear("head", D, c.num_classes)
    return spec


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing out-of-range values."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Initialize every parameter deterministically from ``seed``.

    Fusion weights draw from their own stream so a TNT and a Nested-TNT built
    with the same seed share all common weights.
    """
    rng = np.random.default_rng(seed)
    fusion_rng = np.random.default_rng([seed, 1])
    params: dict[str, Tensor] = {}
    for name, shape, init in parameter_spec(config):
        if init == "trunc":
            arr = _trunc_normal(rng, shape, INIT_STD)
        elif init == "fusion_trunc":
            arr = _trunc_normal(fusion_rng, shape, INIT_STD)
        elif init == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, dtype=dtype)
    return Model(config, params)


def count_params(model: Model) -> int:
    return sum(t.size for t in model.params.values())


# ---------------------------------------------------------------------------
# tokenization


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """[B, 3, S, S] -> [B, n, 3*P*P]; row-major patches, channel-major vectors."""
    if image.ndim != 4:
        raise ShapeError(f"expected [B, C, S, S] images, got {image.shape}")
    b, ch, s, s2 = image.shape
    if s != s2 or s % patch_size:
        raise ShapeError(f"image {s}x{s2} not divisible into {patch_size}px patches")
    g = s // patch_size
    x = reshape(image, (b, ch, g, patch_size, g, patch_size))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (b, g * g, ch * patch_size * patch_size))


def wordify(sentences: Tensor, word_size: int, channels: int = 3) -> Tensor:
    """[B, n, 3*P*P] -> [B, n, m, 3*W*W]; row-major words within each patch."""
    b, n, flat = sentences.shape
    p = int(round((flat // channels) ** 0.5))
    if channels * p * p != flat:
        raise ShapeError(f"sentence vector length {flat} is not {channels}*P*P")
    if p % word_size:
        raise ShapeError(f"patch size {p} not divisible by word size {word_size}")
    k = p // word_size
    x = reshape(sentences, (b, n, channels, k, word_size, k, word_size))
    x = transpose(x, (0, 1, 3, 5, 2, 4, 6))
    return reshape(x, (b, n, k * k, channels * word_size * word_size))


def unpatchify(patches: np.ndarray, patch_size: int, channels: int = 3) -> np.ndarray:
    b, n, _ = patches.shape
    g = int(round(n**0.5))
    x = patches.reshape(b, g, g, channels, patch_size, patch_size)
    return x.transpose(0, 3, 1, 4, 2, 5).reshape(b, channels, g * patch_size, g * patch_size)


def unwordify(words: np.ndarray, word_size: int, channels: int = 3) -> np.ndarray:
    b, n, m, _ = words.shape
    k = int(round(m**0.5))
    x = words.reshape(b, n, k, k, channels, word_size, word_size)
    return x.transpose(0, 1, 4, 2, 5, 3, 6).reshape(b, n, channels * (k * word_size) ** 2)


# ---------------------------------------------------------------------------
# forward pieces


def _as_image(image, model: Model) -> Tensor:
    if not isinstance(image, Tensor):
        image = Tensor(image, dtype=model.dtype)
    c = model.config
    if image.ndim != 4 or image.shape[1:] != (3, c.image_size, c.image_size):
        raise ShapeError(
            f"expected images [B, 3, {c.image_size}, {c.image_size}], got {image.shape}"
        )
    return image


def embed(image, model: Model) -> LayerState:
    """Layer-0 state: word embeddings (shared word positions) and sentence embeddings."""
    c, p = model.config, model.params
    image = _as_image(image, model)
    b = image.shape[0]
    patches = patchify(image, c.patch_size)
    gamma = None
    if c.variant == "vit":
        rows = linear_forward(patches, model.linear("embed.sentence_proj"))
    else:
        words = wordify(patches, c.word_size)
        gamma = linear_forward(words, model.linear("embed.word_proj")) + p["embed.word_pos"]
        rows = linear_forward(vectorize(gamma, 2), model.linear("embed.sentence_proj"))
    cls = broadcast_to(reshape(p["embed.class_token"], (1, 1, c.outer_dim)), (b, 1, c.outer_dim))
    beta = concat([cls, rows], axis=1) + p["embed.sentence_pos"]
    return LayerState(gamma, beta, None)


def inner_block_forward(gamma: Tensor, model: Model, layer: int,
                        trace: ForwardTrace | None = None) -> Tensor:
    """Word-level transformer block applied to every sentence independently."""
    c = model.config
    b, n, m, dw = gamma.shape
    if (m, dw) != (c.num_words, c.inner_dim):
        raise ShapeError(f"word embeddings {gamma.shape} do not match config")
    pre = f"blocks.{layer}.inner"
    y = reshape(gamma, (b * n, m, dw))
    attn_out, state = mha_forward(layer_norm(y, *model.norm(f"{pre}.norm1"), LN_EPS),
                                  model.mha(f"{pre}.attn", c.inner_heads))
    y = y + attn_out
    y = y + mlp_block_forward(layer_norm(y, *model.norm(f"{pre}.norm2"), LN_EPS),
                              model.mlp(f"{pre}.mlp"))
    if trace is not None:
        trace.inner_attention.append(state)
    return reshape(y, (b, n, m, dw))


def sentence_augment(beta: Tensor, gamma: Tensor, fc: LinearParams) -> Tensor:
    """Add FC(vec(words of sentence i)) to sentence row i; the class row is untouched."""
    b, n1, d = beta.shape
    if gamma.shape[:2] != (b, n1 - 1):
        raise ShapeError(f"sentences {beta.shape} vs words {gamma.shape}")
    aug = linear_forward(vectorize(gamma, 2), fc)
    return concat([getitem(beta, (slice(None), slice(0, 1))),
                   getitem(beta, (slice(None), slice(1, None))) + aug], axis=1)


def outer_block_forward(beta: Tensor, z_prev: Tensor | None, model: Model, layer: int,
                        trace: ForwardTrace | None = None) -> tuple[Tensor, Tensor]:
    c = model.config
    pre = f"blocks.{layer}.outer"
    x = layer_norm(beta, *model.norm(f"{pre}.norm1"), LN_EPS)
    mha = model.mha(f"{pre}.attn", c.outer_heads)
    if c.variant == "nested_tnt":
        attn_out, state = nested_mha_forward(x, mha, model.fusion(f"{pre}.fusion"), z_prev)
    else:
        attn_out, state = mha_forward(x, mha)
    beta = beta + attn_out
    beta = beta + mlp_block_forward(layer_norm(beta, *model.norm(f"{pre}.norm2"), LN_EPS),
                                    model.mlp(f"{pre}.mlp"))
    if trace is not None:
        trace.outer_attention.append(state)
    return beta, state.logits


def layer_forward(state: LayerState, model: Model, layer: int,
                  trace: ForwardTrace | None = None) -> LayerState:
    """(gamma, beta, z) of layer l-1 -> the same triple for layer l."""
    gamma, beta = state.gamma, state.beta
    if model.config.variant != "vit":
        gamma = inner_block_forward(gamma, model, layer, trace)
        beta = sentence_augment(beta, gamma, model.linear(f"blocks.{layer}.augment"))
    beta, z = outer_block_forward(beta, state.z_outer, model, layer, trace)
    return LayerState(gamma, beta, z)


def model_forward(image, model: Model, trace: ForwardTrace | None = None) -> Tensor:
    """Class logits [B, num_classes]. Pass a ForwardTrace to collect per-layer states."""
    state = embed(image, model)
    if trace is not None:
        trace.layer_states.append(state)
    for layer in range(model.config.depth):
        state = layer_forward(state, model, layer, trace)
        if trace is not None:
            trace.layer_states.append(state)
    cls = getitem(state.beta, (slice(None), 0))
    cls = layer_norm(cls, *model.norm("head_norm"), LN_EPS)
    return linear_forward(cls, model.linear("head"))
