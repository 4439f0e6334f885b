"""Parameterized layers: linear, MLP block, multi-head attention and the
nested attention whose logits are fused with the previous layer's."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .tensor import (
    ShapeError,
    Tensor,
    concat,
    gelu,
    matmul,
    reshape,
    softmax,
    transpose,
)


@dataclass(frozen=True)
class LinearParams:
    weight: Tensor  # [D_in, D_out]
    bias: Tensor | None = None  # [D_out]

    def __post_init__(self):
        w = self.weight
        if w.ndim != 2:
            raise ShapeError(f"linear weight must be rank 2, got {w.shape}")
        if self.bias is not None and self.bias.shape != (w.shape[1],):
            raise ShapeError(f"linear bias {self.bias.shape} does not match weight {w.shape}")


@dataclass(frozen=True)
class MlpBlockParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass(frozen=True)
class MhaParams:
    """Query/key/value/output projections, each [D, D], split into ``num_heads`` heads."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    num_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {getattr(self, name).shape}")
        if d % self.num_heads:
            raise ShapeError(f"model width {d} not divisible by {self.num_heads} heads")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


@dataclass(frozen=True)
class FusionMlpParams:
    """Per-(query, key) MLP over stacked logits: 2h -> hidden -> h."""

    w1: LinearParams
    w2: LinearParams

    @property
    def hidden(self) -> int:
        return self.w1.weight.shape[1]


@dataclass
class AttentionState:
    logits: Tensor  # [B, h, N, N], pre-softmax and unfused
    weights: Tensor  # [B, h, N, N]


def linear_forward(x: Tensor, p: LinearParams) -> Tensor:
    if x.shape[-1] != p.weight.shape[0]:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} vs weight {p.weight.shape}")
    if x.ndim == 1:
        return reshape(linear_forward(reshape(x, (1, x.shape[0])), p), (p.weight.shape[1],))
    y = matmul(x, p.weight)
    if p.bias is not None:
        y = y + p.bias
    return y


def mlp_block_forward(x: Tensor, p: MlpBlockParams) -> Tensor:
    return linear_forward(gelu(linear_forward(x, p.fc1)), p.fc2)


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _check_tokens(x: Tensor, p: MhaParams) -> None:
    if x.ndim != 3 or x.shape[-1] != p.dim:
        raise ShapeError(f"attention expects [B, N, {p.dim}], got {x.shape}")


def attention_logits(x: Tensor, p: MhaParams) -> Tensor:
    """Scaled query-key scores per head, [B, h, N, N]."""
    _check_tokens(x, p)
    q = _split_heads(matmul(x, p.w_q), p.num_heads)
    k = _split_heads(matmul(x, p.w_k), p.num_heads)
    return matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(p.head_dim))


def _attend(x: Tensor, weights: Tensor, p: MhaParams) -> Tensor:
    b, n, d = x.shape
    v = _split_heads(matmul(x, p.w_v), p.num_heads)
    heads = matmul(weights, v)  # [B, h, N, d_h]
    merged = reshape(transpose(heads, (0, 2, 1, 3)), (b, n, d))
    return matmul(merged, p.w_o)


def mha_forward(x: Tensor, p: MhaParams) -> tuple[Tensor, AttentionState]:
    z = attention_logits(x, p)
    a = softmax(z, axis=-1)
    return _attend(x, a, p), AttentionState(z, a)


def fuse_logits(z: Tensor, prev: Tensor, f: FusionMlpParams) -> Tensor:
    """z + MLP(z, prev), the MLP acting on the head axis at each (query, key) cell."""
    if z.shape != prev.shape:
        raise ShapeError(f"fusion: logits {z.shape} vs previous logits {prev.shape}")
    h = z.shape[1]
    if f.w1.weight.shape[0] != 2 * h or f.w2.weight.shape[1] != h:
        raise ShapeError(
            f"fusion MLP {f.w1.weight.shape}->{f.w2.weight.shape} does not fit {h} heads"
        )
    stacked = transpose(concat([z, prev], axis=1), (0, 2, 3, 1))  # [B, N, N, 2h]
    delta = linear_forward(gelu(linear_forward(stacked, f.w1)), f.w2)
    return z + transpose(delta, (0, 3, 1, 2))


def nested_mha_forward(
    x: Tensor,
    p: MhaParams,
    f: FusionMlpParams | None,
    prev_logits: Tensor | None = None,
) -> tuple[Tensor, AttentionState]:
    """Attention whose logits are corrected by the previous outer layer's logits.

    Without ``prev_logits`` (first outer layer) this is plain ``mha_forward``.
    The returned state holds the raw logits so the next layer fuses against
    unfused scores.
    """
    z = attention_logits(x, p)
    if prev_logits is None:
        a = softmax(z, axis=-1)
    else:
        if f is None:
            raise ShapeError("previous logits given but no fusion parameters")
        a = softmax(fuse_logits(z, prev_logits, f), axis=-1)
    return _attend(x, a, p), AttentionState(z, a)
