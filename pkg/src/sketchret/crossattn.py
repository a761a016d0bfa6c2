"""Cross-modal attention by query swapping, and retrieval-token distances.

The sketch side attends with its own queries over the image side's keys
and values, and vice versa; both token sets (retrieval token included)
are updated through a pre-norm residual connection. Similarity is the
Euclidean distance between the two retrieval tokens, either before
("pre", precomputable per image) or after ("post", pairwise) the
exchange.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import multi_head_attention
from .errors import ConfigError, DimensionError
from .tensor import Tensor
from .tokenizer import TokenEmbedding


@dataclass
class CrossAttnParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln_g: Tensor
    ln_b: Tensor
    heads: int
    full_dim_scale: bool = False

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ConfigError(f"d={d} not divisible by heads={self.heads}")

    def named(self, prefix: str = "cross") -> dict[str, Tensor]:
        fields = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_g", "ln_b")
        return {f"{prefix}.{f}": getattr(self, f) for f in fields}


@dataclass
class PairScore:
    distance: float
    rt_sketch: np.ndarray
    rt_image: np.ndarray
    mode: str


def init_cross_params(d: int, heads: int, rng: np.random.Generator, dtype=np.float32) -> CrossAttnParams:
    def w(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    return CrossAttnParams(
        wq=w((d, d)), bq=zeros((d,)),
        wk=w((d, d)), bk=zeros((d,)),
        wv=w((d, d)), bv=zeros((d,)),
        wo=w((d, d)), bo=zeros((d,)),
        ln_g=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln_b=zeros((d,)),
        heads=heads,
    )


def _qkv(x: Tensor, p: CrossAttnParams) -> tuple[Tensor, Tensor, Tensor]:
    xl = T.layer_norm(x, p.ln_g, p.ln_b)
    return (
        T.matmul(xl, p.wq) + p.bq,
        T.matmul(xl, p.wk) + p.bk,
        T.matmul(xl, p.wv) + p.bv,
    )


def cross_attend(
    e_s: TokenEmbedding, e_r: TokenEmbedding, p: CrossAttnParams
) -> tuple[TokenEmbedding, TokenEmbedding]:
    """Swap queries across modalities; token counts may differ."""
    if e_s.d != e_r.d:
        raise DimensionError(f"width mismatch: sketch d={e_s.d}, image d={e_r.d}")
    if e_s.d != p.wq.shape[0]:
        raise DimensionError(f"embedding d={e_s.d} but cross-attention expects {p.wq.shape[0]}")
    qs, ks, vs = _qkv(e_s.tokens, p)
    qr, kr, vr = _qkv(e_r.tokens, p)
    s_att, _ = multi_head_attention(qs, kr, vr, p.heads, p.full_dim_scale)
    r_att, _ = multi_head_attention(qr, ks, vs, p.heads, p.full_dim_scale)
    out_s = e_s.tokens + (T.matmul(s_att, p.wo) + p.bo)
    out_r = e_r.tokens + (T.matmul(r_att, p.wo) + p.bo)
    return (
        TokenEmbedding(tokens=out_s, modality=e_s.modality),
        TokenEmbedding(tokens=out_r, modality=e_r.modality),
    )


def rt_of(e: TokenEmbedding) -> Tensor:
    """Row-0 retrieval token; (d,) or batched (B, d)."""
    if e.tokens.ndim == 2:
        return e.tokens[0]
    return e.tokens[:, 0, :]


def euclidean(a: Tensor, b: Tensor) -> Tensor:
    """L2 distance along the last axis; scalar or (B,)."""
    diff = a - b
    return T.sqrt((diff * diff).sum(axis=-1))


def pair_distance(
    e_s: TokenEmbedding, e_r: TokenEmbedding, p: CrossAttnParams, mode: str = "pre"
) -> PairScore:
    """Retrieval-token distance. pre: as encoded; post: after cross_attend."""
    if mode == "post":
        e_s, e_r = cross_attend(e_s, e_r, p)
    elif mode != "pre":
        raise ValueError(f"mode must be 'pre' or 'post', got {mode!r}")
    rs, rr = rt_of(e_s), rt_of(e_r)
    dist = euclidean(rs, rr)
    return PairScore(
        distance=float(dist.values),
        rt_sketch=rs.values.copy(),
        rt_image=rr.values.copy(),
        mode=mode,
    )
