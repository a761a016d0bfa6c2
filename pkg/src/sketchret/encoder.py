"""Self-attention encoder with attention-guided token filtering.

Pre-norm residual blocks (attention, then MLP), multi-head scaled
dot-product attention, and optional filtering after configured blocks:
the retrieval token's attention row (head-averaged) ranks the visual
tokens and only the top k survive, in their original order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor
from .tokenizer import TokenEmbedding


@dataclass
class BlockParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f}": getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class EncoderParams:
    blocks: list[BlockParams]
    heads: int
    filter_layers: frozenset[int] = frozenset()
    keep_ratio: float = 1.0
    full_dim_scale: bool = False  # scale logits by sqrt(d) instead of sqrt(d/h)

    def __post_init__(self):
        if self.blocks:
            d = self.blocks[0].wq.shape[0]
            if d % self.heads:
                raise ConfigError(f"d={d} not divisible by heads={self.heads}")
        bad = set(self.filter_layers) - set(range(1, len(self.blocks) + 1))
        if bad:
            raise ConfigError(f"filter_layers {sorted(bad)} outside 1..{len(self.blocks)}")
        if not (0.0 < self.keep_ratio <= 1.0):
            raise ConfigError(f"keep_ratio must be in (0,1], got {self.keep_ratio}")

    def named(self, prefix: str = "enc") -> dict[str, Tensor]:
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.block{i}"))
        return out


@dataclass
class AttentionScores:
    """Row-stochastic attention maps, one (rows x rows) matrix per head.

    Stored as a plain array of shape (heads, n+1, n+1) or batched
    (B, heads, n+1, n+1); detached from the autodiff graph.
    """

    per_head: np.ndarray

    def rt_row(self) -> np.ndarray:
        """Head-averaged attention paid by [RT] to every row; (n+1,) or (B, n+1)."""
        return self.per_head.mean(axis=-3)[..., 0, :]


def init_block_params(d: int, rng: np.random.Generator, dtype=np.float32, mlp_ratio: int = 4) -> BlockParams:
    def w(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    hidden = mlp_ratio * d
    return BlockParams(
        wq=w((d, d)), bq=zeros((d,)),
        wk=w((d, d)), bk=zeros((d,)),
        wv=w((d, d)), bv=zeros((d,)),
        wo=w((d, d)), bo=zeros((d,)),
        ln1_g=ones((d,)), ln1_b=zeros((d,)),
        ln2_g=ones((d,)), ln2_b=zeros((d,)),
        mlp_w1=w((d, hidden)), mlp_b1=zeros((hidden,)),
        mlp_w2=w((hidden, d)), mlp_b2=zeros((d,)),
    )


def init_encoder_params(
    d: int,
    blocks: int,
    heads: int,
    rng: np.random.Generator,
    filter_layers=frozenset(),
    keep_ratio: float = 1.0,
    full_dim_scale: bool = False,
    dtype=np.float32,
) -> EncoderParams:
    return EncoderParams(
        blocks=[init_block_params(d, rng, dtype) for _ in range(blocks)],
        heads=heads,
        filter_layers=frozenset(filter_layers),
        keep_ratio=keep_ratio,
        full_dim_scale=full_dim_scale,
    )


def _split_heads(x: Tensor, h: int) -> Tensor:
    """(..., n, d) -> (..., h, n, d/h)."""
    n, d = x.shape[-2], x.shape[-1]
    dh = d // h
    if x.ndim == 2:
        return x.reshape(n, h, dh).transpose(1, 0, 2)
    b = x.shape[0]
    return x.reshape(b, n, h, dh).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    """Inverse of _split_heads."""
    if x.ndim == 3:
        h, n, dh = x.shape
        return x.transpose(1, 0, 2).reshape(n, h * dh)
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, heads: int, full_dim_scale: bool = False
) -> tuple[Tensor, AttentionScores]:
    """Scaled dot-product attention; returns merged output and the score maps."""
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d if full_dim_scale else d // heads)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    att = T.softmax_rows(T.matmul(qh, kh.swap_last()) * scale)
    out = _merge_heads(T.matmul(att, vh))
    return out, AttentionScores(per_head=att.values.copy())


def msa(x: Tensor, blk: BlockParams, heads: int, full_dim_scale: bool = False) -> tuple[Tensor, AttentionScores]:
    """Pre-norm multi-head self-attention with residual connection."""
    xl = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
    q = T.matmul(xl, blk.wq) + blk.bq
    k = T.matmul(xl, blk.wk) + blk.bk
    v = T.matmul(xl, blk.wv) + blk.bv
    att_out, scores = multi_head_attention(q, k, v, heads, full_dim_scale)
    return x + (T.matmul(att_out, blk.wo) + blk.bo), scores


def mlp_block(x: Tensor, blk: BlockParams) -> Tensor:
    """Pre-norm two-layer GELU MLP with residual connection."""
    xl = T.layer_norm(x, blk.ln2_g, blk.ln2_b)
    h = T.gelu(T.matmul(xl, blk.mlp_w1) + blk.mlp_b1)
    return x + (T.matmul(h, blk.mlp_w2) + blk.mlp_b2)


def filter_tokens(tokens: Tensor, scores: AttentionScores, k: int) -> Tensor:
    """Keep [RT] plus the k visual tokens it attends to most, in original order.

    Selection is discrete (no gradient through the ranking); gradients
    flow through the kept rows via the gather.
    """
    n = tokens.shape[-2] - 1
    if not 1 <= k <= n:
        raise ContractError(f"k={k} outside 1..{n}")
    rt = scores.rt_row()  # (..., n+1); column 0 is [RT] itself
    token_scores = rt[..., 1:]
    # indices of the k largest, restored to ascending (original) order
    top = np.argpartition(-token_scores, k - 1, axis=-1)[..., :k]
    top = np.sort(top, axis=-1) + 1
    if tokens.ndim == 2:
        keep = np.concatenate([[0], top])
        return tokens[keep]
    b = tokens.shape[0]
    keep = np.concatenate([np.zeros((b, 1), dtype=np.int64), top], axis=-1)
    return T.gather(tokens, keep[:, :, None], axis=-2)


def encode(e: TokenEmbedding, p: EncoderParams) -> TokenEmbedding:
    """Run all blocks; after each block listed in filter_layers, prune tokens
    to ceil(keep_ratio * current_n)."""
    x = e.tokens
    n_cur = x.shape[-2] - 1
    for layer, blk in enumerate(p.blocks, start=1):
        x, scores = msa(x, blk, p.heads, p.full_dim_scale)
        x = mlp_block(x, blk)
        if layer in p.filter_layers and p.keep_ratio < 1.0:
            k = math.ceil(p.keep_ratio * n_cur)
            x = filter_tokens(x, scores, k)
            n_cur = k
    return TokenEmbedding(tokens=x, modality=e.modality)
