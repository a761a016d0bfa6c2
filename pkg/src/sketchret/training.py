"""Triplet-loss training with AdamW and the 4-fold seen/unseen protocol."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import crossattn, tokenizer
from .crossattn import euclidean, rt_of
from .data import Dataset, Item, split_seen
from .errors import ContractError, SamplingError
from .model import ModelConfig, RetrievalModel
from .tensor import Tensor, relu, zero_grads

log = logging.getLogger(__name__)

# canonical 20-class catalog; sorted order matches the published fold tables
RSKETCH_CLASSES = (
    "airplane",
    "baseball diamond",
    "basketball court",
    "beach",
    "bridge",
    "closed road",
    "crosswalk",
    "football field",
    "golf course",
    "intersection",
    "oil gas field",
    "overpass",
    "railway",
    "river",
    "runway",
    "runway marking",
    "storage tank",
    "swimming pool",
    "tennis court",
    "wwtp",
)


@dataclass
class FoldSpec:
    fold_id: str
    unseen: list[str]
    seen: list[str]


@dataclass
class TripletBatch:
    sketches: list[Item]
    positives: list[Item]
    negatives: list[Item]

    def __post_init__(self):
        if not self.sketches:
            raise ContractError("empty triplet batch")
        for s, p, n in zip(self.sketches, self.positives, self.negatives):
            if s.label != p.label or s.label == n.label:
                raise ContractError(
                    f"bad triplet labels: sketch={s.label}, pos={p.label}, neg={n.label}"
                )

    def __len__(self) -> int:
        return len(self.sketches)


@dataclass
class TrainConfig:
    margin: float = 0.3
    lr: float = 2e-5
    weight_decay: float = 0.01
    batch: int = 16
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    fold_id: str = "S1"
    loss_mode: str = "both"  # pre | post | both

    def __post_init__(self):
        if self.margin <= 0 or self.lr < 0 or self.weight_decay < 0 or self.batch < 1:
            raise ContractError("margin > 0, lr/wd >= 0, batch >= 1 required")
        if self.loss_mode not in ("pre", "post", "both"):
            raise ContractError(f"loss_mode must be pre/post/both, got {self.loss_mode!r}")


def make_folds(classes) -> list[FoldSpec]:
    """Four seen/unseen partitions: fold i holds out every 4th class of the
    sorted catalog. For the canonical 20-class list this reproduces the
    published S1..S4 unseen sets."""
    classes = list(classes)
    if len(set(classes)) != len(classes):
        raise ContractError("duplicate class names")
    ordered = sorted(classes)
    folds = []
    for i in range(4):
        unseen = ordered[i::4]
        seen = [c for c in ordered if c not in unseen]
        folds.append(FoldSpec(fold_id=f"S{i + 1}", unseen=unseen, seen=seen))
    return folds


def get_fold(classes, fold_id: str) -> FoldSpec:
    for f in make_folds(classes):
        if f.fold_id == fold_id:
            return f
    raise ContractError(f"unknown fold id {fold_id!r}")


# ----- triplet sampling -------------------------------------------------------


def sample_triplets(ds: Dataset, t: int, rng: np.random.Generator) -> TripletBatch:
    """Uniform sketch; positive uniform from its class; negative uniform
    over images of all other classes."""
    sketches = ds.sketches()
    images = ds.images()
    labels_with_images = {i.label for i in images}
    if len(labels_with_images) < 2:
        raise SamplingError("need images from at least 2 classes to form triplets")
    by_class: dict[str, list[Item]] = {}
    for img in images:
        by_class.setdefault(img.label, []).append(img)
    pool = [s for s in sketches if s.label in labels_with_images]
    if not pool:
        raise SamplingError("no sketches with image-bearing labels")
    s_sel, p_sel, n_sel = [], [], []
    for _ in range(t):
        s = pool[rng.integers(len(pool))]
        pos_pool = by_class[s.label]
        neg_pool = [i for i in images if i.label != s.label]
        s_sel.append(s)
        p_sel.append(pos_pool[rng.integers(len(pos_pool))])
        n_sel.append(neg_pool[rng.integers(len(neg_pool))])
    return TripletBatch(s_sel, p_sel, n_sel)


# ----- loss -------------------------------------------------------------------


def _batched_rts(model: RetrievalModel, batch: TripletBatch, cache: dict):
    """Encode the batch; returns (rt_s, rt_p, rt_n[, post variants]) Tensors (B,d)."""

    def stack(items, kind):
        arrs = []
        for it in items:
            key = (kind, it.id)
            if key not in cache:
                raster = it.load_raster()
                if kind == "sketch":
                    cache[key] = tokenizer.preprocess_sketch(raster, model.cfg.input_size).values
                else:
                    cache[key] = tokenizer.preprocess_image(
                        raster, model.cfg.input_size, model.cfg.norm_mean, model.cfg.norm_std
                    ).values
            arrs.append(cache[key])
        return Tensor(np.stack(arrs))

    e_s = model.encode_sketch(stack(batch.sketches, "sketch"))
    e_p = model.encode_image(stack(batch.positives, "image"))
    e_n = model.encode_image(stack(batch.negatives, "image"))
    return e_s, e_p, e_n


def triplet_hinge(d_pos: Tensor, d_neg: Tensor, m: float) -> Tensor:
    """(1/T) sum max(d+ - d- + m, 0) over a batch of distance pairs."""
    return relu(d_pos - d_neg + m).mean()


def triplet_loss(
    batch: TripletBatch, model: RetrievalModel, m: float, mode: str = "both", cache: dict | None = None
) -> Tensor:
    """Triplet hinge over retrieval-token distances.

    mode selects pre-cross-attention distances, post, or the sum of both
    losses, matching how the index (pre) and reranker (post) score pairs.
    """
    if cache is None:
        cache = {}
    e_s, e_p, e_n = _batched_rts(model, batch, cache)
    if mode in ("pre", "both"):
        loss = triplet_hinge(
            euclidean(rt_of(e_s), rt_of(e_p)), euclidean(rt_of(e_s), rt_of(e_n)), m
        )
    if mode in ("post", "both"):
        sp, pp = crossattn.cross_attend(e_s, e_p, model.cross)
        sn, nn_ = crossattn.cross_attend(e_s, e_n, model.cross)
        post = triplet_hinge(
            euclidean(rt_of(sp), rt_of(pp)), euclidean(rt_of(sn), rt_of(nn_)), m
        )
        loss = post if mode == "post" else loss + post
    return loss


# ----- optimizer ---------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Decoupled weight decay update with bias-corrected moments.

    A parameter with no accumulated gradient is treated as having a zero
    gradient, so it still shrinks by lr*wd per step when decay is on.
    """
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {p.values.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.values = p.values - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * p.values)


# ----- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    loss_curve: list[tuple[int, float]]
    steps: int
    audited_labels: set[str]


def train(
    ds: Dataset,
    fold: FoldSpec,
    cfg: TrainConfig,
    model: RetrievalModel,
    progress: bool = False,
) -> TrainResult:
    """Sample -> forward -> triplet loss -> backward -> AdamW, on seen-train
    data only. Deterministic for a fixed seed."""
    train_split, _, _ = split_seen(ds, fold, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = model.named_params()
    state = AdamWState()
    cache: dict = {}
    n_sketches = len(train_split.sketches())
    steps_per_epoch = max(1, math.ceil(n_sketches / cfg.batch))
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    curve: list[tuple[int, float]] = []
    audited: set[str] = set()
    for step in range(total):
        batch = sample_triplets(train_split, cfg.batch, rng)
        audited.update(i.label for i in batch.sketches + batch.positives + batch.negatives)
        zero_grads(params)
        loss = triplet_loss(batch, model, cfg.margin, cfg.loss_mode, cache)
        value = loss.item()
        if not np.isfinite(value):
            raise ContractError(f"non-finite loss {value} at step {step}")
        loss.backward()
        adamw_step(params, state, cfg.lr, cfg.weight_decay)
        curve.append((step, value))
        if progress and step % 50 == 0:
            log.info("step %d/%d loss %.4f", step, total, value)
    unseen_used = audited & set(fold.unseen)
    if unseen_used:
        raise ContractError(f"unseen classes leaked into training: {sorted(unseen_used)}")
    return TrainResult(loss_curve=curve, steps=total, audited_labels=audited)


def write_loss_csv(curve: list[tuple[int, float]], path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for step, value in curve:
            fh.write(f"{step},{value}\n")
