"""Seen/unseen retrieval evaluation over a unified test gallery."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tokenizer
from .data import Dataset
from .errors import ContractError
from .index import RankedResult, RetrievalIndex, build_index, knn, map_metric, rerank, topk_accuracy
from .model import RetrievalModel
from .tensor import Tensor
from .training import FoldSpec
from .data import split_seen

log = logging.getLogger(__name__)

TOPK_LEVELS = (10, 50, 100)


@dataclass
class EvalQueries:
    seen: list  # sketch Items
    unseen: list


def test_gallery(ds: Dataset, fold: FoldSpec, seed: int) -> tuple[Dataset, EvalQueries]:
    """Gallery = seen-class test images plus all unseen-class images;
    queries are seen-class sketches and unseen-class sketches."""
    train, test_seen, test_unseen = split_seen(ds, fold, seed=seed)
    gallery_items = test_seen.images() + test_unseen.images()
    gallery = ds.subset(gallery_items)
    return gallery, EvalQueries(seen=train.sketches(), unseen=test_unseen.sketches())


def rank_queries(
    model: RetrievalModel, index: RetrievalIndex, queries, batch: int = 32
) -> list[RankedResult]:
    """Full-gallery ranking for every query sketch."""
    results = []
    for start in range(0, len(queries), batch):
        chunk = queries[start : start + batch]
        x = Tensor(
            np.stack(
                [
                    tokenizer.preprocess_sketch(q.load_raster(), model.cfg.input_size).values
                    for q in chunk
                ]
            )
        )
        rts = model.sketch_rt(x)
        for q, rt in zip(chunk, rts):
            results.append(knn(index, rt, k=len(index), query_id=q.id))
    return results


def metrics_block(results: list[RankedResult], labels: dict[str, str], query_labels: dict[str, str]) -> dict:
    block = {"mAP": map_metric(results, labels, query_labels)}
    for k in TOPK_LEVELS:
        block[f"top{k}"] = topk_accuracy(results, labels, query_labels, k)
    return block


def evaluate_fold(
    model: RetrievalModel,
    ds: Dataset,
    fold: FoldSpec,
    seed: int = 0,
    index: RetrievalIndex | None = None,
) -> dict:
    """mAP and Top-K for seen and unseen query pools against the test gallery."""
    gallery, queries = test_gallery(ds, fold, seed)
    if index is None:
        index, _ = build_index(model, gallery)
    labels = {e.id: e.label for e in index.entries}
    q_labels = {q.id: q.label for q in queries.seen + queries.unseen}
    report = {"fold": fold.fold_id}
    for name, pool in (("seen", queries.seen), ("unseen", queries.unseen)):
        if not pool:
            report[name] = None
            continue
        results = rank_queries(model, index, pool)
        report[name] = metrics_block(results, labels, q_labels)
    return report


def random_map_baseline(
    results: list[RankedResult],
    labels: dict[str, str],
    query_labels: dict[str, str],
    permutations: int = 100,
    seed: int = 0,
) -> float:
    """Empirical mAP of rank-shuffled results, averaged over permutations."""
    if not results:
        raise ContractError("no results to shuffle")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(permutations):
        shuffled = []
        for res in results:
            perm = rng.permutation(len(res.entries))
            shuffled.append(
                RankedResult(query_id=res.query_id, entries=[res.entries[i] for i in perm])
            )
        values.append(map_metric(shuffled, labels, query_labels))
    return float(np.mean(values))
