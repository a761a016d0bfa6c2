"""Precomputed retrieval-token index, exact kNN, reranking, and metrics.

The index stores one pre-cross-attention retrieval token per gallery
image, pinned to the producing checkpoint by a SHA-256 fingerprint.
Retrieval is an exact linear scan; approximate methods are a documented
extension point behind the same interface.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tokenizer
from .crossattn import pair_distance
from .data import Dataset
from .errors import ContractError, DimensionError, FormatError
from .model import RetrievalModel
from .tensor import Tensor

log = logging.getLogger(__name__)

INDEX_MAGIC = b"MLGT"
INDEX_VERSION = 1
FINGERPRINT_LEN = 32


@dataclass
class IndexEntry:
    id: str
    label: str
    vector: np.ndarray  # (d,) float32


@dataclass
class RetrievalIndex:
    d: int
    entries: list[IndexEntry]
    fingerprint: bytes = b"\x00" * FINGERPRINT_LEN

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate ids in index")
        for e in self.entries:
            if e.vector.shape != (self.d,):
                raise DimensionError(f"entry {e.id!r} has width {e.vector.shape}, index d={self.d}")

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self) -> np.ndarray:
        return np.stack([e.vector for e in self.entries]) if self.entries else np.zeros((0, self.d))


@dataclass
class RankedEntry:
    id: str
    label: str
    distance: float
    mode: str = "pre"


@dataclass
class RankedResult:
    query_id: str
    entries: list[RankedEntry] = field(default_factory=list)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]


@dataclass
class BuildReport:
    built: int = 0
    skipped: list[str] = field(default_factory=list)


def build_index(
    model: RetrievalModel,
    images: Dataset,
    fingerprint: bytes = b"\x00" * FINGERPRINT_LEN,
    batch: int = 32,
) -> tuple[RetrievalIndex, BuildReport]:
    """One pre-mode retrieval token per gallery image."""
    items = images.images()
    if not items:
        raise ContractError("no images to index")
    report = BuildReport()
    entries: list[IndexEntry] = []
    pending: list[tuple[object, np.ndarray]] = []

    def flush():
        if not pending:
            return
        x = Tensor(np.stack([arr for _, arr in pending]))
        rts = model.image_rt(x)
        for (item, _), vec in zip(pending, rts):
            entries.append(IndexEntry(id=item.id, label=item.label, vector=vec.astype(np.float32)))
        pending.clear()

    for item in items:
        try:
            raster = item.load_raster()
            arr = tokenizer.preprocess_image(
                raster, model.cfg.input_size, model.cfg.norm_mean, model.cfg.norm_std
            ).values
        except Exception as exc:  # decode failures skip the image, not the build
            log.warning("skipping %s: %s", item.id, exc)
            report.skipped.append(item.id)
            continue
        pending.append((item, arr))
        if len(pending) >= batch:
            flush()
    flush()
    report.built = len(entries)
    return RetrievalIndex(d=model.cfg.d, entries=entries, fingerprint=fingerprint), report


def knn(index: RetrievalIndex, rt_s: np.ndarray, k: int, query_id: str = "query") -> RankedResult:
    """Exact top-k by L2 distance; ties broken by ascending id. k larger
    than the index returns the full ranking."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    rt = np.asarray(rt_s, dtype=np.float64).reshape(-1)
    if rt.shape[0] != index.d:
        raise DimensionError(f"query width {rt.shape[0]} != index width {index.d}")
    mat = index.matrix().astype(np.float64)
    dists = np.sqrt(((mat - rt) ** 2).sum(axis=1))
    order = sorted(range(len(index)), key=lambda i: (dists[i], index.entries[i].id))
    top = order[: min(k, len(order))]
    return RankedResult(
        query_id=query_id,
        entries=[
            RankedEntry(id=index.entries[i].id, label=index.entries[i].label, distance=float(dists[i]))
            for i in top
        ],
    )


def rerank(
    model: RetrievalModel,
    sketch_embedding,
    candidates: RankedResult,
    m: int,
    image_loader,
) -> RankedResult:
    """Rescore the top-M candidates with post-cross-attention distances.

    ``image_loader(id)`` returns a decodable raster for a candidate; a
    missing image drops the candidate with a warning. The tail beyond M
    keeps its pre-mode order after the reranked head.
    """
    if m > len(candidates.entries):
        raise ContractError(f"M={m} exceeds candidate count {len(candidates.entries)}")
    if m == 0:
        return candidates
    head, tail = candidates.entries[:m], candidates.entries[m:]
    rescored = []
    for entry in head:
        try:
            raster = image_loader(entry.id)
            x = tokenizer.preprocess_image(
                raster, model.cfg.input_size, model.cfg.norm_mean, model.cfg.norm_std
            )
            e_r = model.encode_image(x)
        except Exception as exc:
            log.warning("rerank: dropping %s: %s", entry.id, exc)
            continue
        score = pair_distance(sketch_embedding, e_r, model.cross, mode="post")
        rescored.append(RankedEntry(id=entry.id, label=entry.label, distance=score.distance, mode="post"))
    rescored.sort(key=lambda e: (e.distance, e.id))
    return RankedResult(query_id=candidates.query_id, entries=rescored + tail)


# ----- metrics -----------------------------------------------------------------


def average_precision(ranked_ids: list[str], relevant: set[str]) -> float | None:
    """Mean of precision-at-rank over the relevant items; None if no relevant."""
    if not relevant & set(ranked_ids):
        return None
    hits = 0
    precisions = []
    for rank, rid in enumerate(ranked_ids, start=1):
        if rid in relevant:
            hits += 1
            precisions.append(hits / rank)
    return float(np.mean(precisions))


def map_metric(results: list[RankedResult], labels: dict[str, str], query_labels: dict[str, str]) -> float:
    """Mean average precision; queries with zero relevant items are excluded."""
    aps = []
    excluded = 0
    for res in results:
        q_label = query_labels[res.query_id]
        relevant = {rid for rid, lab in labels.items() if lab == q_label}
        ap = average_precision(res.ids(), relevant)
        if ap is None:
            excluded += 1
            continue
        aps.append(ap)
    if excluded:
        log.warning("map_metric: excluded %d queries with no relevant gallery items", excluded)
    if not aps:
        raise ContractError("no queries with relevant gallery items")
    return float(np.mean(aps))


def topk_accuracy(
    results: list[RankedResult], labels: dict[str, str], query_labels: dict[str, str], k: int
) -> float:
    """Mean over queries of (#same-label in top K) / K, truncating K to the
    available result count."""
    scores = []
    for res in results:
        q_label = query_labels[res.query_id]
        top = res.ids()[:k]
        denom = min(k, len(res.entries))
        if denom == 0:
            continue
        hits = sum(1 for rid in top if labels.get(rid) == q_label)
        scores.append(hits / denom)
    return float(np.mean(scores)) if scores else 0.0


# ----- binary format -------------------------------------------------------------


def save_index(index: RetrievalIndex, path) -> None:
    """magic 'MLGT', version u32, d u32, count u64, entries, 32-byte fingerprint."""
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IIQ", INDEX_VERSION, index.d, len(index.entries)))
        for e in index.entries:
            ib, lb = e.id.encode(), e.label.encode()
            fh.write(struct.pack("<H", len(ib)))
            fh.write(ib)
            fh.write(struct.pack("<H", len(lb)))
            fh.write(lb)
            fh.write(e.vector.astype("<f4").tobytes())
        fp = index.fingerprint
        if len(fp) != FINGERPRINT_LEN:
            raise ContractError(f"fingerprint must be {FINGERPRINT_LEN} bytes")
        fh.write(fp)


def load_index(path) -> RetrievalIndex:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != INDEX_MAGIC:
        raise FormatError(f"bad index magic {blob[:4]!r}", offset=0)
    if len(blob) < 20:
        raise FormatError("truncated index header", offset=len(blob))
    version, d, count = struct.unpack_from("<IIQ", blob, 4)
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}", offset=4)
    offset = 20
    entries = []
    for _ in range(count):
        try:
            (id_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            if len(blob) < offset + id_len:
                raise FormatError("truncated entry id", offset=offset)
            eid = blob[offset : offset + id_len].decode()
            offset += id_len
            (lab_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            if len(blob) < offset + lab_len:
                raise FormatError("truncated entry label", offset=offset)
            label = blob[offset : offset + lab_len].decode()
            offset += lab_len
            nbytes = d * 4
            if len(blob) < offset + nbytes:
                raise FormatError("truncated entry vector", offset=offset)
            vec = np.frombuffer(blob, dtype="<f4", count=d, offset=offset).copy()
            offset += nbytes
            entries.append(IndexEntry(id=eid, label=label, vector=vec))
        except struct.error as exc:
            raise FormatError(f"truncated entry record: {exc}", offset=offset) from exc
    if len(blob) < offset + FINGERPRINT_LEN:
        raise FormatError("missing fingerprint", offset=offset)
    fingerprint = blob[offset : offset + FINGERPRINT_LEN]
    offset += FINGERPRINT_LEN
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes", offset=offset)
    return RetrievalIndex(d=d, entries=entries, fingerprint=fingerprint)
