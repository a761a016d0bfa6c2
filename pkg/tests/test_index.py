"""Index build, exact kNN, reranking, retrieval metrics, and the on-disk format."""

import numpy as np
import pytest

from sketchret import data as D
from sketchret import index as ix
from sketchret.errors import ContractError, DimensionError, FormatError
from sketchret.model import ModelConfig, RetrievalModel


def make_index(n=10, d=4, seed=0, fingerprint=None):
    rng = np.random.default_rng(seed)
    entries = [
        ix.IndexEntry(id=f"image/c{i % 2}/{i:03d}", label=f"c{i % 2}",
                      vector=rng.normal(size=d).astype(np.float32))
        for i in range(n)
    ]
    kwargs = {"fingerprint": fingerprint} if fingerprint else {}
    return ix.RetrievalIndex(d=d, entries=entries, **kwargs)


class TestRetrievalIndex:
    def test_duplicate_ids(self):
        e = ix.IndexEntry(id="a", label="x", vector=np.zeros(2, dtype=np.float32))
        with pytest.raises(ContractError):
            ix.RetrievalIndex(d=2, entries=[e, e])

    def test_width_mismatch(self):
        e = ix.IndexEntry(id="a", label="x", vector=np.zeros(3, dtype=np.float32))
        with pytest.raises(DimensionError):
            ix.RetrievalIndex(d=2, entries=[e])


class TestKnn:
    def test_exact_against_brute_force(self):
        # 1000 random gallery vectors at d=32, checked against a direct argsort
        rng = np.random.default_rng(1)
        idx = make_index(n=1000, d=32, seed=1)
        q = rng.normal(size=32)
        got = ix.knn(idx, q, k=25).ids()
        mat = idx.matrix().astype(np.float64)
        dists = np.linalg.norm(mat - q, axis=1)
        expect = [idx.entries[i].id for i in np.argsort(dists, kind="stable")[:25]]
        assert got == expect

    def test_ties_broken_by_id(self):
        v = np.ones(3, dtype=np.float32)
        entries = [ix.IndexEntry(id=n, label="x", vector=v) for n in ("b", "a", "c")]
        idx = ix.RetrievalIndex(d=3, entries=entries)
        assert ix.knn(idx, np.zeros(3), k=3).ids() == ["a", "b", "c"]

    def test_k_beyond_size_returns_all(self):
        idx = make_index(n=5)
        assert len(ix.knn(idx, np.zeros(4), k=50).entries) == 5

    def test_monotone_distances(self):
        idx = make_index(n=30, seed=2)
        res = ix.knn(idx, np.random.default_rng(3).normal(size=4), k=30)
        ds_ = [e.distance for e in res.entries]
        assert ds_ == sorted(ds_)

    def test_bad_inputs(self):
        idx = make_index()
        with pytest.raises(ContractError):
            ix.knn(idx, np.zeros(4), k=0)
        with pytest.raises(DimensionError):
            ix.knn(idx, np.zeros(7), k=1)


class TestMetrics:
    def test_average_precision_worked_example(self):
        # relevant at ranks 1 and 3: AP = (1/1 + 2/3) / 2 = 5/6
        ap = ix.average_precision(["r1", "x", "r2", "y"], {"r1", "r2"})
        assert ap == pytest.approx(5 / 6)

    def test_average_precision_perfect_and_worst(self):
        assert ix.average_precision(["a", "b"], {"a", "b"}) == pytest.approx(1.0)
        assert ix.average_precision(["x", "y", "a"], {"a"}) == pytest.approx(1 / 3)

    def test_average_precision_no_relevant(self):
        assert ix.average_precision(["x", "y"], {"z"}) is None

    def _results(self):
        labels = {"g1": "cat", "g2": "dog", "g3": "cat"}
        qlabels = {"q1": "cat", "q2": "dog"}
        results = [
            ix.RankedResult("q1", [ix.RankedEntry(i, labels[i], float(r)) for r, i in enumerate(["g1", "g2", "g3"])]),
            ix.RankedResult("q2", [ix.RankedEntry(i, labels[i], float(r)) for r, i in enumerate(["g2", "g1", "g3"])]),
        ]
        return results, labels, qlabels

    def test_map_hand_example(self):
        results, labels, qlabels = self._results()
        # q1: cat at ranks 1,3 -> 5/6 ; q2: dog at rank 1 -> 1
        assert ix.map_metric(results, labels, qlabels) == pytest.approx((5 / 6 + 1.0) / 2)

    def test_map_excludes_relevantless_queries(self):
        results, labels, qlabels = self._results()
        results.append(ix.RankedResult("q3", [ix.RankedEntry("g1", "cat", 0.0)]))
        qlabels["q3"] = "bird"
        assert ix.map_metric(results, labels, qlabels) == pytest.approx((5 / 6 + 1.0) / 2)

    def test_map_all_excluded_raises(self):
        results, labels, _ = self._results()
        with pytest.raises(ContractError):
            ix.map_metric(results, labels, {"q1": "bird", "q2": "bird"})

    def test_topk(self):
        results, labels, qlabels = self._results()
        # k=2: q1 top2 = cat,dog -> 1/2 ; q2 top2 = dog,cat -> 1/2
        assert ix.topk_accuracy(results, labels, qlabels, k=2) == pytest.approx(0.5)
        # k beyond length truncates the denominator
        assert ix.topk_accuracy(results, labels, qlabels, k=10) == pytest.approx(
            (2 / 3 + 1 / 3) / 2
        )

    def test_metric_invariance_under_monotone_rescale(self):
        # mAP/top-k depend only on rank order: 2d+1 rescaling changes nothing
        results, labels, qlabels = self._results()
        rescaled = [
            ix.RankedResult(r.query_id, [ix.RankedEntry(e.id, e.label, 2 * e.distance + 1) for e in r.entries])
            for r in results
        ]
        assert ix.map_metric(rescaled, labels, qlabels) == ix.map_metric(results, labels, qlabels)
        assert ix.topk_accuracy(rescaled, labels, qlabels, 2) == ix.topk_accuracy(results, labels, qlabels, 2)


@pytest.fixture(scope="module")
def built():
    ds = D.generate_synthetic(2, 2, 4, size=32, seed=0)
    cfg = ModelConfig(input_size=32, d=16, blocks=1, heads=2, cross_heads=2,
                      filter_layers=[1], keep_ratio=1.0)
    model = RetrievalModel.init(cfg, seed=0)
    idx, report = ix.build_index(model, ds)
    return ds, model, idx, report


class TestBuildAndRerank:
    def test_build_counts(self, built):
        ds, _, idx, report = built
        assert report.built == len(idx) == 8
        assert not report.skipped
        assert {e.label for e in idx.entries} == set(ds.classes)

    def test_batched_build_matches_single(self, built):
        ds, model, idx, _ = built
        idx2, _ = ix.build_index(model, ds, batch=1)
        assert np.allclose(idx.matrix(), idx2.matrix(), atol=1e-4)

    def test_rerank_zero_is_identity(self, built):
        ds, model, idx, _ = built
        sketch = ds.sketches()[0]
        from sketchret import tokenizer as tok

        emb = model.encode_sketch(tok.preprocess_sketch(sketch.load_raster(), 32))
        res = ix.knn(idx, emb.tokens.values[0], k=8)
        same = ix.rerank(model, emb, res, 0, lambda i: None)
        assert same.ids() == res.ids()

    def test_rerank_rescores_head_with_post_mode(self, built):
        ds, model, idx, _ = built
        by_id = {i.id: i for i in ds.items}
        from sketchret import tokenizer as tok

        sketch = ds.sketches()[0]
        emb = model.encode_sketch(tok.preprocess_sketch(sketch.load_raster(), 32))
        res = ix.knn(idx, emb.tokens.values[0], k=8)
        out = ix.rerank(model, emb, res, 3, lambda i: by_id[i].load_raster())
        assert set(out.ids()[:3]) == set(res.ids()[:3])  # same candidates, maybe reordered
        assert out.ids()[3:] == res.ids()[3:]            # untouched tail
        assert all(e.mode == "post" for e in out.entries[:3])
        assert all(e.mode == "pre" for e in out.entries[3:])
        head = [e.distance for e in out.entries[:3]]
        assert head == sorted(head)

    def test_rerank_m_too_large(self, built):
        _, model, idx, _ = built
        res = ix.knn(idx, np.zeros(16), k=4)
        with pytest.raises(ContractError):
            ix.rerank(model, None, res, 5, lambda i: None)

    def test_rerank_drops_missing_images(self, built):
        ds, model, idx, _ = built
        by_id = {i.id: i for i in ds.items}
        from sketchret import tokenizer as tok

        emb = model.encode_sketch(tok.preprocess_sketch(ds.sketches()[0].load_raster(), 32))
        res = ix.knn(idx, emb.tokens.values[0], k=8)
        missing = res.ids()[0]

        def loader(i):
            if i == missing:
                raise FileNotFoundError(i)
            return by_id[i].load_raster()

        out = ix.rerank(model, emb, res, 2, loader)
        assert missing not in out.ids()
        assert len(out.entries) == 7


class TestBinaryFormat:
    def test_round_trip(self, tmp_path):
        idx = make_index(n=7, d=5, seed=4, fingerprint=bytes(range(32)))
        path = tmp_path / "g.idx"
        ix.save_index(idx, path)
        back = ix.load_index(path)
        assert back.d == 5 and len(back) == 7
        assert back.fingerprint == bytes(range(32))
        for a, b in zip(idx.entries, back.entries):
            assert a.id == b.id and a.label == b.label
            assert np.array_equal(a.vector.astype("<f4"), b.vector)

    def test_unicode_ids_survive(self, tmp_path):
        e = ix.IndexEntry(id="image/chaton/café-01", label="châton",
                          vector=np.ones(2, dtype=np.float32))
        path = tmp_path / "u.idx"
        ix.save_index(ix.RetrievalIndex(d=2, entries=[e]), path)
        back = ix.load_index(path)
        assert back.entries[0].id == "image/chaton/café-01"
        assert back.entries[0].label == "châton"

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(FormatError, match="offset 0"):
            ix.load_index(path)

    def test_truncation_reports_offset(self, tmp_path):
        idx = make_index(n=3, d=4)
        path = tmp_path / "t.idx"
        ix.save_index(idx, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError) as err:
            ix.load_index(path)
        assert err.value.offset is not None and err.value.offset > 0

    def test_trailing_garbage_rejected(self, tmp_path):
        idx = make_index(n=2, d=3)
        path = tmp_path / "g.idx"
        ix.save_index(idx, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            ix.load_index(path)

    def test_wrong_version(self, tmp_path):
        import struct

        idx = make_index(n=1, d=2)
        path = tmp_path / "v.idx"
        ix.save_index(idx, path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, 4, 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            ix.load_index(path)
