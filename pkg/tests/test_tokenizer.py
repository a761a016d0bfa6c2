"""Sketch/image tokenization: preprocessing, token counts, [RT] prepending."""

import numpy as np
import pytest

from sketchret import tokenizer as tok
from sketchret.errors import ConfigError, DimensionError
from sketchret.tensor import Tensor


@pytest.fixture(scope="module")
def params224():
    rng = np.random.default_rng(0)
    return tok.init_tokenizer_params(d=32, n=196, patch=16, rng=rng)


class TestPreprocessSketch:
    def test_white_page_maps_to_zero(self):
        page = np.full((40, 40, 3), 255, dtype=np.uint8)
        from PIL import Image

        out = tok.preprocess_sketch(Image.fromarray(page), size=32)
        assert out.shape == (1, 32, 32)
        assert np.all(out.values == 0.0)

    def test_black_stroke_maps_to_one(self):
        from PIL import Image

        page = np.full((32, 32, 3), 255, dtype=np.uint8)
        page[10:12, :] = 0
        out = tok.preprocess_sketch(Image.fromarray(page), size=32)
        assert out.values.max() == pytest.approx(1.0)
        assert out.values[0, 10, 5] == pytest.approx(1.0)

    def test_idempotent(self):
        from PIL import Image

        page = np.full((32, 32, 3), 255, dtype=np.uint8)
        page[4, :] = 0
        once = tok.preprocess_sketch(Image.fromarray(page), size=32)
        twice = tok.preprocess_sketch(once, size=32)
        assert np.array_equal(once.values, twice.values)

    def test_resizes(self):
        from PIL import Image

        page = Image.new("RGB", (60, 100))
        assert tok.preprocess_sketch(page, size=64).shape == (1, 64, 64)


class TestPreprocessImage:
    def test_normalization(self):
        from PIL import Image

        img = Image.new("RGB", (16, 16), (128, 128, 128))
        out = tok.preprocess_image(img, size=16)
        assert out.shape == (3, 16, 16)
        expect = (128 / 255 - 0.5) / 0.5
        assert np.allclose(out.values, expect, atol=1e-6)

    def test_grayscale_promoted_to_three_channels(self):
        from PIL import Image

        img = Image.new("L", (16, 16))
        assert tok.preprocess_image(img, size=16).shape == (3, 16, 16)


class TestTokenCounts:
    def test_paper_shape_sketch(self, params224):
        x = Tensor(np.random.default_rng(1).random((1, 224, 224)).astype(np.float32))
        tokens = tok.embed_sketch_multilevel(x, params224)
        assert tokens.shape == (196, 32)

    def test_paper_shape_image(self, params224):
        x = Tensor(np.random.default_rng(2).random((3, 224, 224)).astype(np.float32))
        assert tok.embed_image(x, params224).shape == (196, 32)

    def test_batched_inputs(self, params224):
        xs = Tensor(np.random.default_rng(3).random((4, 1, 224, 224)).astype(np.float32))
        assert tok.embed_sketch_multilevel(xs, params224).shape == (4, 196, 32)
        xi = Tensor(np.random.default_rng(4).random((4, 3, 224, 224)).astype(np.float32))
        assert tok.embed_image(xi, params224).shape == (4, 196, 32)

    def test_indivisible_size_rejected(self, params224):
        with pytest.raises(ConfigError):
            tok.embed_sketch_multilevel(Tensor(np.zeros((1, 100, 100), dtype=np.float32)), params224)
        with pytest.raises(ConfigError):
            tok.embed_image(Tensor(np.zeros((3, 100, 100), dtype=np.float32)), params224)

    def test_token_order_is_row_major(self):
        # a one-hot patch in the top-left must drive token 0; the same
        # patch in the bottom-right must land on the last token
        rng = np.random.default_rng(5)
        p = tok.init_tokenizer_params(d=8, n=4, patch=16, rng=rng)
        a = np.zeros((3, 32, 32), dtype=np.float32)
        b = a.copy()
        a[:, :16, :16] = 1.0
        b[:, 16:, 16:] = 1.0
        ta = tok.embed_image(Tensor(a), p).values
        tb = tok.embed_image(Tensor(b), p).values
        assert not np.allclose(ta[0], tb[0])
        assert np.allclose(ta[0], tb[3], atol=1e-5)


class TestPrependRT:
    def test_adds_one_token_and_positions(self, params224):
        x = Tensor(np.random.default_rng(6).random((1, 224, 224)).astype(np.float32))
        tokens = tok.embed_sketch_multilevel(x, params224)
        emb = tok.prepend_rt(tokens, params224, "sketch")
        assert emb.tokens.shape == (197, 32)
        assert emb.n == 196 and emb.d == 32
        expect_rt = params224.rt_seed.values + params224.pos_sketch.values[0]
        assert np.allclose(emb.tokens.values[0], expect_rt, atol=1e-6)

    def test_batched(self, params224):
        x = Tensor(np.random.default_rng(7).random((3, 1, 224, 224)).astype(np.float32))
        emb = tok.prepend_rt(tok.embed_sketch_multilevel(x, params224), params224, "sketch")
        assert emb.tokens.shape == (3, 197, 32)
        # each batch row carries the same [RT] seed
        assert np.allclose(emb.tokens.values[0, 0], emb.tokens.values[2, 0])

    def test_modalities_use_distinct_position_tables(self, params224):
        tokens = Tensor(np.zeros((196, 32), dtype=np.float32))
        s = tok.prepend_rt(tokens, params224, "sketch").tokens.values
        i = tok.prepend_rt(tokens, params224, "image").tokens.values
        assert not np.allclose(s, i)
        assert np.allclose(s - params224.pos_sketch.values, i - params224.pos_image.values)

    def test_wrong_length_rejected(self, params224):
        with pytest.raises(DimensionError):
            tok.prepend_rt(Tensor(np.zeros((10, 32), dtype=np.float32)), params224, "sketch")


def test_channel_plan():
    assert tok.sketch_channel_plan(768) == [1, 96, 192, 384, 768]
    assert tok.sketch_channel_plan(32) == [1, 4, 8, 16, 32]
    plan = tok.sketch_channel_plan(4)
    assert plan[0] == 1 and plan[-1] == 4 and min(plan) >= 1
