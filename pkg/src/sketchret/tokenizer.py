"""Sketch/image preprocessing and tokenization.

The sketch branch runs a 4-layer strided conv stack (kernels 7,3,3,3,
stride 2 each) so each token sees a wide receptive field over sparse
strokes; the image branch uses a single patch convolution. Both emit the
same token count for the same input size, and ``prepend_rt`` attaches the
trainable retrieval token at row 0 plus positional embeddings.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import tensor as T
from .errors import ConfigError, DimensionError, InputError
from .tensor import Tensor

SKETCH_KERNELS = (7, 3, 3, 3)
SKETCH_STRIDE = 2
WHITE_THRESHOLD = 250


@dataclass
class TokenizerParams:
    """All learnable tokenizer state. Conv layers are (weight, bias) pairs."""

    sketch_convs: list[tuple[Tensor, Tensor]]
    image_patch: tuple[Tensor, Tensor]
    pos_sketch: Tensor  # (n+1, d)
    pos_image: Tensor  # (n+1, d)
    rt_seed: Tensor  # (d,)

    def named(self, prefix: str = "tok") -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.sketch_convs):
            out[f"{prefix}.sketch.conv{i}.w"] = w
            out[f"{prefix}.sketch.conv{i}.b"] = b
        out[f"{prefix}.image.patch.w"] = self.image_patch[0]
        out[f"{prefix}.image.patch.b"] = self.image_patch[1]
        out[f"{prefix}.pos_sketch"] = self.pos_sketch
        out[f"{prefix}.pos_image"] = self.pos_image
        out[f"{prefix}.rt_seed"] = self.rt_seed
        return out


@dataclass
class TokenEmbedding:
    """Ordered token matrix with the retrieval token at row 0."""

    tokens: Tensor  # (n+1, d) or batched (B, n+1, d)
    modality: str  # "sketch" | "image"

    @property
    def n(self) -> int:
        return self.tokens.shape[-2] - 1

    @property
    def d(self) -> int:
        return self.tokens.shape[-1]


def sketch_channel_plan(d: int) -> list[int]:
    """Monotone widening 1 -> d/8 -> d/4 -> d/2 -> d (floored at 1)."""
    return [1, max(1, d // 8), max(1, d // 4), max(1, d // 2), d]


def init_tokenizer_params(
    d: int, n: int, patch: int, rng: np.random.Generator, dtype=np.float32
) -> TokenizerParams:
    def w(shape, scale=0.02):
        return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    chans = sketch_channel_plan(d)
    convs = []
    for i, k in enumerate(SKETCH_KERNELS):
        fan_in = chans[i] * k * k
        convs.append(
            (
                Tensor(
                    (rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(chans[i + 1], chans[i], k, k))).astype(dtype),
                    requires_grad=True,
                ),
                zeros((chans[i + 1],)),
            )
        )
    patch_w = Tensor(
        rng.normal(0.0, np.sqrt(2.0 / (3 * patch * patch)), size=(d, 3, patch, patch)).astype(dtype),
        requires_grad=True,
    )
    return TokenizerParams(
        sketch_convs=convs,
        image_patch=(patch_w, zeros((d,))),
        pos_sketch=w((n + 1, d)),
        pos_image=w((n + 1, d)),
        rt_seed=w((d,)),
    )


def _decode(img) -> Image.Image:
    """Accept a PIL image, file path, or encoded bytes."""
    if isinstance(img, Image.Image):
        return img
    try:
        if isinstance(img, (bytes, bytearray)):
            return Image.open(io.BytesIO(img))
        if isinstance(img, (str, Path)):
            return Image.open(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise InputError(f"cannot decode image: {exc}") from exc
    raise InputError(f"unsupported image input type {type(img).__name__}")


def preprocess_sketch(img, size: int = 224) -> Tensor:
    """White-background removal: strokes become high intensity on a zero field.

    Pixels with all channels >= 250/255 are background (0); other pixels
    map to (255 - gray) / 255. Already-processed float arrays pass
    through untouched, making the operation idempotent.
    """
    if isinstance(img, np.ndarray) and img.ndim == 3 and img.shape[0] == 1 and np.issubdtype(img.dtype, np.floating):
        if img.min() >= 0.0 and img.max() <= 1.0:
            return Tensor(img.astype(np.float32))
    if isinstance(img, Tensor):
        return preprocess_sketch(img.values, size)
    pil = _decode(img)
    rgb = pil.convert("RGB")
    if rgb.size != (size, size):
        rgb = rgb.resize((size, size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32)
    gray = np.asarray(rgb.convert("L"), dtype=np.float32)
    background = (arr >= WHITE_THRESHOLD).all(axis=-1)
    out = np.where(background, 0.0, (255.0 - gray) / 255.0).astype(np.float32)
    return Tensor(out[None])


def preprocess_image(img, size: int = 224, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> Tensor:
    """Bilinear resize to size x size, scale to [0,1], per-channel normalize."""
    pil = _decode(img).convert("RGB")
    if pil.size != (size, size):
        pil = pil.resize((size, size), Image.BILINEAR)
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def _to_tokens(x: Tensor) -> Tensor:
    """(B?, d, Hg, Wg) feature map -> (B?, n, d) tokens, row-major spatial order."""
    if x.ndim == 3:
        d, hg, wg = x.shape
        return x.reshape(d, hg * wg).transpose(1, 0)
    b, d, hg, wg = x.shape
    return x.reshape(b, d, hg * wg).transpose(0, 2, 1)


def embed_sketch_multilevel(x: Tensor, p: TokenizerParams) -> Tensor:
    """Run the 4-layer conv stack; n = (H/16)*(W/16) tokens of width d."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 16 or w % 16:
        raise ConfigError(f"sketch input {h}x{w} not divisible by 16")
    out = x
    for cw, cb in p.sketch_convs:
        k = cw.shape[-1]
        out = T.relu(T.conv2d(out, cw, cb, stride=SKETCH_STRIDE, pad=k // 2))
    return _to_tokens(out)


def embed_image(x: Tensor, p: TokenizerParams) -> Tensor:
    """Single patch-conv tokenization for the image branch."""
    pw, pb = p.image_patch
    patch = pw.shape[-1]
    h, w = x.shape[-2], x.shape[-1]
    if h % patch or w % patch:
        raise ConfigError(f"image input {h}x{w} not divisible by patch {patch}")
    return _to_tokens(T.conv2d(x, pw, pb, stride=patch, pad=0))


def prepend_rt(e: Tensor, p: TokenizerParams, modality: str) -> TokenEmbedding:
    """Attach [RT] at row 0 and add the modality's positional table."""
    pos = p.pos_sketch if modality == "sketch" else p.pos_image
    d = e.shape[-1]
    if d != p.rt_seed.shape[0]:
        raise DimensionError(f"token width {d} != rt width {p.rt_seed.shape[0]}")
    n = e.shape[-2]
    if n + 1 != pos.shape[0]:
        raise DimensionError(f"{n} tokens but positional table has {pos.shape[0]} rows")
    if e.ndim == 2:
        rt = p.rt_seed.reshape(1, d)
        tokens = T.concat([rt, e], axis=0) + pos
    else:
        b = e.shape[0]
        ones = Tensor(np.ones((b, 1, 1), dtype=e.dtype))
        rt = p.rt_seed.reshape(1, 1, d) * ones
        tokens = T.concat([rt, e], axis=1) + pos
    return TokenEmbedding(tokens=tokens, modality=modality)
