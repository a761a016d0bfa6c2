"""Full retrieval model: tokenizer + encoder(s) + cross-attention.

Also owns the checkpoint format: a small binary container holding a JSON
architecture manifest followed by every parameter as raw little-endian
float32, in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import crossattn, encoder, tokenizer
from .crossattn import CrossAttnParams
from .encoder import EncoderParams
from .errors import ConfigError, FormatError
from .tensor import Tensor
from .tokenizer import TokenEmbedding, TokenizerParams

CHECKPOINT_MAGIC = b"SKRT"
CHECKPOINT_VERSION = 1
SKETCH_DOWNSCALE = 16  # four stride-2 conv layers


def default_filter_layers(blocks: int) -> list[int]:
    if blocks == 0:
        return []
    return sorted({math.ceil(blocks / 3), math.ceil(2 * blocks / 3)})


@dataclass
class ModelConfig:
    input_size: int = 224
    d: int = 768
    blocks: int = 12
    heads: int = 12
    cross_heads: int = 12
    patch: int = 16
    filter_layers: list[int] = field(default_factory=lambda: default_filter_layers(12))
    keep_ratio: float = 0.7
    full_dim_scale: bool = False
    tied_encoder: bool = True
    norm_mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    norm_std: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])

    def __post_init__(self):
        if self.input_size % SKETCH_DOWNSCALE:
            raise ConfigError(f"input_size {self.input_size} not divisible by {SKETCH_DOWNSCALE}")
        if self.patch != SKETCH_DOWNSCALE:
            raise ConfigError(
                f"patch must equal the sketch downscale factor {SKETCH_DOWNSCALE} "
                f"so both branches emit the same token grid, got {self.patch}"
            )
        if self.d % self.heads or self.d % self.cross_heads:
            raise ConfigError(f"d={self.d} not divisible by heads {self.heads}/{self.cross_heads}")

    @property
    def n_tokens(self) -> int:
        return (self.input_size // SKETCH_DOWNSCALE) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class RetrievalModel:
    """Bundles all learnable state and the two modality forward paths."""

    def __init__(
        self,
        cfg: ModelConfig,
        tok: TokenizerParams,
        enc_sketch: EncoderParams,
        enc_image: EncoderParams,
        cross: CrossAttnParams,
    ):
        self.cfg = cfg
        self.tok = tok
        self.enc_sketch = enc_sketch
        self.enc_image = enc_image
        self.cross = cross

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "RetrievalModel":
        rng = np.random.default_rng(seed)
        tok = tokenizer.init_tokenizer_params(cfg.d, cfg.n_tokens, cfg.patch, rng, dtype)

        def make_encoder():
            return encoder.init_encoder_params(
                cfg.d,
                cfg.blocks,
                cfg.heads,
                rng,
                filter_layers=frozenset(cfg.filter_layers),
                keep_ratio=cfg.keep_ratio,
                full_dim_scale=cfg.full_dim_scale,
                dtype=dtype,
            )

        enc_s = make_encoder()
        enc_r = enc_s if cfg.tied_encoder else make_encoder()
        cross = crossattn.init_cross_params(cfg.d, cfg.cross_heads, rng, dtype)
        cross.full_dim_scale = cfg.full_dim_scale
        return cls(cfg, tok, enc_s, enc_r, cross)

    # ----- parameters -----------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = self.tok.named("tok")
        out.update(self.enc_sketch.named("enc"))
        if self.enc_image is not self.enc_sketch:
            out.update(self.enc_image.named("enc_img"))
        out.update(self.cross.named("cross"))
        return out

    # ----- forward paths ---------------------------------------------------

    def encode_sketch(self, x: Tensor) -> TokenEmbedding:
        """x: preprocessed sketch (1,H,W) or batch (B,1,H,W)."""
        tokens = tokenizer.embed_sketch_multilevel(x, self.tok)
        e = tokenizer.prepend_rt(tokens, self.tok, "sketch")
        return encoder.encode(e, self.enc_sketch)

    def encode_image(self, x: Tensor) -> TokenEmbedding:
        tokens = tokenizer.embed_image(x, self.tok)
        e = tokenizer.prepend_rt(tokens, self.tok, "image")
        return encoder.encode(e, self.enc_image)

    def sketch_rt(self, x: Tensor) -> np.ndarray:
        """Inference-only retrieval token for a sketch; (d,) or (B,d)."""
        return crossattn.rt_of(self.encode_sketch(x)).values

    def image_rt(self, x: Tensor) -> np.ndarray:
        return crossattn.rt_of(self.encode_image(x)).values

    # ----- checkpoint I/O ---------------------------------------------------

    def save(self, path) -> None:
        params = self.named_params()
        names = sorted(params)
        manifest = {
            "config": self.cfg.to_dict(),
            "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        }
        header = json.dumps(manifest).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
            fh.write(header)
            for n in names:
                fh.write(params[n].values.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "RetrievalModel":
        blob = Path(path).read_bytes()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
        if len(blob) < 16:
            raise FormatError("truncated checkpoint header", offset=len(blob))
        version, hlen = struct.unpack_from("<IQ", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        try:
            manifest = json.loads(blob[16 : 16 + hlen].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint manifest: {exc}", offset=16) from exc
        cfg = ModelConfig.from_dict(manifest["config"])
        model = cls.init(cfg, seed=0)
        params = model.named_params()
        offset = 16 + hlen
        for entry in manifest["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in params:
                raise FormatError(f"unknown tensor {name!r} in checkpoint", offset=offset)
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 4
            if offset + nbytes > len(blob):
                raise FormatError(f"truncated tensor data for {name!r}", offset=offset)
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
            if params[name].shape != shape:
                raise FormatError(
                    f"shape mismatch for {name!r}: manifest {shape}, model {params[name].shape}",
                    offset=offset,
                )
            params[name].values = arr.astype(np.float32).copy()
            offset += nbytes
        if offset != len(blob):
            raise FormatError(f"{len(blob) - offset} trailing bytes after tensor data", offset=offset)
        return model


def checkpoint_fingerprint(path) -> bytes:
    """32-byte SHA-256 of the checkpoint file, used to pin indexes to models."""
    return hashlib.sha256(Path(path).read_bytes()).digest()
