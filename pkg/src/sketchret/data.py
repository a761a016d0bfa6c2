"""Dataset handling: directory loader, procedural synthetic generator, splits.

The synthetic generator renders a 12-shape vocabulary twice per class:
filled/colored on a textured background ("image" modality) and jittered
outlines on white ("sketch" modality), so the two modalities share
geometry but differ in statistics, standing in for a real
sketch/photo corpus at desk scale.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np
from PIL import Image, ImageDraw

from .errors import ContractError, LayoutError

if TYPE_CHECKING:
    from .training import FoldSpec

log = logging.getLogger(__name__)

SHAPE_VOCABULARY = (
    "circle",
    "square",
    "triangle",
    "cross",
    "star",
    "ring",
    "parallel-bars",
    "grid",
    "t-junction",
    "s-curve",
    "diamond",
    "spiral",
)

_SUPERSAMPLE = 4


@dataclass
class Item:
    id: str
    modality: str  # "sketch" | "image"
    label: str
    path: Optional[Path] = None
    raster: Optional[Image.Image] = None

    def load_raster(self) -> Image.Image:
        if self.raster is not None:
            return self.raster
        return Image.open(self.path)


@dataclass
class Dataset:
    items: list[Item]
    classes: list[str]

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate item ids in dataset")

    def __len__(self) -> int:
        return len(self.items)

    def sketches(self, label: str | None = None) -> list[Item]:
        return [i for i in self.items if i.modality == "sketch" and (label is None or i.label == label)]

    def images(self, label: str | None = None) -> list[Item]:
        return [i for i in self.items if i.modality == "image" and (label is None or i.label == label)]

    def subset(self, items: list[Item]) -> "Dataset":
        classes = sorted({i.label for i in items})
        return Dataset(items=items, classes=classes)

    def manifest(self) -> list[dict]:
        return [
            {"id": i.id, "path": str(i.path) if i.path else None, "modality": i.modality, "label": i.label}
            for i in self.items
        ]


# ----- directory loader -----------------------------------------------------

_RASTER_EXTS = {".png", ".jpg", ".jpeg"}


def load_dataset(root) -> Dataset:
    """Load root/{sketches,images}/<class>/<file>.png|jpg.

    Classes present in only one modality (or with an empty directory) are
    excluded with a warning. Item order is lexicographic and stable.
    """
    root = Path(root)
    sk_root, im_root = root / "sketches", root / "images"
    if not sk_root.is_dir() or not im_root.is_dir():
        raise LayoutError(f"expected {root}/sketches and {root}/images directories")

    def scan(base: Path) -> dict[str, list[Path]]:
        out: dict[str, list[Path]] = {}
        for cls_dir in sorted(p for p in base.iterdir() if p.is_dir()):
            files = sorted(f for f in cls_dir.iterdir() if f.suffix.lower() in _RASTER_EXTS)
            out[cls_dir.name] = files
        return out

    sk, im = scan(sk_root), scan(im_root)
    classes = []
    for cls in sorted(set(sk) | set(im)):
        if sk.get(cls) and im.get(cls):
            classes.append(cls)
        else:
            log.warning("class %r present in only one modality or empty; excluded", cls)
    items = []
    for cls in classes:
        for f in sk[cls]:
            items.append(Item(id=f"sketch/{cls}/{f.stem}", modality="sketch", label=cls, path=f))
        for f in im[cls]:
            items.append(Item(id=f"image/{cls}/{f.stem}", modality="image", label=cls, path=f))
    return Dataset(items=items, classes=classes)


def save_dataset(ds: Dataset, root) -> None:
    """Write the standard directory layout plus a manifest.json."""
    root = Path(root)
    for item in ds.items:
        sub = "sketches" if item.modality == "sketch" else "images"
        dest = root / sub / item.label
        dest.mkdir(parents=True, exist_ok=True)
        name = item.id.rsplit("/", 1)[-1]
        item.load_raster().save(dest / f"{name}.png")
    (root / "manifest.json").write_text(json.dumps(ds.manifest(), indent=1))


# ----- synthetic generator ---------------------------------------------------


def _shape_strokes(shape: str) -> list[tuple[np.ndarray, bool, int]]:
    """Unit-square geometry for each vocabulary entry.

    Returns a list of (points (m,2) in [-1,1], closed, fill_layer) strokes.
    fill_layer 1 fills with the foreground color, -1 punches a hole
    (background color), 0 is stroke-only (drawn as a thick line in image
    renderings).
    """

    def ngon(k, r=1.0, phase=0.0):
        ang = np.linspace(0, 2 * math.pi, k, endpoint=False) + phase
        return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)

    if shape == "circle":
        return [(ngon(48), True, 1)]
    if shape == "square":
        return [(ngon(4, phase=math.pi / 4) * 1.1, True, 1)]
    if shape == "triangle":
        return [(ngon(3, phase=math.pi / 2), True, 1)]
    if shape == "diamond":
        pts = np.array([[0, 1.1], [0.65, 0], [0, -1.1], [-0.65, 0]], dtype=float)
        return [(pts, True, 1)]
    if shape == "star":
        outer = ngon(5, 1.05, math.pi / 2)
        inner = ngon(5, 0.45, math.pi / 2 + math.pi / 5)
        pts = np.empty((10, 2))
        pts[0::2], pts[1::2] = outer, inner
        return [(pts, True, 1)]
    if shape == "cross":
        a, b = 0.32, 1.0
        pts = np.array(
            [
                [-a, b], [a, b], [a, a], [b, a], [b, -a], [a, -a],
                [a, -b], [-a, -b], [-a, -a], [-b, -a], [-b, a], [-a, a],
            ],
            dtype=float,
        )
        return [(pts, True, 1)]
    if shape == "ring":
        return [(ngon(48), True, 1), (ngon(48, 0.55), True, -1)]
    if shape == "parallel-bars":
        out = []
        for cx in (-0.7, 0.0, 0.7):
            rect = np.array([[cx - 0.18, 1.0], [cx + 0.18, 1.0], [cx + 0.18, -1.0], [cx - 0.18, -1.0]])
            out.append((rect, True, 1))
        return out
    if shape == "grid":
        out = []
        for c in (-0.66, 0.0, 0.66):
            out.append((np.array([[c, 1.0], [c, -1.0]]), False, 0))
            out.append((np.array([[1.0, c], [-1.0, c]]), False, 0))
        return out
    if shape == "t-junction":
        a = 0.3
        pts = np.array(
            [[-1.0, 1.0], [1.0, 1.0], [1.0, 1.0 - 2 * a], [a, 1.0 - 2 * a],
             [a, -1.0], [-a, -1.0], [-a, 1.0 - 2 * a], [-1.0, 1.0 - 2 * a]],
            dtype=float,
        )
        return [(pts, True, 1)]
    if shape == "s-curve":
        t = np.linspace(-1, 1, 40)
        pts = np.stack([np.sin(t * math.pi) * 0.8, t], axis=1)
        return [(pts, False, 0)]
    if shape == "spiral":
        t = np.linspace(0, 3.0 * 2 * math.pi, 120)
        r = 0.05 + 0.95 * t / t[-1]
        pts = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
        return [(pts, False, 0)]
    raise ContractError(f"unknown shape {shape!r}")


def _place(pts: np.ndarray, size: int, rng: np.random.Generator, jitter_pts: float) -> np.ndarray:
    """Rotate, scale, jitter, and map unit coords to supersampled pixels."""
    theta = rng.uniform(-0.35, 0.35)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    scale = size * rng.uniform(0.36, 0.44)
    center = size / 2 + rng.uniform(-0.05, 0.05, size=2) * size
    out = pts @ rot.T
    if jitter_pts > 0:
        out = out + rng.normal(0, jitter_pts, size=out.shape)
    return (out * scale + center) * _SUPERSAMPLE


def _render_image(shape: str, size: int, rng: np.random.Generator) -> Image.Image:
    ss = size * _SUPERSAMPLE
    base = rng.uniform(150, 210, size=3)
    noise = rng.normal(0, 8, size=(size, size, 3))
    lowfreq = rng.normal(0, 10, size=(size // 8 + 1, size // 8 + 1, 3))
    low = np.kron(lowfreq, np.ones((8, 8, 1)))[:size, :size]
    bg = np.clip(base + noise + low, 0, 255).astype(np.uint8)
    canvas = Image.fromarray(bg).resize((ss, ss), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    # dark foreground with a mild per-image tint keeps shape the class signal
    fg = tuple(int(c) for c in rng.uniform(20, 70, size=3))
    strokes = _shape_strokes(shape)
    placed = []
    theta_state = rng.bit_generator.state  # share one placement across strokes
    for pts, closed, layer in strokes:
        rng.bit_generator.state = theta_state
        placed.append((_place(pts, size, rng, jitter_pts=0.0), closed, layer))
    for pts, closed, layer in placed:
        coords = [tuple(p) for p in pts]
        if layer == 1:
            draw.polygon(coords, fill=fg)
        elif layer == -1:
            draw.polygon(coords, fill=tuple(int(c) for c in base))
        else:
            draw.line(coords, fill=fg, width=int(0.06 * size * _SUPERSAMPLE))
    return canvas.resize((size, size), Image.BILINEAR)


def _render_sketch(shape: str, size: int, rng: np.random.Generator) -> Image.Image:
    ss = size * _SUPERSAMPLE
    canvas = Image.new("RGB", (ss, ss), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    width = int(rng.integers(1, 3) * _SUPERSAMPLE * max(1, size // 64))
    jitter = 0.02
    strokes = _shape_strokes(shape)
    theta_state = rng.bit_generator.state
    for pts, closed, _ in strokes:
        rng.bit_generator.state = theta_state
        placed = _place(pts, size, rng, jitter_pts=0.0)
        placed = placed + rng.normal(0, jitter * size * _SUPERSAMPLE, size=placed.shape)
        coords = [tuple(p) for p in placed]
        if closed:
            coords.append(coords[0])
        draw.line(coords, fill=(0, 0, 0), width=width, joint="curve")
    return canvas.resize((size, size), Image.BILINEAR)


def generate_synthetic(
    n_classes: int, sketches_per: int, images_per: int, size: int = 64, seed: int = 0
) -> Dataset:
    """Procedural stand-in dataset; reproducible for a fixed seed."""
    if n_classes > len(SHAPE_VOCABULARY):
        raise ContractError(
            f"n_classes={n_classes} exceeds shape vocabulary size {len(SHAPE_VOCABULARY)}"
        )
    classes = list(SHAPE_VOCABULARY[:n_classes])
    items = []
    for ci, cls in enumerate(classes):
        for j in range(sketches_per):
            rng = np.random.default_rng((seed, 0, ci, j))
            raster = _render_sketch(cls, size, rng)
            items.append(Item(id=f"{cls}_sk_{j:03d}", modality="sketch", label=cls, raster=raster))
        for j in range(images_per):
            rng = np.random.default_rng((seed, 1, ci, j))
            raster = _render_image(cls, size, rng)
            items.append(Item(id=f"{cls}_img_{j:03d}", modality="image", label=cls, raster=raster))
    return Dataset(items=items, classes=classes)


# ----- seen/unseen split ------------------------------------------------------


def split_seen(ds: Dataset, fold: "FoldSpec", seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Partition into (train, test_seen, test_unseen).

    Unseen classes go entirely to test_unseen. Each seen class's images
    are shuffled under the seed and split 50/50 (train takes the extra
    item when odd). All seen-class sketches stay in the train split;
    evaluation reuses them as queries.
    """
    catalog = set(ds.classes)
    missing = (set(fold.seen) | set(fold.unseen)) - catalog
    if missing:
        raise ContractError(f"fold classes not in dataset catalog: {sorted(missing)}")
    rng = np.random.default_rng(seed)
    train, test_seen, test_unseen = [], [], []
    for cls in ds.classes:
        if cls in fold.unseen:
            test_unseen.extend(i for i in ds.items if i.label == cls)
            continue
        if cls not in fold.seen:
            continue
        train.extend(ds.sketches(cls))
        imgs = ds.images(cls)
        order = rng.permutation(len(imgs))
        n_train = (len(imgs) + 1) // 2
        train.extend(imgs[k] for k in sorted(order[:n_train]))
        test_seen.extend(imgs[k] for k in sorted(order[n_train:]))
    return ds.subset(train), ds.subset(test_seen), ds.subset(test_unseen)
