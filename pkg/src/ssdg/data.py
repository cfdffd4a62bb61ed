"""Domain datasets: PACS/VLCS-style directory trees and a synthetic 4-style corpus."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy.ndimage import gaussian_filter, zoom

from .errors import DataError

SHAPES = ("circle", "triangle", "square", "star", "cross")
STYLES = ("photo", "painting", "cartoon", "sketch")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
TRAIN_FRACTION = 0.8


def stable_seed(*parts) -> int:
    """Order-independent 63-bit seed derived from arbitrary printable parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def make_split(n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/val split with ``ceil(0.8 n)`` training indices."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(TRAIN_FRACTION * n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class DomainDataset:
    """Class-labelled images of one domain, stored as ``(N, 3, H, W)`` float32 in [0, 1]."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    class_names: list
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None
    split_seed: int = 0
    paths: list = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"{self.name}: labels must index the class-name list")
        if self.train_idx is None:
            self.train_idx, self.val_idx = make_split(len(self), stable_seed(self.split_seed, self.name))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx, name: str | None = None) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return DomainDataset(name or self.name, self.images[idx], self.labels[idx],
                             list(self.class_names), split_seed=self.split_seed,
                             paths=[self.paths[i] for i in idx] if self.paths else None)

    def train_view(self) -> "DomainDataset":
        return self.subset(self.train_idx, f"{self.name}[train]")

    def val_view(self) -> "DomainDataset":
        return self.subset(self.val_idx, f"{self.name}[val]")

    def tensors(self, idx=None) -> tuple[torch.Tensor, torch.Tensor]:
        if idx is None:
            return torch.from_numpy(self.images), torch.from_numpy(self.labels)
        idx = np.asarray(idx, dtype=np.int64)
        return torch.from_numpy(self.images[idx]), torch.from_numpy(self.labels[idx])


def pooled_images(datasets, split: str = "all") -> torch.Tensor:
    """Unlabelled pool across domains: ``split`` is ``all``, ``train`` or ``val``."""
    parts = []
    for d in datasets:
        idx = {"all": np.arange(len(d)), "train": d.train_idx, "val": d.val_idx}[split]
        parts.append(d.images[idx])
    return torch.from_numpy(np.concatenate(parts, 0))


# --------------------------------------------------------------------------
# directory trees
# --------------------------------------------------------------------------

def _subdirs(path: Path) -> list[str]:
    return sorted(p.name for p in path.iterdir() if p.is_dir() and not p.name.startswith("."))


def load_image(path, size: int) -> np.ndarray:
    """Decode, bilinear-resize to ``size x size`` and scale to [0, 1]; returns ``(3, H, W)``."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB").resize((size, size), Image.BILINEAR)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.float32).transpose(2, 0, 1) / 255.0


def load_domain_tree(root, size: int = 64, seed: int = 0) -> list[DomainDataset]:
    """Read ``root/<domain>/<class>/<image>`` into one dataset per domain."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data root {root} is not a directory")
    domains = _subdirs(root)
    if not domains:
        raise DataError(f"no domain directories under {root}")
    class_sets = {d: _subdirs(root / d) for d in domains}
    reference = class_sets[domains[0]]
    for d in domains[1:]:
        if class_sets[d] != reference:
            missing = sorted(set(reference) - set(class_sets[d]))
            extra = sorted(set(class_sets[d]) - set(reference))
            raise DataError(f"class sets differ between {domains[0]!r} and {d!r}: "
                            f"missing {missing}, extra {extra}")
    if not reference:
        raise DataError(f"domain {domains[0]!r} has no class directories")
    out = []
    for d in domains:
        images, labels, paths = [], [], []
        for label, cls in enumerate(reference):
            files = sorted(p for p in (root / d / cls).iterdir()
                           if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise DataError(f"class directory {root / d / cls} contains no images")
            for f in files:
                images.append(load_image(f, size))
                labels.append(label)
                paths.append(str(f))
        out.append(DomainDataset(d, np.stack(images), np.array(labels), list(reference),
                                 split_seed=seed, paths=paths))
    return out


def save_domain_tree(datasets, root) -> Path:
    root = Path(root)
    for d in datasets:
        for cls in d.class_names:
            (root / d.name / cls).mkdir(parents=True, exist_ok=True)
        for i, (img, label) in enumerate(zip(d.images, d.labels)):
            arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(arr).save(root / d.name / d.class_names[label] / f"{i:05d}.png")
    return root


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

SUPERSAMPLE = 4


def _shape_points(shape: str, cx: float, cy: float, r: float, angle: float):
    if shape == "circle":
        t = np.linspace(0, 2 * np.pi, 48, endpoint=False)
        pts = np.stack([np.cos(t), np.sin(t)], 1)
    elif shape == "triangle":
        t = -np.pi / 2 + np.arange(3) * 2 * np.pi / 3
        pts = np.stack([np.cos(t), np.sin(t)], 1)
    elif shape == "square":
        t = np.pi / 4 + np.arange(4) * np.pi / 2
        pts = np.stack([np.cos(t), np.sin(t)], 1) * 0.9
    elif shape == "star":
        t = -np.pi / 2 + np.arange(10) * np.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, 1.0, 0.42)
        pts = np.stack([np.cos(t) * rad, np.sin(t) * rad], 1)
    elif shape == "cross":
        a, b = 0.32, 0.95
        pts = np.array([(-a, -b), (a, -b), (a, -a), (b, -a), (b, a), (a, a),
                        (a, b), (-a, b), (-a, a), (-b, a), (-b, -a), (-a, -a)])
    else:
        raise DataError(f"unknown shape class {shape!r}")
    c, s = math.cos(angle), math.sin(angle)
    rot = pts @ np.array([[c, s], [-s, c]])
    return [(cx + r * x, cy + r * y) for x, y in rot]


def _smooth_noise(rng, h, w, cells, channels=1):
    coarse = rng.random((channels, cells, cells))
    field = np.stack([zoom(c, (h / cells, w / cells), order=3, mode="nearest")[:h, :w] for c in coarse])
    return np.clip(field, 0.0, 1.0)


def _mask(size, points, outline_width=None):
    im = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(im)
    if outline_width:
        draw.line(points + [points[0]], fill=255, width=outline_width, joint="curve")
    else:
        draw.polygon(points, fill=255)
    return np.asarray(im, dtype=np.float64) / 255.0


def _line_mask(size, y, x0, x1, width):
    im = Image.new("L", (size, size), 0)
    ImageDraw.Draw(im).line([(x0, y), (x1, y)], fill=255, width=max(1, int(width)))
    return np.asarray(im, dtype=np.float64) / 255.0


def _hsv_jitter(rgb, rng, amount):
    return np.clip(rgb + rng.normal(0, amount, 3), 0.0, 1.0)


def _ellipse_mask(size, cx, cy, rx, ry):
    im = Image.new("L", (size, size), 0)
    ImageDraw.Draw(im).ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    return np.asarray(im, dtype=np.float64) / 255.0


def render_shape(shape: str, style: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one object; returns ``(3, size, size)`` in [0, 1].

    Upright orientation is carried by cues attached to the object itself (top
    lighting, a cast shadow or ground stroke under its base), so it stays
    recoverable for rotation-symmetric shapes without a global horizon.
    """
    if style not in STYLES:
        raise DataError(f"unknown style {style!r}")
    hi = size * SUPERSAMPLE
    r = rng.uniform(0.24, 0.34) * hi
    cx = hi / 2 + rng.uniform(-0.1, 0.1) * hi
    cy = hi / 2 + rng.uniform(-0.12, 0.02) * hi
    angle = math.radians(rng.uniform(-15.0, 15.0))
    pts = _shape_points(shape, cx, cy, r, angle)
    base = max(p[1] for p in pts)
    fill = _mask(hi, pts)
    obj_color = rng.uniform(0.1, 0.95, 3)
    # vertical position relative to the object's own extent: 0 at its top, 1 at its base
    rows = np.arange(hi, dtype=np.float64)[:, None] * np.ones((1, hi))
    rel = np.clip((rows - (cy - r)) / (base - cy + r), 0.0, 1.0)

    if style == "sketch":
        ink = rng.uniform(0.0, 0.25)
        stroke = _mask(hi, pts, outline_width=max(2, SUPERSAMPLE))
        ground = _line_mask(hi, base + 0.12 * r, cx - 0.8 * r, cx + 0.8 * r, max(2, SUPERSAMPLE // 2))
        gray = 1.0 - (1.0 - ink) * np.maximum(stroke, ground)
        img = np.repeat(gray[None], 3, 0)
    elif style == "cartoon":
        bg = rng.uniform(0.75, 1.0, 3)
        shadow = _ellipse_mask(hi, cx, base + 0.1 * r, 0.9 * r, 0.18 * r) * (1 - fill)
        img = bg[:, None, None] * (1 - 0.45 * shadow)
        img = img * (1 - fill) + obj_color[:, None, None] * fill
        img = img * (1 - _mask(hi, pts, outline_width=3 * SUPERSAMPLE))
    else:
        back = rng.uniform(0.3, 0.9, 3)
        tex = _smooth_noise(rng, hi, hi, 8, 3)
        fine = _smooth_noise(rng, hi, hi, max(4, size // 2), 1)
        bg = back[:, None, None] * (0.7 + 0.6 * tex)
        offset = int(round(0.3 * r))
        cast = np.zeros_like(fill)
        cast[offset:] = fill[:-offset]
        cast = gaussian_filter(cast, sigma=0.1 * r) * (1 - fill)
        bg = bg * (1 - 0.6 * cast)
        shade = 1.3 - 0.8 * rel
        if style == "painting":
            obj = _hsv_jitter(obj_color, rng, 0.12)[:, None, None] * (0.6 + 0.8 * tex) * shade
        else:
            obj = obj_color[:, None, None] * shade * (0.75 + 0.5 * fine)
        img = bg * (1 - fill) + obj * fill
        if style == "painting":
            img = np.stack([gaussian_filter(c, sigma=1.2 * SUPERSAMPLE) for c in img])
            img = img + rng.normal(0, 0.06, (3, 1, 1))
    img = img.reshape(3, size, SUPERSAMPLE, size, SUPERSAMPLE).mean((2, 4))
    # quantize to 8 bits so saved PNGs round-trip exactly
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def synth_domains(seed: int = 0, classes=SHAPES, n_per_class: int = 40,
                  size: int = 64, styles=STYLES) -> list[DomainDataset]:
    """Four domains (one per style) of balanced shape classes; fully determined by ``seed``."""
    classes = list(classes)
    for c in classes:
        if c not in SHAPES:
            raise DataError(f"unknown shape class {c!r}; choose from {SHAPES}")
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    out = []
    for style in styles:
        images, labels = [], []
        for label, cls in enumerate(classes):
            for i in range(n_per_class):
                rng = np.random.default_rng([seed, STYLES.index(style), SHAPES.index(cls), i])
                images.append(render_shape(cls, style, size, rng))
                labels.append(label)
        out.append(DomainDataset(style, np.stack(images), np.array(labels), classes, split_seed=seed))
    return out
