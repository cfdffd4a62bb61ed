"""Gabor filter-bank response reconstruction targets.

The pretext target for an RGB image is built as follows: filter every channel
with a bank of oriented Gabor kernels, keep the strongest absolute response
over orientations, subtract the input, convert to grayscale, min-max
normalize and binarize.  Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

DEFAULT_THETAS = (
    0.0,
    math.pi / 8,
    math.pi / 4,
    math.pi / 2,
    -math.pi / 8,
    -math.pi / 4,
    -math.pi / 2,
)

# ITU-R BT.601 luma weights
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

CLAMP_EPS = 1e-7

# min-max range at or below this is treated as a constant map
_FLAT_RANGE = 1e-9


@dataclass(frozen=True)
class GaborBankConfig:
    kernel_size: int = 10
    thetas: tuple = DEFAULT_THETAS
    lambda_: float = 10.0
    sigma: float = 4.0
    gamma: float = 0.5
    psi: float = 0.0
    threshold: float = 0.5
    per_channel: bool = True

    def __post_init__(self):
        object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        if int(self.kernel_size) != self.kernel_size or self.kernel_size < 3:
            raise ConfigError("kernel_size", f"must be an integer >= 3, got {self.kernel_size}")
        if not self.lambda_ > 0:
            raise ConfigError("lambda_", f"must be > 0, got {self.lambda_}")
        if not self.sigma > 0:
            raise ConfigError("sigma", f"must be > 0, got {self.sigma}")
        if not self.gamma > 0:
            raise ConfigError("gamma", f"must be > 0, got {self.gamma}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold", f"must lie in (0, 1), got {self.threshold}")
        if not self.thetas:
            raise ConfigError("thetas", "at least one orientation is required")
        if len(set(self.thetas)) != len(self.thetas):
            raise ConfigError("thetas", "orientations must be pairwise distinct")
        if not all(math.isfinite(v) for v in (*self.thetas, self.psi)):
            raise ConfigError("thetas", "orientations and psi must be finite")

    @classmethod
    def from_dict(cls, d: dict) -> "GaborBankConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown Gabor config key")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thetas"] = list(self.thetas)
        return d


def gabor_kernel(size: int, theta: float, lambda_: float, sigma: float,
                 gamma: float, psi: float) -> np.ndarray:
    """Real Gabor kernel sampled at offsets ``i - (size - 1) / 2``.

    Rows index y, columns index x.
    """
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    y, x = np.meshgrid(offsets, offsets, indexing="ij")
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    envelope = np.exp(-(xr ** 2 + gamma ** 2 * yr ** 2) / (2.0 * sigma ** 2))
    return envelope * np.cos(2.0 * math.pi * xr / lambda_ + psi)


def build_gabor_bank(config: GaborBankConfig | None = None) -> list[np.ndarray]:
    """One ``kernel_size x kernel_size`` kernel per orientation, in config order."""
    config = config or GaborBankConfig()
    return [
        gabor_kernel(config.kernel_size, theta, config.lambda_, config.sigma,
                     config.gamma, config.psi)
        for theta in config.thetas
    ]


def _bank_tensor(bank: Sequence[np.ndarray]) -> torch.Tensor:
    if len(bank) == 0:
        raise ShapeError("filter bank is empty")
    shapes = {np.shape(k) for k in bank}
    if len(shapes) != 1:
        raise ShapeError(f"all kernels must share one shape, got {sorted(shapes)}")
    kh, kw = next(iter(shapes))
    w = torch.as_tensor(np.stack(bank), dtype=torch.float64)
    return w.reshape(len(bank), 1, kh, kw)


def correlate_reflect(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Cross-correlate ``(N, 1, H, W)`` planes with ``(K, 1, kh, kw)`` kernels.

    Reflect padding (edge sample not repeated) keeps the output the size of the
    input.  An even kernel of size k covers displacements ``-(k//2) .. k-1-k//2``.
    """
    kh, kw = weight.shape[-2:]
    h, w = x.shape[-2:]
    if h < kh or w < kw:
        raise ShapeError(f"image {h}x{w} is smaller than kernel {kh}x{kw}")
    top, left = kh // 2, kw // 2
    pad = (left, kw - 1 - left, top, kh - 1 - top)
    if max(pad[:2]) >= w or max(pad[2:]) >= h:
        raise ShapeError(f"image {h}x{w} too small for reflect padding {pad}")
    return F.conv2d(F.pad(x, pad, mode="reflect"), weight)


def apply_bank(image, bank: Sequence[np.ndarray]) -> np.ndarray:
    """Filter-bank responses of a grayscale ``(H, W)`` or channel-last ``(H, W, C)`` image.

    Returns ``(K, H, W)`` for grayscale input and ``(C, K, H, W)`` otherwise.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ShapeError("image is empty")
    if img.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (H, W, C) image, got shape {img.shape}")
    weight = _bank_tensor(bank)
    planes = img[None] if img.ndim == 2 else np.moveaxis(img, -1, 0)
    x = torch.from_numpy(np.ascontiguousarray(planes)).unsqueeze(1)
    out = correlate_reflect(x, weight).numpy()
    return out[0] if img.ndim == 2 else out


def to_gray(x: torch.Tensor) -> torch.Tensor:
    """BT.601 grayscale of ``(B, 3, H, W)`` -> ``(B, 1, H, W)``."""
    r, g, b = GRAY_WEIGHTS
    return r * x[:, 0:1] + g * x[:, 1:2] + b * x[:, 2:3]


def _minmax(x: torch.Tensor) -> torch.Tensor:
    flat = x.flatten(1)
    lo = flat.min(dim=1).values
    hi = flat.max(dim=1).values
    span = hi - lo
    flat_maps = span <= _FLAT_RANGE
    denom = torch.where(flat_maps, torch.ones_like(span), span)
    out = (flat - lo[:, None]) / denom[:, None]
    out[flat_maps] = 0.0
    return out.view_as(x)


def target_intensity(images: torch.Tensor, config: GaborBankConfig | None = None,
                     bank: Sequence[np.ndarray] | None = None) -> torch.Tensor:
    """Normalized pre-threshold intensity, ``(B, 3, H, W)`` -> ``(B, 1, H, W)`` float64."""
    config = config or GaborBankConfig()
    if images.dim() != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected RGB batch (B, 3, H, W), got {tuple(images.shape)}")
    weight = _bank_tensor(bank if bank is not None else build_gabor_bank(config))
    x = images.to(torch.float64)
    b, c, h, w = x.shape
    if config.per_channel:
        resp = correlate_reflect(x.reshape(b * c, 1, h, w), weight)
        strongest = resp.abs().amax(dim=1).reshape(b, c, h, w)
        gray = to_gray(strongest - x)
    else:
        g = to_gray(x)
        strongest = correlate_reflect(g, weight).abs().amax(dim=1, keepdim=True)
        gray = strongest - g
    return _minmax(gray)


def make_targets(images: torch.Tensor, config: GaborBankConfig | None = None,
                 bank: Sequence[np.ndarray] | None = None) -> torch.Tensor:
    """Batched binary target maps ``(B, 1, H, W)`` with float32 entries in {0, 1}."""
    config = config or GaborBankConfig()
    return (target_intensity(images, config, bank) > config.threshold).to(torch.float32)


def make_target(image, config: GaborBankConfig | None = None) -> np.ndarray:
    """Binary target map of one channel-last RGB image in [0, 1].

    Returns a ``uint8`` array of shape ``(H, W)`` holding only 0 and 1.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) RGB image, got shape {img.shape}")
    x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(img, -1, 0)))[None]
    return make_targets(x, config)[0, 0].numpy().astype(np.uint8)


def reconstruction_loss(pred: torch.Tensor, target) -> torch.Tensor:
    """Mean pixel-wise binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    p = pred.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()
