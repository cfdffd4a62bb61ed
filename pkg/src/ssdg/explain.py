"""GradCAM heatmaps and red-emphasis overlays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass
class Heatmap:
    values: np.ndarray
    layer: str
    class_idx: int


def find_layer(model: nn.Module, name: str) -> nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        convs = [n for n, m in modules.items() if isinstance(m, nn.Conv2d)]
        raise ConfigError("layer", f"layer {name!r} not found; conv layers: {convs}")
    return modules[name]


def default_layer(model: nn.Module) -> str:
    """Last conv block of a :class:`~ssdg.nets.Classifier`, else the last module holding a conv."""
    extractor = getattr(model, "extractor", None)
    if extractor is not None and hasattr(extractor, "last_conv"):
        return "extractor." + extractor.last_conv
    names = [n for n, m in model.named_modules() if isinstance(m, nn.Conv2d)]
    if not names:
        raise ConfigError("layer", "model has no convolutional layer")
    return names[-1]


def _normalize(cam: torch.Tensor) -> torch.Tensor:
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        return torch.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def gradcam(model: nn.Module, image, class_idx: int, layer: str | None = None) -> Heatmap:
    """Gradient-weighted class activation map of ``class_idx`` at ``layer``.

    ``image`` is ``(C, H, W)``.  Channel weights are the spatial means of the
    logit's gradient; the ReLU of the weighted channel sum is bilinearly
    upsampled to ``(H, W)`` and min-max normalized.
    """
    layer = layer or default_layer(model)
    module = find_layer(model, layer)
    x = torch.as_tensor(image, dtype=torch.float32)
    if x.dim() != 3:
        raise ShapeError(f"expected a single (C, H, W) image, got {tuple(x.shape)}")
    captured = {}

    def hook(_, __, output):
        captured["act"] = output

    handle = module.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(x[None])
            if not 0 <= class_idx < logits.shape[1]:
                raise ConfigError("class_idx", f"{class_idx} outside [0, {logits.shape[1]})")
            act = captured["act"]
            (grad,) = torch.autograd.grad(logits[0, class_idx], act)
    finally:
        handle.remove()
        model.train(was_training)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    cam = _normalize(cam[0, 0].clamp_min(0))
    return Heatmap(cam.numpy().astype(np.float64), layer, int(class_idx))


def colormap(values: np.ndarray) -> np.ndarray:
    """Jet-like blue -> cyan -> yellow -> red map of values in [0, 1]; returns ``(..., 3)``."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_overlay(image, heatmap, alpha: float = 0.5) -> np.ndarray:
    """Blend the heatmap colours over an RGB image; returns ``(H, W, 3)`` uint8.

    ``image`` may be channel-first ``(3, H, W)`` or channel-last, floats in [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if img.shape[:2] != values.shape:
        raise ShapeError(f"heatmap {values.shape} does not match image {img.shape[:2]}")
    blended = (1.0 - alpha) * img + alpha * colormap(values)
    return np.round(np.clip(blended, 0.0, 1.0) * 255.0).astype(np.uint8)
