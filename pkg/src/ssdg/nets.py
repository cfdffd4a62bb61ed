"""AlexNet-style feature extractor and the task heads that sit on top of it."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ConfigError

HEAD_KINDS = ("rotation", "cluster", "dg", "decoder")


@dataclass(frozen=True)
class BackboneConfig:
    """``alexnet`` is the full-size encoder; ``small`` is a desk-scale stand-in.

    ``first_block_filters`` sets the width of the first two conv blocks.
    """

    variant: str = "alexnet"
    first_block_filters: int = 64
    input_size: int = 224
    batch_norm: bool = True
    in_channels: int = 3

    def __post_init__(self):
        if self.variant not in ("alexnet", "small"):
            raise ConfigError("variant", f"unknown backbone variant {self.variant!r}")
        if self.first_block_filters < 1:
            raise ConfigError("first_block_filters", "must be positive")
        if self.input_size < 1:
            raise ConfigError("input_size", "must be positive")

    def layer_specs(self) -> list[tuple]:
        f = self.first_block_filters
        if self.variant == "alexnet":
            return [
                ("conv1", "conv", f, 11, 4, 2), ("pool1", "pool", 3, 2),
                ("conv2", "conv", f, 5, 1, 2), ("pool2", "pool", 3, 2),
                ("conv3", "conv", 384, 3, 1, 1),
                ("conv4", "conv", 256, 3, 1, 1),
                ("conv5", "conv", 256, 3, 1, 1), ("pool5", "pool", 3, 2),
            ]
        return [
            ("conv1", "conv", f, 3, 1, 1), ("pool1", "pool", 2, 2),
            ("conv2", "conv", f, 3, 1, 1), ("pool2", "pool", 2, 2),
            ("conv3", "conv", 2 * f, 3, 1, 1), ("pool3", "pool", 2, 2),
            ("conv4", "conv", 64, 3, 1, 1), ("pool4", "pool", 2, 2),
        ]

    def geometry(self) -> list[dict]:
        """Per-layer shapes, used to size the representation and mirror the decoder."""
        size, ch = self.input_size, self.in_channels
        layers = []
        for layer_def in self.layer_specs():
            name, kind = layer_def[:2]
            if kind == "conv":
                out_ch, k, s, p = layer_def[2:]
            else:
                out_ch, (k, s), p = ch, layer_def[2:], 0
            out = (size + 2 * p - k) // s + 1
            if out < 1:
                raise ConfigError("input_size",
                                  f"{self.input_size} px is too small for the {self.variant} backbone ({name})")
            layers.append(dict(name=name, kind=kind, in_ch=ch, out_ch=out_ch, k=k, s=s, p=p,
                               in_size=size, out_size=out))
            size, ch = out, out_ch
        return layers

    @property
    def rep_shape(self) -> tuple[int, int, int]:
        last = self.geometry()[-1]
        return last["out_ch"], last["out_size"], last["out_size"]

    @property
    def rep_dim(self) -> int:
        c, h, w = self.rep_shape
        return c * h * w

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Kaiming-uniform weights and zero biases for every conv/linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_running_stats()
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


class FeatureExtractor(nn.Module):
    """Conv stack whose flattened last block is the representation."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.geometry = config.geometry()
        layers = OrderedDict()
        for g in self.geometry:
            if g["kind"] == "conv":
                block = [nn.Conv2d(g["in_ch"], g["out_ch"], g["k"], g["s"], g["p"],
                                   bias=not config.batch_norm)]
                if config.batch_norm:
                    block.append(nn.BatchNorm2d(g["out_ch"]))
                block.append(nn.ReLU(inplace=True))
                layers[g["name"]] = nn.Sequential(*block)
            else:
                layers[g["name"]] = nn.MaxPool2d(g["k"], g["s"])
        self.features = nn.Sequential(layers)
        self.rep_shape = config.rep_shape
        self.rep_dim = config.rep_dim
        self.last_conv = "features." + [g["name"] for g in self.geometry if g["kind"] == "conv"][-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.features(x), 1)


def build_backbone(config: BackboneConfig, seed: int = 0) -> FeatureExtractor:
    model = FeatureExtractor(config)
    init_weights(model, _generator(seed))
    return model


class TaskHead(nn.Module):
    def __init__(self, kind: str, net: nn.Module, out_dim: int):
        super().__init__()
        self.kind = kind
        self.net = net
        self.out_dim = out_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)

    @property
    def final_layer(self) -> nn.Module:
        return [m for m in self.net.modules() if isinstance(m, (nn.Linear, nn.ConvTranspose2d))][-1]


def _classifier(rep_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Dropout(0.5),
        nn.Linear(rep_dim, hidden),
        nn.ReLU(inplace=True),
        nn.Dropout(0.5),
        nn.Linear(hidden, hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, out_dim),
    )


class Unflatten(nn.Module):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, z):
        return z.view(z.shape[0], *self.shape)


def _decoder(backbone: BackboneConfig, out_dim: int) -> nn.Sequential:
    """Mirror of the encoder: transposed convs invert both convs and pools."""
    geometry = backbone.geometry()
    layers = [Unflatten(backbone.rep_shape)]
    for i, g in enumerate(reversed(geometry)):
        last = i == len(geometry) - 1
        out_ch = out_dim if last else g["in_ch"]
        nominal = (g["out_size"] - 1) * g["s"] - 2 * g["p"] + g["k"]
        layers.append(nn.ConvTranspose2d(g["out_ch"], out_ch, g["k"], g["s"], g["p"],
                                         output_padding=g["in_size"] - nominal))
        if last:
            layers.append(nn.Sigmoid())
        else:
            if backbone.batch_norm:
                layers.append(nn.BatchNorm2d(out_ch))
            layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


def build_head(kind: str, rep_dim: int, out_dim: int, hidden: int = 4096,
               backbone: BackboneConfig | None = None, seed: int = 0) -> TaskHead:
    """Build one task head.

    ``rotation`` and ``cluster`` use the AlexNet classifier stack with
    ``hidden`` units, ``dg`` is a single linear layer, and ``decoder`` mirrors
    ``backbone`` down to ``out_dim`` sigmoid channels.
    """
    if kind not in HEAD_KINDS:
        raise ConfigError("kind", f"unknown head kind {kind!r}")
    if rep_dim <= 0 or out_dim <= 0:
        raise ConfigError("out_dim", "rep_dim and out_dim must be positive")
    if kind == "rotation" and out_dim != 4:
        raise ConfigError("out_dim", f"rotation head predicts 4 angles, got out_dim={out_dim}")
    if kind in ("rotation", "cluster"):
        net = _classifier(rep_dim, hidden, out_dim)
    elif kind == "dg":
        net = nn.Sequential(nn.Linear(rep_dim, out_dim))
    else:
        if backbone is None:
            raise ConfigError("backbone", "decoder head needs the backbone config to mirror")
        if backbone.rep_dim != rep_dim:
            raise ConfigError("rep_dim", f"{rep_dim} does not match backbone ({backbone.rep_dim})")
        net = _decoder(backbone, out_dim)
    head = TaskHead(kind, net, out_dim)
    init_weights(head, _generator(seed))
    return head


def reinit_head(head: TaskHead, seed: int) -> TaskHead:
    """Re-initialize in place; a cluster head only resets its final layer."""
    target = head.final_layer if head.kind == "cluster" else head
    init_weights(target, _generator(seed))
    return head


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class Classifier(nn.Module):
    """Extractor followed by a head; the model that DG fine-tuning trains."""

    def __init__(self, extractor: FeatureExtractor, head: TaskHead):
        super().__init__()
        self.extractor = extractor
        self.head = head

    def forward(self, x):
        return self.head(self.extractor(x))
