"""Backbone registry: five tiny desk-scale CNNs plus the five full architectures.

Every backbone takes (N, 6, H, W) input (both eyes stacked) and emits 2
logits. Full backbones need torchvision and are intended for GPU runs;
the tiny variants keep the two architecture families' flavor at < 200k
parameters each.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

IN_CHANNELS = 6
NUM_CLASSES = 2


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    min_input_side: int
    parameter_count: int = 0  # informational, filled after construction


class _TinyResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


class TinyResNet(nn.Module):
    """Small residual CNN: stem, residual stages with stride-2 transitions."""

    def __init__(self, widths=(16, 32), blocks_per_stage=1):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(IN_CHANNELS, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(),
        )
        stages = []
        in_w = widths[0]
        for w in widths:
            if w != in_w:
                stages.append(
                    nn.Sequential(
                        nn.Conv2d(in_w, w, 3, stride=2, padding=1, bias=False),
                        nn.BatchNorm2d(w),
                        nn.ReLU(),
                    )
                )
                in_w = w
            stages.extend(_TinyResidualBlock(w) for _ in range(blocks_per_stage))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(in_w, NUM_CLASSES)

    def forward(self, x):
        x = self.stem(x)
        x = self.stages(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.head(x)


class _TinyDenseBlock(nn.Module):
    def __init__(self, in_channels, growth, layers):
        super().__init__()
        self.layers = nn.ModuleList()
        c = in_channels
        for _ in range(layers):
            self.layers.append(
                nn.Sequential(
                    nn.BatchNorm2d(c),
                    nn.ReLU(),
                    nn.Conv2d(c, growth, 3, padding=1, bias=False),
                )
            )
            c += growth
        self.out_channels = c

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return x


class TinyDenseNet(nn.Module):
    """Small densely connected CNN: dense blocks with pooling transitions."""

    def __init__(self, growth=8, block_layers=(2, 2)):
        super().__init__()
        stem_w = 2 * growth
        self.stem = nn.Conv2d(IN_CHANNELS, stem_w, 3, padding=1, bias=False)
        blocks = []
        c = stem_w
        for i, n_layers in enumerate(block_layers):
            block = _TinyDenseBlock(c, growth, n_layers)
            blocks.append(block)
            c = block.out_channels
            if i < len(block_layers) - 1:
                blocks.append(
                    nn.Sequential(
                        nn.BatchNorm2d(c),
                        nn.ReLU(),
                        nn.Conv2d(c, c // 2, 1, bias=False),
                        nn.AvgPool2d(2),
                    )
                )
                c = c // 2
        self.blocks = nn.Sequential(*blocks)
        self.final_bn = nn.BatchNorm2d(c)
        self.head = nn.Linear(c, NUM_CLASSES)

    def forward(self, x):
        x = self.blocks(self.stem(x))
        x = F.relu(self.final_bn(x))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.head(x)


def adapt_first_conv(conv: nn.Conv2d) -> nn.Conv2d:
    """Widen a 3-channel first convolution to 6 channels.

    The original kernel is duplicated across the two eye channel blocks and
    halved, so identical left/right images reproduce the 3-channel
    pre-activations.
    """
    if conv.in_channels != 3:
        raise BackboneError(f"expected a 3-channel conv, got {conv.in_channels}")
    new = nn.Conv2d(
        IN_CHANNELS,
        conv.out_channels,
        kernel_size=conv.kernel_size,
        stride=conv.stride,
        padding=conv.padding,
        bias=conv.bias is not None,
    )
    with torch.no_grad():
        w = conv.weight * 0.5
        new.weight.copy_(torch.cat([w, w], dim=1))
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


def _build_full(name: str, pretrained: bool):
    try:
        import torchvision.models as tvm
    except ImportError as e:
        raise BackboneError(
            f"backbone {name!r} needs torchvision (install the 'full-backbones' extra)"
        ) from e
    weights = "DEFAULT" if pretrained else None
    model = getattr(tvm, name)(weights=weights)
    if name.startswith("resnet"):
        model.conv1 = adapt_first_conv(model.conv1)
        model.fc = nn.Linear(model.fc.in_features, NUM_CLASSES)
    else:  # densenet
        model.features.conv0 = adapt_first_conv(model.features.conv0)
        model.classifier = nn.Linear(model.classifier.in_features, NUM_CLASSES)
    return model


_TINY_BUILDERS = {
    "tiny_a": lambda: TinyResNet(widths=(16, 32), blocks_per_stage=1),
    "tiny_b": lambda: TinyResNet(widths=(8, 16, 32), blocks_per_stage=1),
    "tiny_c": lambda: TinyResNet(widths=(24,), blocks_per_stage=2),
    "tiny_d": lambda: TinyDenseNet(growth=8, block_layers=(2, 2)),
    "tiny_e": lambda: TinyDenseNet(growth=12, block_layers=(3,)),
}
_FULL_NAMES = ("resnet50", "resnet101", "densenet121", "densenet161", "densenet169")

REGISTRY = tuple(_TINY_BUILDERS) + _FULL_NAMES


def min_input_side(name: str) -> int:
    return 32 if name in _TINY_BUILDERS else 64


def build_backbone(name: str, seed: int, pretrained: bool = False) -> nn.Module:
    """Construct a registered backbone with deterministic initialization."""
    if name not in REGISTRY:
        raise BackboneError(f"unknown backbone {name!r}; registered: {', '.join(REGISTRY)}")
    torch.manual_seed(seed)
    if name in _TINY_BUILDERS:
        return _TINY_BUILDERS[name]()
    return _build_full(name, pretrained)


def forward_scores(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Softmax class scores for a (N, 6, H, W) batch; rows sum to 1."""
    if batch.ndim != 4 or batch.shape[1] != IN_CHANNELS:
        raise BackboneError(f"expected (N, {IN_CHANNELS}, H, W) input, got {tuple(batch.shape)}")
    return torch.softmax(model(batch), dim=1)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
