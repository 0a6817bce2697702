"""Multi-input boosting network.

Fuses the four coarse frontal estimates, concatenated along channels, into
one refined image:

    layer      filters          output
    resblock1  5x5,12 (twice)   H x W x 12
    conv1      5x5,64           H x W x 64
    resblock2  3x3,64 (twice)   H x W x 64
    conv2      3x3,32           H x W x 32
    conv3      3x3,3            H x W x 3
"""

from __future__ import annotations

from typing import List, Sequence

import torch
import torch.nn as nn

LAYOUT = (
    # name, kind, kernel, out_channels
    ("resblock1", "res", 5, 12),
    ("conv1", "conv", 5, 64),
    ("resblock2", "res", 3, 64),
    ("conv2", "conv", 3, 32),
    ("conv3", "out", 3, 3),
)


class ResBlock(nn.Module):
    """x + BN(conv(act(BN(conv(x)))))."""

    def __init__(self, channels, kernel, slope=0.2):
        super().__init__()
        pad = kernel // 2
        self.conv_a = nn.Conv2d(channels, channels, kernel, 1, pad)
        self.bn_a = nn.BatchNorm2d(channels)
        self.act = nn.LeakyReLU(slope)
        self.conv_b = nn.Conv2d(channels, channels, kernel, 1, pad)
        self.bn_b = nn.BatchNorm2d(channels)

    def residual(self, x):
        return self.bn_b(self.conv_b(self.act(self.bn_a(self.conv_a(x)))))

    def forward(self, x):
        return x + self.residual(x)


class Booster(nn.Module):
    def __init__(self, image_size: int = 128, slope: float = 0.2):
        super().__init__()
        self.image_size = image_size
        self.resblock1 = ResBlock(12, 5, slope)
        self.conv1 = nn.Sequential(nn.Conv2d(12, 64, 5, 1, 2), nn.BatchNorm2d(64), nn.LeakyReLU(slope))
        self.resblock2 = ResBlock(64, 3, slope)
        self.conv2 = nn.Sequential(nn.Conv2d(64, 32, 3, 1, 1), nn.BatchNorm2d(32), nn.LeakyReLU(slope))
        self.conv3 = nn.Conv2d(32, 3, 3, 1, 1)

    def stages(self, x) -> List[torch.Tensor]:
        """Every intermediate activation, in layer order; the last is the output."""
        outs = []
        for name, *_ in LAYOUT:
            x = getattr(self, name)(x)
            outs.append(x)
        outs[-1] = torch.sigmoid(outs[-1])
        return outs

    def forward(self, x):
        return self.stages(x)[-1]


def fuse_inputs(coarse: Sequence[torch.Tensor], image_size: int) -> torch.Tensor:
    if len(coarse) != 4:
        raise ValueError(f"booster takes exactly 4 coarse images, got {len(coarse)}")
    shapes = {tuple(c.shape) for c in coarse}
    if len(shapes) != 1:
        raise ValueError(f"coarse inputs differ in shape: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 4 or shape[1:] != (3, image_size, image_size):
        raise ValueError(f"coarse inputs must be (N, 3, {image_size}, {image_size}), got {shape}")
    return torch.cat(list(coarse), dim=1)


def boost_forward(model: Booster, coarse_outputs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Refine four (N, 3, H, W) coarse images, in canonical occlusion order."""
    return model(fuse_inputs(coarse_outputs, model.image_size))


def _count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _conv_weights(module: nn.Module) -> List[nn.Conv2d]:
    return [m for m in module.modules() if isinstance(m, nn.Conv2d)]


def parameter_audit(model: Booster) -> List[dict]:
    """Per-layer filter/output/parameter table, read off the live modules."""
    rows = []
    size = model.image_size
    x = torch.zeros(1, 12, size, size, dtype=next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        shapes = [tuple(o.shape) for o in model.stages(x)]
    model.train(was_training)
    for (name, kind, kernel, cout), shape in zip(LAYOUT, shapes):
        module = getattr(model, name)
        convs = _conv_weights(module)
        ks = {(c.kernel_size, c.out_channels) for c in convs}
        (k, c), = ks
        text = f"{k[0]}x{k[1]},{c}" + (" twice" if len(convs) == 2 else "")
        rows.append({
            "layer": name,
            "filter": text,
            "convs": len(convs),
            "output": [shape[2], shape[3], shape[1]],
            "params": _count(module),
        })
    return rows
