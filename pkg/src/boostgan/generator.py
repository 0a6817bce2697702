"""Coarse multi-occlusion frontal-view generator.

One encoder-decoder with skip connections, shared across the four occluded
inputs.  Besides the full-resolution frontal estimate it emits side outputs
at one half and one quarter resolution from the decoder, which carry the
multi-scale pixel supervision.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from .facedata import OccludedQuadruple


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 128
    widths: Tuple[int, ...] = (64, 64, 128, 256, 512)
    bottleneck: int = 256
    bottleneck_channels: int = 64
    slope: float = 0.2

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ValueError("generator needs exactly 5 encoder widths")
        if self.image_size % 16:
            raise ValueError(f"image_size must be divisible by 16, got {self.image_size}")

    @property
    def deepest(self) -> int:
        return self.image_size // 16

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


MINIATURE = GeneratorConfig(image_size=16, widths=(4, 4, 6, 8, 8), bottleneck=8,
                            bottleneck_channels=4)


@dataclass
class MultiScaleOutput:
    """Frontal estimates at full, half and quarter resolution, each (N, 3, h, w)."""

    full: torch.Tensor
    half: torch.Tensor
    quarter: torch.Tensor

    def scales(self) -> List[torch.Tensor]:
        return [self.full, self.half, self.quarter]

    def detach(self) -> "MultiScaleOutput":
        return MultiScaleOutput(self.full.detach(), self.half.detach(), self.quarter.detach())

    def select(self, idx) -> "MultiScaleOutput":
        return MultiScaleOutput(self.full[idx], self.half[idx], self.quarter[idx])


def conv_block(cin, cout, kernel, stride, slope):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride, kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(slope),
    )


class UpBlock(nn.Module):
    def __init__(self, cin, cskip, cout, slope, upsample=True):
        super().__init__()
        self.upsample = upsample
        if upsample:
            self.up = nn.Sequential(
                nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(slope),
            )
            cin = cout
        self.fuse = conv_block(cin + cskip, cout, 3, 1, slope)

    def forward(self, x, skip):
        if self.upsample:
            x = self.up(x)
        return self.fuse(torch.cat([x, skip], dim=1))


class CoarseGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        w, s = config.widths, config.slope
        self.enc = nn.ModuleList([
            conv_block(3, w[0], 7, 1, s),
            conv_block(w[0], w[1], 5, 2, s),
            conv_block(w[1], w[2], 3, 2, s),
            conv_block(w[2], w[3], 3, 2, s),
            conv_block(w[3], w[4], 3, 2, s),
        ])
        d = config.deepest
        self.to_code = nn.Linear(w[4] * d * d, config.bottleneck)
        self.from_code = nn.Linear(config.bottleneck, config.bottleneck_channels * d * d)
        self.code_act = nn.LeakyReLU(s)
        self.dec = nn.ModuleList([
            UpBlock(config.bottleneck_channels, w[4], w[4], s, upsample=False),
            UpBlock(w[4], w[3], w[3], s),
            UpBlock(w[3], w[2], w[2], s),
            UpBlock(w[2], w[1], w[1], s),
            UpBlock(w[1], w[0], w[0], s),
        ])
        self.head_quarter = nn.Conv2d(w[2], 3, 1)
        self.head_half = nn.Conv2d(w[1], 3, 1)
        self.head_full = nn.Conv2d(w[0], 3, 3, 1, 1)

    def forward(self, x):
        cfg = self.config
        skips = []
        h = x
        for stage in self.enc:
            h = stage(h)
            skips.append(h)
        n = x.shape[0]
        code = self.code_act(self.to_code(h.flatten(1)))
        h = self.code_act(self.from_code(code))
        h = h.view(n, cfg.bottleneck_channels, cfg.deepest, cfg.deepest)
        outs = {}
        for i, block in enumerate(self.dec):
            h = block(h, skips[4 - i])
            if i == 2:
                outs["quarter"] = torch.sigmoid(self.head_quarter(h))
            elif i == 3:
                outs["half"] = torch.sigmoid(self.head_half(h))
        return MultiScaleOutput(torch.sigmoid(self.head_full(h)), outs["half"], outs["quarter"])


def _check_input(model: CoarseGenerator, x: torch.Tensor):
    size = model.config.image_size
    expected = (3, size, size)
    if x.dim() != 4 or tuple(x.shape[1:]) != expected:
        raise ValueError(f"generator input must be (N, {', '.join(map(str, expected))}), "
                         f"got {tuple(x.shape)}")


def coarse_forward(model: CoarseGenerator, occluded: torch.Tensor) -> MultiScaleOutput:
    """Run the generator on (N, 3, H, W) or a single (3, H, W) occluded image."""
    single = occluded.dim() == 3
    x = occluded.unsqueeze(0) if single else occluded
    _check_input(model, x)
    out = model(x)
    return out.select(0) if single else out


def coarse_forward_quadruple(model: CoarseGenerator, quad) -> List[MultiScaleOutput]:
    """Apply the shared generator to every member of a quadruple, in order.

    ``quad`` is an :class:`OccludedQuadruple`, or a tensor shaped (4, N, 3, H, W).
    The four members go through one batched call.
    """
    if isinstance(quad, OccludedQuadruple):
        x = images_to_tensor(quad.images, dtype=_param_dtype(model)).unsqueeze(1)
    else:
        x = quad
    if x.dim() != 5 or x.shape[0] != 4:
        raise ValueError(f"expected 4 stacked members (4, N, 3, H, W), got {tuple(x.shape)}")
    k, n = x.shape[:2]
    out = coarse_forward(model, x.reshape(k * n, *x.shape[2:]))
    return [out.select(slice(i * n, (i + 1) * n)) for i in range(k)]


def _param_dtype(model: nn.Module):
    return next(model.parameters()).dtype


def images_to_tensor(images: Sequence, dtype=torch.float32) -> torch.Tensor:
    """HWC float arrays to an (N, C, H, W) tensor."""
    import numpy as np
    arr = np.stack([np.asarray(im) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


def tensor_to_images(t: torch.Tensor):
    return [im for im in t.detach().permute(0, 2, 3, 1).cpu().float().numpy()]


def _count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def describe(model: CoarseGenerator) -> List[dict]:
    """Architecture table: one row per layer with kernel, stride and (H, W, C) output."""
    cfg = model.config
    size, w = cfg.image_size, cfg.widths
    kernels, strides = (7, 5, 3, 3, 3), (1, 2, 2, 2, 2)
    rows = []
    res = size
    for i, stage in enumerate(model.enc):
        res //= strides[i]
        rows.append({"layer": f"enc{i + 1}", "kernel": kernels[i], "stride": strides[i],
                     "output": [res, res, w[i]], "params": _count(stage)})
    rows.append({"layer": "code", "kernel": None, "stride": None,
                 "output": [cfg.bottleneck], "params": _count(model.to_code)})
    d = cfg.deepest
    rows.append({"layer": "uncode", "kernel": None, "stride": None,
                 "output": [d, d, cfg.bottleneck_channels], "params": _count(model.from_code)})
    res = d
    dec_widths = (w[4], w[3], w[2], w[1], w[0])
    for i, block in enumerate(model.dec):
        if block.upsample:
            res *= 2
        rows.append({"layer": f"dec{i + 1}", "kernel": 3, "stride": 1,
                     "output": [res, res, dec_widths[i]], "params": _count(block)})
        if i == 2:
            rows.append({"layer": "head_quarter", "kernel": 1, "stride": 1,
                         "output": [res, res, 3], "params": _count(model.head_quarter)})
        elif i == 3:
            rows.append({"layer": "head_half", "kernel": 1, "stride": 1,
                         "output": [res, res, 3], "params": _count(model.head_half)})
    rows.append({"layer": "head_full", "kernel": 3, "stride": 1,
                 "output": [res, res, 3], "params": _count(model.head_full)})
    return rows
