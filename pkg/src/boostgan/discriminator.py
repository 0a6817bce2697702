"""Unconditional image discriminator: strided convolutions, dense head, sigmoid."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Tuple

import torch
import torch.nn as nn

EPS = 1e-7


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_size: int = 128
    widths: Tuple[int, ...] = (64, 128, 256, 512, 512)
    slope: float = 0.2

    def __post_init__(self):
        if self.image_size % (2 ** len(self.widths)):
            raise ValueError(f"image_size {self.image_size} not divisible by "
                             f"2**{len(self.widths)}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DiscriminatorConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        layers = []
        cin = 3
        for w in config.widths:
            layers += [nn.Conv2d(cin, w, 4, 2, 1), nn.LeakyReLU(config.slope)]
            cin = w
        self.features = nn.Sequential(*layers)
        side = config.image_size // 2 ** len(config.widths)
        self.head = nn.Linear(cin * side * side, 1)

    def logits(self, x):
        return self.head(self.features(x).flatten(1)).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x)).clamp(EPS, 1.0 - EPS)


def disc_forward(model: Discriminator, image: torch.Tensor) -> torch.Tensor:
    """Probability that each image is a real frontal face; (N,) or a scalar for one image."""
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    size = model.config.image_size
    if x.dim() != 4 or tuple(x.shape[1:]) != (3, size, size):
        raise ValueError(f"discriminator input must be (N, 3, {size}, {size}), got {tuple(image.shape)}")
    p = model(x)
    return p[0] if single else p
