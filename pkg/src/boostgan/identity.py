"""Identity feature extractors exposing a pooling tap and a fully-connected tap.

Any extractor used for the identity loss must be frozen: its parameters stay
fixed while the generators train, but features remain differentiable with
respect to the input image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .facedata import DatasetManifest, load_image

log = logging.getLogger(__name__)


@dataclass
class FeatureTaps:
    pool: torch.Tensor
    fc: torch.Tensor


class IdentityExtractor(nn.Module):
    pool_dim: int
    fc_dim: int

    def __init__(self):
        super().__init__()
        self.frozen = False

    def taps(self, x) -> Tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def freeze(self) -> "IdentityExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def train(self, mode: bool = True):
        # a frozen extractor never leaves inference mode
        return super().train(mode and not getattr(self, "frozen", False))

    def descriptor(self) -> dict:
        raise NotImplementedError


class StandinExtractor(IdentityExtractor):
    """Four strided convolutions, global average pool (pool tap), dense layer (fc tap).

    ``input_pool > 1`` average-pools the image first, which keeps the
    gradient with respect to pixels free of pixel-scale texture.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 64), fc_dim: int = 64,
                 slope: float = 0.2, input_pool: int = 1):
        super().__init__()
        self.widths = tuple(widths)
        self.input_pool = input_pool
        layers, cin = [nn.AvgPool2d(input_pool)] if input_pool > 1 else [], 3
        for w in self.widths:
            layers += [nn.Conv2d(cin, w, 3, 2, 1), nn.LeakyReLU(slope)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, fc_dim)
        self.pool_dim = cin
        self.fc_dim = fc_dim

    def taps(self, x):
        pool = self.features(x).mean(dim=(2, 3))
        return pool, self.fc(pool)

    def descriptor(self) -> dict:
        return {"kind": "standin", "widths": list(self.widths), "pool_dim": self.pool_dim,
                "fc_dim": self.fc_dim, "input_pool": self.input_pool}


class LinearExtractor(IdentityExtractor):
    """Linear taps: channel means through one matrix, flattened pixels through another.

    Handy as a differentiable stub where an exact, piecewise-linear loss is wanted.
    """

    def __init__(self, image_size: int, pool_dim: int = 4, fc_dim: int = 6, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.image_size = image_size
        self.pool_w = nn.Parameter(torch.randn(pool_dim, 3, generator=g))
        self.fc_w = nn.Parameter(torch.randn(fc_dim, 3 * image_size * image_size, generator=g)
                                 / image_size)
        self.pool_dim = pool_dim
        self.fc_dim = fc_dim

    def taps(self, x):
        pool = x.mean(dim=(2, 3)) @ self.pool_w.T
        fc = x.flatten(1) @ self.fc_w.T
        return pool, fc

    def descriptor(self) -> dict:
        return {"kind": "linear", "image_size": self.image_size, "pool_dim": self.pool_dim,
                "fc_dim": self.fc_dim}


def build_extractor(descriptor: dict) -> IdentityExtractor:
    kind = descriptor.get("kind")
    if kind == "standin":
        return StandinExtractor(descriptor["widths"], descriptor["fc_dim"],
                                input_pool=descriptor.get("input_pool", 1))
    if kind == "linear":
        return LinearExtractor(descriptor["image_size"], descriptor["pool_dim"], descriptor["fc_dim"])
    raise ValueError(f"unknown extractor kind {kind!r}")


def extract(extractor: IdentityExtractor, image: torch.Tensor) -> FeatureTaps:
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"extractor input must be (N, 3, H, W), got {tuple(image.shape)}")
    pool, fc = extractor.taps(x)
    if single:
        pool, fc = pool[0], fc[0]
    return FeatureTaps(pool, fc)


def _augment(img: np.ndarray, rng: np.random.Generator, shift: int) -> np.ndarray:
    dy, dx = rng.integers(-shift, shift + 1, size=2)
    out = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
    out = out * rng.uniform(0.9, 1.1) + rng.normal(0.0, 0.02, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def train_standin(manifest: DatasetManifest, epochs: int = 20, seed: int = 0,
                  copies: int = 64, lr: float = 2e-3, shift: int = 5,
                  widths: Sequence[int] = (16, 32, 64, 64), fc_dim: int = 64,
                  dtype=torch.float32, return_accuracy: bool = False, input_pool: int = 4):
    """Fit a stand-in extractor as an identity classifier on the frontal images.

    Each epoch visits every distinct frontal image ``copies`` times under random
    shifts, gain and noise.  The classifier head is dropped afterwards and the
    extractor is returned frozen.
    """
    frontal = {}
    for rec in manifest.records:
        frontal.setdefault(rec.frontal_path, rec.identity)
    labels = sorted(set(frontal.values()))
    if len(labels) < 2:
        raise ValueError(f"stand-in training needs at least 2 identities, got {len(labels)}")
    class_of = {ident: k for k, ident in enumerate(labels)}
    paths = sorted(frontal)
    images = [load_image(manifest.resolve(p)) for p in paths]
    targets = [class_of[frontal[p]] for p in paths]

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = StandinExtractor(widths, fc_dim, input_pool=input_pool).to(dtype)
    head = nn.Linear(fc_dim, len(labels)).to(dtype)
    opt = torch.optim.Adam(list(model.parameters()) + list(head.parameters()), lr=lr)
    steps_per_epoch = -(-len(images) * copies // 16)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(epochs * steps_per_epoch, 1))
    for epoch in range(epochs):
        order = rng.permutation(len(images) * copies)
        xs = np.stack([_augment(images[i % len(images)], rng, shift) for i in order])
        ys = torch.tensor([targets[i % len(images)] for i in order])
        x = torch.from_numpy(xs).permute(0, 3, 1, 2).to(dtype)
        for start in range(0, len(order), 16):
            sl = slice(start, start + 16)
            logits = head(model.taps(x[sl])[1])
            loss = F.cross_entropy(logits, ys[sl])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        log.debug("standin epoch %d loss %.4f", epoch, loss.item())

    with torch.no_grad():
        x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).to(dtype)
        pred = head(model.taps(x)[1]).argmax(1)
        acc = float((pred == torch.tensor(targets)).float().mean())
    model.freeze()
    return (model, acc) if return_accuracy else model


def parameter_bytes(module: nn.Module) -> bytes:
    return b"".join(t.detach().cpu().numpy().tobytes() for t in module.state_dict().values())


def load_frozen(descriptor: dict, state: dict, dtype: Optional[torch.dtype] = None) -> IdentityExtractor:
    model = build_extractor(descriptor)
    model.load_state_dict(state)
    if dtype is not None:
        model = model.to(dtype)
    return model.freeze()
