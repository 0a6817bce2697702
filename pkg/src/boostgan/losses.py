"""Training objectives for the coarse generator, booster and discriminator.

Every loss takes a :class:`GeneratedSet` (the four coarse pyramids plus the
boosted image, all batched) and returns a scalar to minimise.  Per-image
terms are averaged over the five generated images and over the batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Mapping, Tuple

import torch
import torch.nn.functional as F

from .discriminator import EPS
from .generator import MultiScaleOutput
from .identity import IdentityExtractor


class TrainingFault(FloatingPointError):
    """A loss component went NaN or infinite."""


@dataclass
class GeneratedSet:
    coarse: List[MultiScaleOutput]
    boosted: torch.Tensor

    def __post_init__(self):
        if len(self.coarse) != 4:
            raise ValueError(f"a generated set holds 4 coarse outputs, got {len(self.coarse)}")
        shape = tuple(self.boosted.shape)
        for c in self.coarse:
            if tuple(c.full.shape) != shape:
                raise ValueError(f"coarse output {tuple(c.full.shape)} does not match "
                                 f"boosted {shape}")

    def full_images(self) -> List[torch.Tensor]:
        """The five full-resolution images: four coarse, then the boosted one."""
        return [c.full for c in self.coarse] + [self.boosted]

    def detach(self) -> "GeneratedSet":
        return GeneratedSet([c.detach() for c in self.coarse], self.boosted.detach())

    @property
    def batch_size(self) -> int:
        return self.boosted.shape[0]


@dataclass(frozen=True)
class LossWeights:
    adv: float = 2e1
    pix: float = 1.0
    sym: float = 3e-1
    ip: float = 4e1
    tv: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


COMPONENTS = ("adv", "pix", "sym", "ip", "tv")


def _log_prob(p):
    return torch.log(p.clamp(EPS, 1.0 - EPS))


def _five(gen: GeneratedSet) -> torch.Tensor:
    # (5 * N, C, H, W), image-major so rows [k*N:(k+1)*N] belong to image k
    return torch.cat(gen.full_images(), dim=0)


def adv_d_loss(disc, real: torch.Tensor, gen: GeneratedSet) -> torch.Tensor:
    """Negated discriminator objective: -(1/N) sum[log D(real) + 1/5 sum log(1 - D(fake))]."""
    n = real.shape[0]
    if n < 1 or gen.batch_size != n:
        raise ValueError(f"real batch {n} and generated batch {gen.batch_size} must match (N >= 1)")
    p_real = disc(real)
    p_fake = disc(_five(gen)).view(5, n)
    fake_term = _log_prob(1.0 - p_fake).sum(0) / 5.0
    return -(_log_prob(p_real) + fake_term).mean()


def adv_g_loss(disc, gen: GeneratedSet) -> torch.Tensor:
    """Non-saturating generator objective: -(1/5N) sum log D(fake) over the five fakes."""
    if gen.batch_size < 1:
        raise ValueError("empty generated batch")
    return -_log_prob(disc(_five(gen))).mean()


def identity_loss(extractor: IdentityExtractor, gen: GeneratedSet, reference: torch.Tensor) -> torch.Tensor:
    """Mean-absolute feature distance on both taps between each generated image and the reference."""
    n = gen.batch_size
    if tuple(reference.shape) != tuple(gen.boosted.shape):
        raise ValueError(f"reference {tuple(reference.shape)} does not match generated "
                         f"{tuple(gen.boosted.shape)}")
    # one batched pass, so identical images give bit-identical features
    pool, fc = extractor.taps(torch.cat([_five(gen), reference.to(gen.boosted.dtype)]))
    if pool.shape[0] != 6 * n or fc.shape[0] != 6 * n:
        raise ValueError("extractor tap batch mismatch")
    pool, fc = pool.reshape(6, n, -1), fc.reshape(6, n, -1)
    pool, ref_pool = pool[:5], pool[5]
    fc, ref_fc = fc[:5], fc[5]
    per = (pool - ref_pool).abs().mean(-1) + (fc - ref_fc).abs().mean(-1)
    return per.mean()


def downsample(img: torch.Tensor, factor: int) -> torch.Tensor:
    return img if factor == 1 else F.avg_pool2d(img, factor)


def pixel_multiscale_loss(gen: GeneratedSet, gt: torch.Tensor) -> torch.Tensor:
    """Coarse outputs: mean L1 over the three scales; boosted: full-scale L1; then averaged."""
    if tuple(gt.shape) != tuple(gen.boosted.shape):
        raise ValueError(f"ground truth {tuple(gt.shape)} does not match generated "
                         f"{tuple(gen.boosted.shape)}")
    pyramid = [gt, downsample(gt, 2), downsample(gt, 4)]
    terms = []
    for c in gen.coarse:
        per_scale = []
        for out, ref in zip(c.scales(), pyramid):
            if out.shape != ref.shape:
                raise ValueError(f"scale mismatch: output {tuple(out.shape)} vs gt {tuple(ref.shape)}")
            per_scale.append((out - ref).abs().mean())
        terms.append(sum(per_scale) / len(per_scale))
    terms.append((gen.boosted - gt).abs().mean())
    return sum(terms) / 5.0


def symmetry_map(img: torch.Tensor) -> torch.Tensor:
    """Per-image left/right asymmetry over the left half, channel-averaged: (N,)."""
    width = img.shape[-1]
    if width % 2:
        raise ValueError(f"symmetry loss needs an even width, got {width}")
    half = width // 2
    left = img[..., :half]
    mirrored = torch.flip(img, dims=[-1])[..., :half]
    return (left - mirrored).abs().mean(dim=(1, 2, 3))


def symmetry_loss(gen: GeneratedSet) -> torch.Tensor:
    return symmetry_map(_five(gen)).mean()


def tv_map(img: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation per image, summed over channels and in-range pairs: (N,)."""
    dw = (img[..., :, 1:] - img[..., :, :-1]).abs().sum(dim=(1, 2, 3))
    dh = (img[..., 1:, :] - img[..., :-1, :]).abs().sum(dim=(1, 2, 3))
    return dw + dh


def tv_loss(gen: GeneratedSet) -> torch.Tensor:
    return tv_map(_five(gen)).mean()


def total_generator_loss(weights: LossWeights, components: Mapping[str, torch.Tensor]
                         ) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Weighted sum of the five components; returns (total, float breakdown incl. 'total')."""
    missing = set(COMPONENTS) - set(components)
    if missing:
        raise ValueError(f"missing loss components: {sorted(missing)}")
    w = weights.as_dict()
    breakdown = {}
    total = 0.0
    for name in COMPONENTS:
        value = components[name]
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise TrainingFault(f"loss component '{name}' is not finite ({v})")
        breakdown[name] = v
        total = total + w[name] * value
    breakdown["total"] = float(total.detach()) if torch.is_tensor(total) else float(total)
    return total, breakdown


def generator_components(disc, extractor, gen: GeneratedSet, gt: torch.Tensor) -> Dict[str, torch.Tensor]:
    return {
        "adv": adv_g_loss(disc, gen),
        "pix": pixel_multiscale_loss(gen, gt),
        "sym": symmetry_loss(gen),
        "ip": identity_loss(extractor, gen, gt),
        "tv": tv_loss(gen),
    }
