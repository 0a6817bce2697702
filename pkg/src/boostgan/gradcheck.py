"""Central finite differences against autograd, in float64, on toy tensors.

The relative error at one coordinate is ``|a - n| / max(|a|, |n|, floor)``
with ``a`` the autograd value and ``n`` the central difference.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import losses
from .booster import Booster, boost_forward
from .discriminator import Discriminator, DiscriminatorConfig, disc_forward
from .generator import MINIATURE, CoarseGenerator, MultiScaleOutput, coarse_forward
from .identity import LinearExtractor, StandinExtractor, extract

DTYPE = torch.float64
TOLERANCE = 1e-3


def fd_max_rel_error(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                     eps: float = 1e-5, floor: float = 1e-6, max_coords: Optional[int] = None,
                     seed: int = 0) -> float:
    """Worst relative error between autograd and central differences of ``fn``.

    ``tensors`` must be leaves with ``requires_grad``; ``fn`` reads them and
    returns a scalar.  With ``max_coords`` a seeded subset of coordinates is
    probed instead of all of them.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    coords = [(k, i) for k, t in enumerate(tensors) for i in range(t.numel())]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        coords = [coords[j] for j in rng.choice(len(coords), max_coords, replace=False)]
    worst = 0.0
    with torch.no_grad():
        for k, i in coords:
            flat = tensors[k].view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = analytic[k].view(-1)[i].item()
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def toy_generated_set(size: int = 4, batch: int = 2, seed: int = 0):
    """A GeneratedSet of leaf tensors in (0.05, 0.95), plus the list of leaves."""
    g = torch.Generator().manual_seed(seed)

    def leaf(*shape):
        return (0.05 + 0.9 * torch.rand(*shape, generator=g, dtype=DTYPE)).requires_grad_(True)

    coarse = [MultiScaleOutput(leaf(batch, 3, size, size), leaf(batch, 3, size // 2, size // 2),
                               leaf(batch, 3, size // 4, size // 4)) for _ in range(4)]
    boosted = leaf(batch, 3, size, size)
    gen = losses.GeneratedSet(coarse, boosted)
    leaves = [t for c in coarse for t in c.scales()] + [boosted]
    return gen, leaves


def _toy_gt(size=4, batch=2, seed=1):
    g = torch.Generator().manual_seed(seed)
    return 0.05 + 0.9 * torch.rand(batch, 3, size, size, generator=g, dtype=DTYPE)


def toy_discriminator(size: int = 4, seed: int = 0) -> Discriminator:
    torch.manual_seed(seed)
    return Discriminator(DiscriminatorConfig(image_size=size, widths=(4, 4))).to(DTYPE)


def loss_suite(seed: int = 0) -> Dict[str, float]:
    """Max relative error of every generator/discriminator loss on 4x4 toys."""
    gen, leaves = toy_generated_set(seed=seed)
    gt = _toy_gt(seed=seed + 1)
    disc = toy_discriminator(seed=seed)
    ext = LinearExtractor(4, seed=seed).to(DTYPE).freeze()
    real = gt.clone().requires_grad_(True)
    full_leaves = [c.full for c in gen.coarse] + [gen.boosted]
    return {
        "adv_d_loss": fd_max_rel_error(lambda: losses.adv_d_loss(disc, real, gen),
                                       [real] + full_leaves),
        "adv_d_loss[params]": fd_max_rel_error(lambda: losses.adv_d_loss(disc, real, gen),
                                               list(disc.parameters())),
        "adv_g_loss": fd_max_rel_error(lambda: losses.adv_g_loss(disc, gen), full_leaves),
        "identity_loss": fd_max_rel_error(lambda: losses.identity_loss(ext, gen, gt), full_leaves),
        "pixel_multiscale_loss": fd_max_rel_error(lambda: losses.pixel_multiscale_loss(gen, gt), leaves),
        "symmetry_loss": fd_max_rel_error(lambda: losses.symmetry_loss(gen), full_leaves),
        "tv_loss": fd_max_rel_error(lambda: losses.tv_loss(gen), full_leaves),
    }


def network_suite(seed: int = 0, coords: int = 24) -> Dict[str, float]:
    """Sampled-weight checks through miniature networks with the full layer pattern."""
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    out = {}

    gen = CoarseGenerator(MINIATURE).to(DTYPE)
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=DTYPE)
    out["generator(sum of scale means)"] = fd_max_rel_error(
        lambda: sum(t.mean() for t in coarse_forward(gen, x).scales()), list(gen.parameters()), max_coords=coords, seed=seed)

    boost = Booster(image_size=8).to(DTYPE)
    ins = [torch.rand(2, 3, 8, 8, generator=g, dtype=DTYPE) for _ in range(4)]
    out["booster(mean)"] = fd_max_rel_error(
        lambda: boost_forward(boost, ins).mean(), list(boost.parameters()), max_coords=coords, seed=seed)

    disc = Discriminator(DiscriminatorConfig(image_size=8, widths=(4, 6, 8))).to(DTYPE)
    img = torch.rand(3, 8, 8, generator=g, dtype=DTYPE)
    out["discriminator(log p)"] = fd_max_rel_error(
        lambda: torch.log(disc_forward(disc, img)), list(disc.parameters()), max_coords=coords, seed=seed)

    ext = StandinExtractor(widths=(4, 4, 6, 6), fc_dim=5).to(DTYPE).freeze()
    pic = torch.rand(3, 16, 16, generator=g, dtype=DTYPE).requires_grad_(True)
    out["extractor(sum pool wrt pixels)"] = fd_max_rel_error(
        lambda: extract(ext, pic).pool.sum(), [pic], max_coords=coords, seed=seed)
    return out


def run_all(seed: int = 0) -> Dict[str, float]:
    return {**loss_suite(seed), **network_suite(seed)}


def format_table(results: Dict[str, float], tol: float = TOLERANCE) -> str:
    width = max(len(k) for k in results)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  status"]
    for name, err in results.items():
        lines.append(f"{name:<{width}}  {err:12.3e}  {'ok' if err <= tol else 'FAIL'}")
    return "\n".join(lines)
