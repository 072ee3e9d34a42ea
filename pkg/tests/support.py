"""Shared toy networks and a directional finite-difference checker."""

from __future__ import annotations

from typing import Callable, Iterable, List, Tuple

import torch
from torch import nn

from residual_lcm.backbone import ModelSpec
from residual_lcm.schedule import make_schedule

TOY_T = 50
TOY = ModelSpec(image_channels=3, latent_channels=4, downsample_factor=4, ae_width=8, sr_width=8,
                num_fru=2, imdb_per_fru=1, unet_width=8, unet_mults=(1, 2), disc_width=8,
                num_timesteps=TOY_T)
TOY_SCHEDULE = make_schedule(TOY_T, 0.0015, 0.0155)


@torch.no_grad()
def perturb(module: nn.Module, scale: float = 0.05, seed: int = 0) -> nn.Module:
    """Add small noise to every parameter so zero-initialised layers carry gradient."""
    gen = torch.Generator().manual_seed(seed)
    for p in module.parameters():
        p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def directional_fd(loss_fn: Callable[[], torch.Tensor], params: Iterable[Tuple[str, torch.Tensor]],
                   h: float = 1e-6, seed: int = 0) -> List[Tuple[str, float, float]]:
    """Per tensor: analytic ``<grad, d>`` vs central difference along a random unit ``d``."""
    params = [(n, p) for n, p in params if p.requires_grad]
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    grads = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params}
    gen = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        for name, p in params:
            d = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            d /= d.norm()
            p.add_(h * d)
            up = float(loss_fn())
            p.sub_(2 * h * d)
            down = float(loss_fn())
            p.add_(h * d)
            out.append((name, float((grads[name] * d).sum()), (up - down) / (2 * h)))
    return out


def fd_failures(results, rtol: float = 1e-3, atol: float = 1e-7):
    return [(n, a, f) for n, a, f in results if abs(a - f) > rtol * max(abs(a), abs(f)) + atol]


def toy_config(**dotted):
    """Tiny-profile config shrunk further for unit tests."""
    from residual_lcm.config import tiny_config
    base = dict(model__ae_width=8, model__sr_width=8, model__num_fru=2, model__imdb_per_fru=1,
                model__unet_width=8, model__unet_mults=(1, 2), model__disc_width=8,
                data__patch_size=16, rae__epochs=2, rae__batch_size=2, rae__ckpt_every=1,
                lcd__epochs=2, lcd__batch_size=2, lcd__ckpt_every=1, schedule__T=100)
    base.update(dotted)
    return tiny_config(**base)
