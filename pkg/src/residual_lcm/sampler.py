"""Inference: one-step consistency sampling and a strided ancestral baseline."""

from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch

from .backbone import SCALE, CondNet, SRDecoder, UNet, denoise_eps
from .imaging import bicubic_resize
from .lcd_stage import _check_compatible, consistency_fn, load_consistency_model
from .rae_stage import load_autoencoder
from .schedule import NoiseSchedule


class CountingDenoiser:
    """Wraps a UNet and counts forward evaluations."""

    def __init__(self, unet: UNet):
        self.unet = unet
        self.calls = 0

    def __call__(self, z_t, cond, t):
        self.calls += 1
        return denoise_eps(z_t, cond, t, self.unet)


class PhaseTimer:
    def __init__(self):
        self.totals: Dict[str, float] = defaultdict(float)

    @contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - start


@dataclass
class SRPipeline:
    """Trained networks needed at inference time."""

    decoder: SRDecoder
    unet: UNet
    condnet: CondNet
    schedule: NoiseSchedule
    denoiser: CountingDenoiser = field(init=False)

    def __post_init__(self):
        self.denoiser = CountingDenoiser(self.unet)
        for m in (self.decoder, self.unet, self.condnet):
            m.eval()

    @property
    def latent_channels(self) -> int:
        return self.unet.spec.latent_channels

    @property
    def factor(self) -> int:
        return self.unet.spec.downsample_factor

    @classmethod
    def from_checkpoints(cls, rae_ckpt: Union[str, Path], lcd_ckpt: Union[str, Path]) -> "SRPipeline":
        ae = load_autoencoder(rae_ckpt)
        unet, condnet, schedule, _ = load_consistency_model(lcd_ckpt)
        _check_compatible(ae.spec, unet.spec, rae_ckpt)
        return cls(ae.decoder, unet, condnet, schedule)


def _prepare(lr: torch.Tensor, pipe: SRPipeline):
    single = lr.ndim == 3
    lr = lr[None] if single else lr
    h, w = lr.shape[-2:]
    f = pipe.factor
    if (h * SCALE) % f or (w * SCALE) % f:
        raise ValueError(f"LR {h}x{w} upsampled x{SCALE} is not divisible by latent factor {f}")
    shape = (lr.shape[0], pipe.latent_channels, h * SCALE // f, w * SCALE // f)
    return single, lr, shape


@torch.no_grad()
def sample_single_step(lr: torch.Tensor, pipe: SRPipeline, seed: int,
                       timer: Optional[PhaseTimer] = None) -> torch.Tensor:
    """Pure noise at ``t = T-1`` mapped to a residual latent in one evaluation."""
    timer = timer or PhaseTimer()
    single, lr, shape = _prepare(lr, pipe)
    gen = torch.Generator().manual_seed(seed)
    with timer.phase("cond"):
        cond = pipe.condnet(bicubic_resize(lr, SCALE))
    z = torch.randn(shape, generator=gen, dtype=lr.dtype)
    with timer.phase("denoise"):
        z0 = consistency_fn(z, cond, pipe.schedule.T - 1, pipe.denoiser, pipe.schedule)
    with timer.phase("decode"):
        sr = pipe.decoder(lr, z0)
    return sr[0] if single else sr


def ancestral_timesteps(T: int, num_steps: int) -> List[int]:
    """Strictly decreasing, uniformly strided subset of ``[0, T-1]`` starting at ``T-1``."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    if num_steps == 1:
        return [T - 1]
    return [(T - 1) * (num_steps - 1 - i) // (num_steps - 1) for i in range(num_steps)]


@torch.no_grad()
def sample_ancestral(lr: torch.Tensor, pipe: SRPipeline, num_steps: int, seed: int,
                     timer: Optional[PhaseTimer] = None) -> torch.Tensor:
    """DDPM ancestral sampling over a strided timestep subset (eps-prediction)."""
    timer = timer or PhaseTimer()
    steps = ancestral_timesteps(pipe.schedule.T, num_steps)
    single, lr, shape = _prepare(lr, pipe)
    gen = torch.Generator().manual_seed(seed)
    abar = pipe.schedule.alpha_bar
    with timer.phase("cond"):
        cond = pipe.condnet(bicubic_resize(lr, SCALE))
    z = torch.randn(shape, generator=gen, dtype=lr.dtype)
    with timer.phase("denoise"):
        for i, t in enumerate(steps):
            eps = pipe.denoiser(z, cond, t)
            ab_t = float(abar[t])
            x0 = (z - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
            if i == len(steps) - 1:
                z = x0
                break
            ab_p = float(abar[steps[i + 1]])
            a_eff = ab_t / ab_p
            b_eff = 1.0 - a_eff
            mean = (np.sqrt(ab_p) * b_eff / (1.0 - ab_t)) * x0 \
                + (np.sqrt(a_eff) * (1.0 - ab_p) / (1.0 - ab_t)) * z
            var = b_eff * (1.0 - ab_p) / (1.0 - ab_t)
            z = mean + np.sqrt(var) * torch.randn(shape, generator=gen, dtype=lr.dtype)
    with timer.phase("decode"):
        sr = pipe.decoder(lr, z)
    return sr[0] if single else sr
