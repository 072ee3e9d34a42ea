"""Linear variance schedule and consistency-parameterization coefficients.

Timesteps are 0-based: ``t = 0`` is the clean end of the chain and
``t = T - 1`` the noisiest.  All tables are float64 numpy arrays; they are
cast to the working dtype only when gathered into a tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed ``beta`` / ``alpha_bar`` tables for a discrete chain."""

    total_steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma_data: float = 0.5
    time_scale: float = 1.0

    @property
    def T(self) -> int:
        return self.total_steps

    def gather(self, table: np.ndarray, t: Timestep, like: torch.Tensor) -> torch.Tensor:
        """Look up ``table[t]`` and shape it to broadcast against ``like``."""
        if isinstance(t, torch.Tensor):
            idx = t.detach().to("cpu", torch.long).numpy()
            vals = torch.from_numpy(table[idx]).to(like.device, like.dtype)
            if vals.ndim == 1 and like.ndim > 1:
                vals = vals.reshape(-1, *([1] * (like.ndim - 1)))
            return vals
        return torch.tensor(float(table[t]), dtype=like.dtype, device=like.device)


def make_schedule(
    T: int = 1000,
    beta_start: float = 0.0015,
    beta_end: float = 0.0155,
    sigma_data: float = 0.5,
    time_scale: float = 1.0,
) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if sigma_data <= 0 or time_scale <= 0:
        raise ValueError("sigma_data and time_scale must be positive")
    T = int(T)
    steps = np.arange(T, dtype=np.float64)
    beta = beta_start + steps * ((beta_end - beta_start) / (T - 1))
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T, beta, alpha_bar, float(sigma_data), float(time_scale))


def check_timestep(t: Timestep, upper: int) -> None:
    """Raise ``ValueError`` unless every entry of ``t`` lies in ``[0, upper)``."""
    if isinstance(t, torch.Tensor):
        if t.dtype.is_floating_point:
            raise ValueError("timesteps must be integers")
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= upper):
            raise ValueError(f"timestep out of range [0, {upper - 1}]: {t.tolist()}")
    elif int(t) != t or not (0 <= t < upper):
        raise ValueError(f"timestep out of range [0, {upper - 1}]: {t!r}")


def forward_noise(
    z0: torch.Tensor, t: Timestep, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """``sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps``.

    ``t`` is either an int or a length-``B`` integer tensor (one step per
    leading-axis sample).
    """
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    check_timestep(t, schedule.T)
    ab = schedule.gather(schedule.alpha_bar, t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def boundary_coeffs(t: Timestep, sigma_data: float, schedule: NoiseSchedule):
    """Return ``(c_skip(t), c_out(t))`` with ``s = t / time_scale``.

    ``c_skip = sd^2 / (s^2 + sd^2)`` and ``c_out = s / sqrt(s^2 + sd^2)``, so
    the pair is exactly ``(1, 0)`` at ``t = 0``.  Floats for an int ``t``,
    float64 tensors for a tensor ``t``.
    """
    if sigma_data <= 0:
        raise ValueError("sigma_data must be positive")
    check_timestep(t, schedule.T)
    sd2 = sigma_data * sigma_data
    if isinstance(t, torch.Tensor):
        s = t.to(torch.float64) / schedule.time_scale
        return sd2 / (s * s + sd2), s / torch.sqrt(s * s + sd2)
    s = float(t) / schedule.time_scale
    return sd2 / (s * s + sd2), s / math.sqrt(s * s + sd2)
