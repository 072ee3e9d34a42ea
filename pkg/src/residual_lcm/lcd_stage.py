"""Stage 2: latent consistency training from scratch.

One iteration: encode ``z0`` with the frozen stage-1 encoder (posterior
mean), draw a single ``eps`` and ``t ~ U{0, ..., T-1-k}``, noise ``z0`` to
both ``t`` and ``t + k`` with that same ``eps``, compare the online
consistency output at ``t + k`` with the EMA target output at ``t`` (L1),
add the CondNet distillation loss, take one optimiser step over
(UNet, CondNet) and finally move the EMA target towards the online weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import CondNet, ModelSpec, UNet, denoise_eps, frozen_copy
from .checkpoint import (CheckpointError, load_checkpoint, restore, save_checkpoint,
                         spec_from_manifest)
from .config import ABLATIONS, Config, parse_text
from .datapipe import ImagePair, stack_pairs
from .rae_stage import TrainResult, TrainingDiverged, _dump_divergence, load_autoencoder, write_loss_csv
from .schedule import NoiseSchedule, Timestep, boundary_coeffs, check_timestep, forward_noise

log = logging.getLogger(__name__)

Denoiser = Union[UNet, Callable[[torch.Tensor, torch.Tensor, Timestep], torch.Tensor]]


@dataclass(frozen=True)
class ConsistencyConfig:
    k: int = 20
    mu: float = 0.95
    lambda_ct: float = 1.0
    lambda_kd: float = 1.0
    ablation_mode: str = "full"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if self.lambda_ct < 0 or self.lambda_kd < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ablation_mode not in ABLATIONS:
            raise ValueError(f"ablation_mode must be one of {ABLATIONS}")

    def check(self, schedule: NoiseSchedule) -> None:
        if self.k > schedule.T - 1:
            raise ValueError(f"k={self.k} exceeds T-1={schedule.T - 1}")

    @classmethod
    def from_config(cls, cfg: Config) -> "ConsistencyConfig":
        return cls(cfg["lcd.k"], cfg["lcd.mu"], cfg["lcd.lambda_ct"], cfg["lcd.lambda_kd"],
                   cfg["lcd.ablation"])


def _predict_eps(denoiser: Denoiser, z_t, cond, t):
    if isinstance(denoiser, UNet):
        return denoise_eps(z_t, cond, t, denoiser)
    return denoiser(z_t, cond, t)


def consistency_fn(z_t: torch.Tensor, cond: torch.Tensor, t: Timestep,
                   denoiser: Denoiser, schedule: NoiseSchedule) -> torch.Tensor:
    """``c_skip(t) z_t + c_out(t) (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)``.

    ``denoiser`` is a :class:`UNet` or any callable ``(z_t, cond, t) -> eps``.
    Entries with ``t == 0`` return ``z_t`` unchanged, whatever ``eps_hat`` is.
    """
    check_timestep(t, schedule.T)
    eps_hat = _predict_eps(denoiser, z_t, cond, t)
    ab = schedule.gather(schedule.alpha_bar, t, z_t)
    x0 = (z_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()
    c_skip, c_out = boundary_coeffs(t, schedule.sigma_data, schedule)
    if isinstance(t, torch.Tensor):
        shape = (-1,) + (1,) * (z_t.ndim - 1) if t.ndim else ()
        c_skip = c_skip.to(z_t.dtype).reshape(shape)
        c_out = c_out.to(z_t.dtype).reshape(shape)
        at_zero = (t == 0).reshape(shape)
    else:
        at_zero = torch.tensor(t == 0)
    return torch.where(at_zero, z_t, c_skip * z_t + c_out * x0)


def noisy_pair(z0, t, k, eps, schedule):
    """``(z_t, z_{t+k})`` built from one shared ``eps``."""
    return forward_noise(z0, t, eps, schedule), forward_noise(z0, t + k, eps, schedule)


def ct_loss(z0: torch.Tensor, cond: torch.Tensor, t: Timestep, eps: torch.Tensor,
            online: Denoiser, target: Denoiser, config: ConsistencyConfig,
            schedule: NoiseSchedule) -> torch.Tensor:
    """Mean L1 between ``f_online(z_{t+k}, t+k)`` and ``f_target(z_t, t)``.

    The target branch runs under ``no_grad``.
    """
    tk = t + config.k
    check_timestep(tk, schedule.T)
    z_t, z_tk = noisy_pair(z0, t, config.k, eps, schedule)
    pred = consistency_fn(z_tk, cond, tk, online, schedule)
    with torch.no_grad():
        ref = consistency_fn(z_t, cond, t, target, schedule)
    return F.l1_loss(pred, ref)


def kd_loss(lr_up: torch.Tensor, z0: torch.Tensor, condnet: Union[CondNet, torch.Tensor]) -> torch.Tensor:
    """Mean L1 between CondNet(lr_up) and ``z0``.

    ``condnet`` may also be precomputed conditional features.
    """
    if isinstance(condnet, torch.Tensor):
        cond = condnet
    elif lr_up.ndim == 3:
        cond = condnet(lr_up[None])[0]
    else:
        cond = condnet(lr_up)
    if cond.shape != z0.shape:
        raise ValueError(f"conditional features {tuple(cond.shape)} vs latent {tuple(z0.shape)}")
    return F.l1_loss(cond, z0)


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, mu: float) -> nn.Module:
    """In place: ``target <- mu * target + (1 - mu) * online``."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    tgt = dict(target.named_parameters())
    src = dict(online.named_parameters())
    if tgt.keys() != src.keys():
        raise ValueError("target and online parameter paths differ")
    for name, p in tgt.items():
        q = src[name]
        if p.shape != q.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(q.shape)}")
        p.mul_(mu).add_(q.detach(), alpha=1.0 - mu)
    return target


class TrainRNG:
    """All stage-2 randomness behind one seeded generator."""

    def __init__(self, seed: int):
        self.generator = torch.Generator().manual_seed(seed)

    def permutation(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self.generator)

    def normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.randn(shape, generator=self.generator, dtype=dtype)

    def timesteps(self, n: int, T: int, k: int) -> torch.Tensor:
        return sample_timesteps(n, T, k, self.generator)


def sample_timesteps(n: int, T: int, k: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Uniform integers on ``[0, T-1-k]`` so that ``t + k`` stays a valid index."""
    if not 1 <= k <= T - 1:
        raise ValueError(f"k must be in [1, {T - 1}]")
    return torch.randint(0, T - k, (n,), generator=generator)


def lcd_losses(hr, lr_up, encoder, unet: UNet, target: UNet, condnet: CondNet,
               config: ConsistencyConfig, schedule: NoiseSchedule, rng: TrainRNG,
               trace: Optional[dict] = None) -> Dict[str, torch.Tensor]:
    """Losses for one stage-2 batch.  ``trace`` (if given) receives the
    intermediate tensors for inspection."""
    with torch.no_grad():
        z0, _ = encoder(hr, lr_up)
    n = z0.shape[0]
    eps = rng.normal(z0.shape, z0.dtype)
    t = rng.timesteps(n, schedule.T, config.k)
    cond = condnet(lr_up)
    losses: Dict[str, torch.Tensor] = {}
    if config.ablation_mode == "no_consistency":
        z_t = forward_noise(z0, t, eps, schedule)
        pred = consistency_fn(z_t, cond, t, unet, schedule)
        losses["z0_l1"] = F.l1_loss(pred, z0)
        main = losses["z0_l1"]
    else:
        losses["ct"] = ct_loss(z0, cond, t, eps, unet, target, config, schedule)
        main = losses["ct"]
    total = config.lambda_ct * main
    if config.ablation_mode != "no_kd":
        losses["kd"] = kd_loss(lr_up, z0, cond)
        total = total + config.lambda_kd * losses["kd"]
    losses["total"] = total
    if trace is not None:
        trace.update(z0=z0, eps=eps, t=t, cond=cond)
    return losses


def lcd_csv_columns(mode: str) -> tuple:
    main = "z0_l1" if mode == "no_consistency" else "ct"
    return ("step", "epoch", main, "total") if mode == "no_kd" else ("step", "epoch", main, "kd", "total")


def _check_compatible(rae_spec: ModelSpec, spec: ModelSpec, path) -> None:
    for field in ("image_channels", "latent_channels", "downsample_factor"):
        if getattr(rae_spec, field) != getattr(spec, field):
            raise CheckpointError(
                f"stage-1 checkpoint {path} has {field}={getattr(rae_spec, field)}, "
                f"config expects {getattr(spec, field)}"
            )


def train_lcd(
    dataset: Sequence[ImagePair],
    rae_checkpoint: Union[str, Path],
    config: Config,
    out_dir: Union[str, Path],
    resume: Optional[Union[str, Path]] = None,
    stop_after_epoch: Optional[int] = None,
) -> TrainResult:
    """Run stage-2 training; writes ``lcd_epoch{N}.ckpt`` and ``lcd_losses.csv``."""
    if len(dataset) == 0:
        raise ValueError("stage-2 training needs a non-empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = config.model_spec
    schedule = config.schedule
    ccfg = ConsistencyConfig.from_config(config)
    ccfg.check(schedule)
    seed = config["run.seed"]

    rae_payload = load_checkpoint(rae_checkpoint, kind="rae")
    _check_compatible(spec_from_manifest(rae_payload), spec, rae_checkpoint)
    encoder = load_autoencoder(rae_checkpoint).encoder
    for p in encoder.parameters():
        p.requires_grad_(False)

    torch.manual_seed(seed)
    unet = UNet(spec, schedule)
    condnet = CondNet(spec)
    target = frozen_copy(unet)
    opt = torch.optim.Adam(list(unet.parameters()) + list(condnet.parameters()),
                           lr=config["lcd.lr"], betas=(0.9, 0.999))
    rng = TrainRNG(seed)
    epoch0, step, history = 0, 0, []
    if resume is not None:
        payload = load_checkpoint(resume, kind="lcd")
        restore(unet, payload, "unet")
        restore(target, payload, "target")
        restore(condnet, payload, "condnet")
        st = payload["state"]
        opt.load_state_dict(st["opt"])
        rng.generator.set_state(st["rng"])
        epoch0, step, history = st["epoch"], st["global_step"], list(st["history"])

    hr_all, _, lru_all = stack_pairs(dataset)
    n = hr_all.shape[0]
    bs = config["lcd.batch_size"]
    columns = lcd_csv_columns(ccfg.ablation_mode)
    checkpoints: List[Path] = []
    last_epoch = config["lcd.epochs"] if stop_after_epoch is None else min(stop_after_epoch, config["lcd.epochs"])
    for epoch in range(epoch0, last_epoch):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            losses = lcd_losses(hr_all[idx], lru_all[idx], encoder, unet, target, condnet,
                                ccfg, schedule, rng)
            if not torch.isfinite(losses["total"]):
                diag = _dump_divergence(out, {"stage": "lcd", "epoch": epoch, "step": step,
                                              "losses": {k: float(v.detach()) for k, v in losses.items()}})
                raise TrainingDiverged(f"non-finite stage-2 loss at step {step}; state in {diag}")
            opt.zero_grad(set_to_none=True)
            losses["total"].backward()
            opt.step()
            ema_update(target, unet, ccfg.mu)
            history.append({"step": step, "epoch": epoch,
                            **{k: float(v.detach()) for k, v in losses.items()}})
            step += 1

        done = epoch + 1
        if done % config["lcd.ckpt_every"] == 0 or done == config["lcd.epochs"]:
            state = {"opt": opt.state_dict(), "rng": rng.generator.get_state(), "epoch": done,
                     "global_step": step, "history": history,
                     "rae_checkpoint": str(rae_checkpoint)}
            path = save_checkpoint(out / f"lcd_epoch{done}.ckpt", "lcd",
                                   {"unet": unet, "target": target, "condnet": condnet},
                                   spec, seed, config.to_text(), state)
            checkpoints.append(path)
            write_loss_csv(out / "lcd_losses.csv", history, columns)

    write_loss_csv(out / "lcd_losses.csv", history, columns)
    return TrainResult(checkpoints, history,
                       {"unet": unet, "target": target, "condnet": condnet, "encoder": encoder})


def load_consistency_model(path: Union[str, Path]):
    """``(unet, condnet, schedule, payload)`` from an ``lcd`` checkpoint, in eval mode."""
    payload = load_checkpoint(path, kind="lcd")
    spec = spec_from_manifest(payload)
    schedule = Config(parse_text(payload["config"])).schedule
    unet = restore(UNet(spec, schedule), payload, "unet").eval()
    condnet = restore(CondNet(spec), payload, "condnet").eval()
    return unet, condnet, schedule, payload
