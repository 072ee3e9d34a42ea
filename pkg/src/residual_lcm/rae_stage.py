"""Stage 1: residual autoencoder pretraining.

Generator objective ``w_l1 * L1 + w_adv * hinge_G + w_reg * KL``, with only
the L1 term active for the first ``warmup_epochs`` epochs.  The patch
discriminator is updated in a separate optimiser step (hinge loss) once the
warmup is over.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import PatchDiscriminator, ResidualAutoencoder, ModelSpec
from .checkpoint import load_checkpoint, restore, save_checkpoint, spec_from_manifest
from .config import Config
from .datapipe import ImagePair, stack_pairs

log = logging.getLogger(__name__)

RAE_CSV_COLUMNS = ("step", "epoch", "l1", "adv", "reg", "total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class RaeLossWeights:
    w_l1: float = 1.0
    w_adv: float = 0.5
    w_reg: float = 1.0e-6
    warmup_epochs: int = 50

    def __post_init__(self):
        if min(self.w_l1, self.w_adv, self.w_reg) < 0 or self.warmup_epochs < 0:
            raise ValueError(f"loss weights and warmup must be non-negative: {self}")

    @classmethod
    def from_config(cls, cfg: Config) -> "RaeLossWeights":
        return cls(cfg["rae.w_l1"], cfg["rae.w_adv"], cfg["rae.w_reg"], cfg["rae.warmup_epochs"])


def kl_standard_normal(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)), summed over latent elements, averaged over batch."""
    kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar)
    return kl.flatten(1).sum(1).mean()


def rae_loss(
    hr: torch.Tensor,
    lr: torch.Tensor,
    lr_up: torch.Tensor,
    autoencoder: ResidualAutoencoder,
    discriminator: nn.Module,
    weights: RaeLossWeights,
    epoch: int,
    noise: Optional[torch.Tensor] = None,
    return_sr: bool = False,
):
    """Named generator losses for one batch.

    During warmup the returned dict holds only ``l1`` and ``total`` and the
    discriminator is never evaluated.  ``noise`` is the reparameterisation
    draw; without it the posterior mean is decoded.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if lr_up.shape != hr.shape or hr.shape[-2] != 4 * lr.shape[-2] or hr.shape[-1] != 4 * lr.shape[-1]:
        raise ValueError(f"misaligned batch: HR {tuple(hr.shape)}, LR {tuple(lr.shape)}, "
                         f"LR-up {tuple(lr_up.shape)}")
    mean, logvar = autoencoder.encoder(hr, lr_up)
    z = mean if noise is None else mean + torch.exp(0.5 * logvar) * noise
    sr = autoencoder.decoder(lr, z)
    l1 = F.l1_loss(sr, hr)
    losses: Dict[str, torch.Tensor] = {"l1": l1}
    total = weights.w_l1 * l1
    if epoch >= weights.warmup_epochs:
        losses["adv"] = -discriminator(sr).mean()
        losses["reg"] = kl_standard_normal(mean, logvar)
        total = total + weights.w_adv * losses["adv"] + weights.w_reg * losses["reg"]
    losses["total"] = total
    return (losses, sr) if return_sr else losses


def discriminator_loss(hr: torch.Tensor, sr: torch.Tensor, discriminator: nn.Module) -> torch.Tensor:
    """Hinge loss; ``sr`` is detached so the autoencoder receives no gradient."""
    real = discriminator(hr)
    fake = discriminator(sr.detach())
    return F.relu(1.0 - real).mean() + F.relu(1.0 + fake).mean()


@dataclass
class TrainResult:
    checkpoints: List[Path]
    history: List[dict]
    networks: Dict[str, nn.Module] = field(default_factory=dict)

    def epoch_means(self, key: str) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for row in self.history:
            if row.get(key) is not None:
                by_epoch.setdefault(row["epoch"], []).append(row[key])
        return [sum(v) / len(v) for _, v in sorted(by_epoch.items())]


def write_loss_csv(path: Path, history: Sequence[dict], columns: Sequence[str]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
            writer.writeheader()
            for row in history:
                writer.writerow({c: ("" if row.get(c) is None else row[c]) for c in columns})
    except OSError as exc:
        raise OSError(f"cannot write loss log {path}: {exc}") from exc


def _set_trainable(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _dump_divergence(out_dir: Path, info: dict) -> Path:
    path = out_dir / "diverged.json"
    path.write_text(json.dumps(info, indent=2, default=str))
    return path


def train_rae(
    dataset: Sequence[ImagePair],
    config: Config,
    out_dir: Union[str, Path],
    resume: Optional[Union[str, Path]] = None,
    stop_after_epoch: Optional[int] = None,
) -> TrainResult:
    """Run stage-1 training and write ``rae_epoch{N}.ckpt`` plus ``rae_losses.csv``.

    ``stop_after_epoch`` ends the run early (used to simulate interruption);
    the epoch budget and schedule still come from ``config``.
    """
    if len(dataset) == 0:
        raise ValueError("stage-1 training needs a non-empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = config.model_spec
    weights = RaeLossWeights.from_config(config)
    seed = config["run.seed"]
    hr_all, lr_all, lru_all = stack_pairs(dataset)
    if hr_all.shape[1] != spec.image_channels:
        raise ValueError(f"dataset has {hr_all.shape[1]} channels, model expects {spec.image_channels}")

    torch.manual_seed(seed)
    ae = ResidualAutoencoder(spec)
    disc = PatchDiscriminator(spec)
    opt_g = torch.optim.Adam(ae.parameters(), lr=config["rae.lr"], betas=(0.9, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config["rae.disc_lr"], betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(seed)
    epoch0, step, history = 0, 0, []
    if resume is not None:
        payload = load_checkpoint(resume, kind="rae")
        restore(ae, payload, "autoencoder")
        restore(disc, payload, "discriminator")
        st = payload["state"]
        opt_g.load_state_dict(st["opt_g"])
        opt_d.load_state_dict(st["opt_d"])
        gen.set_state(st["rng"])
        epoch0, step, history = st["epoch"], st["global_step"], list(st["history"])

    n = hr_all.shape[0]
    bs = config["rae.batch_size"]
    checkpoints: List[Path] = []
    last_epoch = config["rae.epochs"] if stop_after_epoch is None else min(stop_after_epoch, config["rae.epochs"])
    for epoch in range(epoch0, last_epoch):
        ae.train()
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            hr, lr, lr_up = hr_all[idx], lr_all[idx], lru_all[idx]
            lat_shape = (len(idx), spec.latent_channels,
                         hr.shape[-2] // spec.downsample_factor, hr.shape[-1] // spec.downsample_factor)
            noise = torch.randn(lat_shape, generator=gen)

            _set_trainable(disc, False)
            losses, sr = rae_loss(hr, lr, lr_up, ae, disc, weights, epoch, noise, return_sr=True)
            if not torch.isfinite(losses["total"]):
                diag = _dump_divergence(out, {"stage": "rae", "epoch": epoch, "step": step,
                                              "losses": {k: float(v.detach()) for k, v in losses.items()}})
                raise TrainingDiverged(f"non-finite stage-1 loss at step {step}; state in {diag}")
            opt_g.zero_grad(set_to_none=True)
            losses["total"].backward()
            opt_g.step()
            _set_trainable(disc, True)

            row = {"step": step, "epoch": epoch, **{k: float(v.detach()) for k, v in losses.items()}}
            if epoch >= weights.warmup_epochs:
                d_loss = discriminator_loss(hr, sr, disc)
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
                row["disc"] = float(d_loss.detach())
            history.append(row)
            step += 1

        done = epoch + 1
        if done % config["rae.ckpt_every"] == 0 or done == config["rae.epochs"]:
            state = {"opt_g": opt_g.state_dict(), "opt_d": opt_d.state_dict(),
                     "rng": gen.get_state(), "epoch": done, "global_step": step,
                     "history": history}
            path = save_checkpoint(out / f"rae_epoch{done}.ckpt", "rae",
                                   {"autoencoder": ae, "discriminator": disc}, spec, seed,
                                   config.to_text(), state)
            checkpoints.append(path)
            write_loss_csv(out / "rae_losses.csv", history, RAE_CSV_COLUMNS)
        log.info("rae epoch %d: l1 %.4f", done,
                 sum(r["l1"] for r in history if r["epoch"] == epoch) / max(1, -(-n // bs)))

    write_loss_csv(out / "rae_losses.csv", history, RAE_CSV_COLUMNS)
    ae.eval()
    return TrainResult(checkpoints, history, {"autoencoder": ae, "discriminator": disc})


def load_autoencoder(path: Union[str, Path]) -> ResidualAutoencoder:
    """Rebuild the stage-1 autoencoder from a ``rae`` checkpoint (eval mode)."""
    payload = load_checkpoint(path, kind="rae")
    ae = ResidualAutoencoder(spec_from_manifest(payload))
    restore(ae, payload, "autoencoder")
    return ae.eval()


__all__ = ["RaeLossWeights", "rae_loss", "discriminator_loss", "kl_standard_normal",
           "train_rae", "load_autoencoder", "TrainResult", "TrainingDiverged", "ModelSpec"]
