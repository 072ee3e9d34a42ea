"""Networks: residual encoder, dual-branch decoder, conditional network,
UNet noise predictor and patch discriminator.

Every network is a plain ``nn.Module``; its ``named_parameters()`` is the
parameter set that training, EMA tracking and checkpointing operate on.
Image tensors are ``(B, C, H, W)`` in [-1, 1]; the functional wrappers below
also accept a single unbatched ``(C, H, W)`` sample.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import bicubic_resize
from .schedule import NoiseSchedule, check_timestep

SCALE = 4
UNET_OUTPUTS = ("eps", "x0", "x0_cond")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture fields shared by all five networks."""

    image_channels: int = 3
    latent_channels: int = 4
    downsample_factor: int = 8
    ae_width: int = 64
    sr_width: int = 64
    num_fru: int = 4
    imdb_per_fru: int = 12
    unet_width: int = 64
    unet_mults: Tuple[int, ...] = (1, 2, 4)
    disc_width: int = 64
    num_timesteps: int = 1000
    unet_output: str = "x0_cond"

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downsample_factor must be a power of 2, got {f}")
        if self.sr_width % 4:
            raise ValueError("sr_width must be divisible by 4 (IMDB distillation ratio)")
        if self.unet_output not in UNET_OUTPUTS:
            raise ValueError(f"unet_output must be one of {UNET_OUTPUTS}")
        if self.image_channels not in (1, 3):
            raise ValueError("image_channels must be 1 or 3")
        for name in ("latent_channels", "ae_width", "sr_width", "num_fru",
                     "imdb_per_fru", "unet_width", "disc_width", "num_timesteps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "unet_mults", tuple(int(m) for m in self.unet_mults))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_mults"] = list(self.unet_mults)
        return d


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def _init_conv(module: nn.Module) -> None:
    # fan-in scaled normal everywhere; residual-branch outputs are re-zeroed by their owners
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            nn.init.normal_(m.weight, 0.0, 1.0 / math.sqrt(fan_in))
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _zero(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int = 0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout) if temb_dim else None
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        _init_conv(self)
        _zero(self.conv2)

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class SelfAttention(nn.Module):
    """Single-head spatial self-attention with a zero-initialised output."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)
        _init_conv(self)
        _zero(self.proj)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


def _level_widths(base: int, levels: int) -> List[int]:
    return [base * min(2**i, 4) for i in range(levels + 1)]


class Encoder(nn.Module):
    """Convolutional encoder reducing spatial size by ``downsample_factor``."""

    def __init__(self, in_channels: int, out_channels: int, base_width: int, downsample_factor: int):
        super().__init__()
        self.in_channels = in_channels
        self.factor = downsample_factor
        levels = int(math.log2(downsample_factor))
        widths = _level_widths(base_width, levels)
        self.conv_in = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        blocks: List[nn.Module] = []
        prev = widths[0]
        for i, w in enumerate(widths):
            blocks.append(ResBlock(prev, w))
            if i < levels:
                blocks.append(Downsample(w))
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.mid = ResBlock(prev, prev)
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, out_channels, 3, padding=1)
        for m in [self.conv_in, self.conv_out] + [b for b in blocks if isinstance(b, Downsample)]:
            _init_conv(m)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"spatial dims {h}x{w} not divisible by {self.factor}")
        h = self.mid(self.blocks(self.conv_in(x)))
        return self.conv_out(F.silu(self.norm_out(h)))


class ResidualEncoder(nn.Module):
    """Maps (HR, bicubic-upsampled LR) to a diagonal Gaussian over the latent."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.net = Encoder(2 * spec.image_channels, 2 * spec.latent_channels,
                           spec.ae_width, spec.downsample_factor)

    def forward(self, hr, lr_up) -> Tuple[torch.Tensor, torch.Tensor]:
        if hr.shape != lr_up.shape:
            raise ValueError(f"HR {tuple(hr.shape)} and LR-up {tuple(lr_up.shape)} differ")
        mean, logvar = self.net(torch.cat([hr, lr_up], dim=1)).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)


class CondNet(Encoder):
    """Conditional network: encoder architecture over the upsampled LR only."""

    def __init__(self, spec: ModelSpec):
        super().__init__(spec.image_channels, spec.latent_channels,
                         spec.ae_width, spec.downsample_factor)


class IMDB(nn.Module):
    """Information multi-distillation block (3 distillation stages, ratio 1/4)."""

    def __init__(self, width: int, slope: float = 0.05):
        super().__init__()
        if width % 4:
            raise ValueError("IMDB width must be divisible by 4")
        self.width = width
        self.distilled = width // 4
        self.remaining = width - self.distilled
        self.c1 = nn.Conv2d(width, width, 3, padding=1)
        self.c2 = nn.Conv2d(self.remaining, width, 3, padding=1)
        self.c3 = nn.Conv2d(self.remaining, width, 3, padding=1)
        self.c4 = nn.Conv2d(self.remaining, self.distilled, 3, padding=1)
        self.fuse = nn.Conv2d(4 * self.distilled, width, 1)
        self.slope = slope
        _init_conv(self)
        _zero(self.fuse)

    def split_parts(self, x) -> List[torch.Tensor]:
        parts = []
        h = x
        for conv in (self.c1, self.c2, self.c3):
            d, h = torch.split(F.leaky_relu(conv(h), self.slope),
                               (self.distilled, self.remaining), dim=1)
            parts.append(d)
        parts.append(self.c4(h))
        return parts

    def forward(self, x):
        if x.shape[1] != self.width:
            raise ValueError(f"IMDB expects {self.width} channels, got {x.shape[1]}")
        return x + self.fuse(torch.cat(self.split_parts(x), dim=1))


class FRU(nn.Module):
    """Feature refinement unit: a chain of IMDBs fused by a 1x1 convolution."""

    def __init__(self, width: int, num_blocks: int):
        super().__init__()
        self.blocks = nn.ModuleList(IMDB(width) for _ in range(num_blocks))
        self.fuse = nn.Conv2d(width * num_blocks, width, 1)
        _init_conv(self.fuse)
        _zero(self.fuse)

    def forward(self, x, side=None):
        if side is not None:
            x = x + side
        outs = []
        h = x
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        return x + self.fuse(torch.cat(outs, dim=1))


class LatentBranch(nn.Module):
    """Upsampling decoder over the latent; returns one feature map per level."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        levels = int(math.log2(spec.downsample_factor))
        widths = _level_widths(spec.ae_width, levels)[::-1]
        self.conv_in = nn.Conv2d(spec.latent_channels, widths[0], 3, padding=1)
        self.mid = ResBlock(widths[0], widths[0])
        self.ups = nn.ModuleList()
        prev = widths[0]
        for w in widths[1:]:
            self.ups.append(nn.Sequential(ResBlock(prev, w), Upsample(w)))
            prev = w
        self.widths = widths
        _init_conv(self.conv_in)
        for up in self.ups:
            _init_conv(up[1])

    def forward(self, z) -> List[torch.Tensor]:
        h = self.mid(self.conv_in(z))
        stages = [h]
        for up in self.ups:
            h = up(h)
            stages.append(h)
        return stages


class SRDecoder(nn.Module):
    """Dual-branch decoder: latent branch side outputs feed an IMDB SR branch.

    FRU ``i`` receives latent stage ``round(i * (S - 1) / (num_fru - 1))``,
    projected to the SR width by a 1x1 convolution and bilinearly resized to
    LR resolution.  The network predicts a correction on top of the bicubic
    upsampling of the LR input.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        c, w = spec.image_channels, spec.sr_width
        self.latent = LatentBranch(spec)
        n_stage = len(self.latent.widths)
        n = spec.num_fru
        self.stage_of_fru = [round(i * (n_stage - 1) / (n - 1)) if n > 1 else n_stage - 1
                             for i in range(n)]
        self.side = nn.ModuleList(
            nn.Conv2d(self.latent.widths[s], w, 1) for s in self.stage_of_fru
        )
        self.head = nn.Conv2d(c, w, 3, padding=1)
        self.frus = nn.ModuleList(FRU(w, spec.imdb_per_fru) for _ in range(n))
        self.body_tail = nn.Conv2d(w, w, 3, padding=1)
        self.to_shuffle = nn.Conv2d(w, c * SCALE * SCALE, 3, padding=1)
        for m in (self.side, self.head, self.body_tail):
            _init_conv(m)
        _zero(self.to_shuffle)

    def forward(self, lr, z):
        f = self.spec.downsample_factor
        lh, lw = lr.shape[-2:]
        if z.shape[-2] * f != lh * SCALE or z.shape[-1] * f != lw * SCALE:
            raise ValueError(
                f"latent {tuple(z.shape[-2:])} inconsistent with LR {lh}x{lw} at factor {f}"
            )
        if z.shape[1] != self.spec.latent_channels or lr.shape[1] != self.spec.image_channels:
            raise ValueError("channel mismatch between inputs and decoder spec")
        stages = self.latent(z)
        x = self.head(lr)
        h = x
        for fru, proj, s in zip(self.frus, self.side, self.stage_of_fru):
            side = proj(stages[s])
            if side.shape[-2:] != h.shape[-2:]:
                side = F.interpolate(side, size=h.shape[-2:], mode="bilinear", align_corners=False)
            h = fru(h, side)
        h = self.body_tail(h) + x
        out = F.pixel_shuffle(self.to_shuffle(h), SCALE)
        return out + bicubic_resize(lr, SCALE)


class ResidualAutoencoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = ResidualEncoder(spec)
        self.decoder = SRDecoder(spec)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class UNet(nn.Module):
    """Noise predictor over the latent; ``cond`` is concatenated at the input.

    ``spec.unet_output`` selects how the raw network output ``h`` becomes the
    returned noise estimate: ``"eps"`` returns ``h``; ``"x0"`` reads ``h`` as a
    clean-latent estimate ``g``; ``"x0_cond"`` uses ``g = cond + h``.  For the
    two clean-latent forms the noise is ``(z_t - sqrt(abar_t) g) / sqrt(1 - abar_t)``,
    which needs the schedule's ``alpha_bar`` table.
    """

    def __init__(self, spec: ModelSpec, schedule: Optional[NoiseSchedule] = None):
        super().__init__()
        self.spec = spec
        if spec.unet_output != "eps":
            if schedule is None or schedule.T != spec.num_timesteps:
                raise ValueError(f"unet_output={spec.unet_output!r} needs a schedule with "
                                 f"T={spec.num_timesteps}")
            self.register_buffer("alpha_bar", torch.tensor(np.asarray(schedule.alpha_bar)),
                                 persistent=False)
        w = spec.unet_width
        temb = 4 * w
        self.num_timesteps = spec.num_timesteps
        self.time_mlp = nn.Sequential(nn.Linear(w, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(2 * spec.latent_channels, w, 3, padding=1)
        widths = [w * m for m in spec.unet_mults]
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = w
        for i, cw in enumerate(widths):
            self.down.append(ResBlock(prev, cw, temb))
            self.downsample.append(Downsample(cw) if i < len(widths) - 1 else nn.Identity())
            prev = cw
        self.mid1 = ResBlock(prev, prev, temb)
        self.mid_attn = SelfAttention(prev)
        self.mid2 = ResBlock(prev, prev, temb)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, cw in reversed(list(enumerate(widths))):
            self.up.append(ResBlock(prev + cw, cw, temb))
            self.upsample.append(Upsample(cw) if i > 0 else nn.Identity())
            prev = cw
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, spec.latent_channels, 3, padding=1)
        _init_conv(self.time_mlp)
        _init_conv(self.conv_in)
        for m in list(self.downsample) + list(self.upsample):
            _init_conv(m)
        _zero(self.conv_out)

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (len(self.spec.unet_mults) - 1)

    def forward(self, z_t, cond, t):
        emb = timestep_embedding(t, self.spec.unet_width).to(z_t.dtype)
        emb = self.time_mlp(emb)
        h = self.conv_in(torch.cat([z_t, cond], dim=1))
        skips = []
        for block, down in zip(self.down, self.downsample):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)
        for block, up in zip(self.up, self.upsample):
            h = up(block(torch.cat([h, skips.pop()], dim=1), emb))
        h = self.conv_out(F.silu(self.norm_out(h)))
        if self.spec.unet_output == "eps":
            return h
        g = cond + h if self.spec.unet_output == "x0_cond" else h
        ab = self.alpha_bar[t].to(z_t.dtype).reshape(-1, 1, 1, 1)
        return (z_t - ab.sqrt() * g) / (1.0 - ab).sqrt()


class PatchDiscriminator(nn.Module):
    """Three stride-2 levels followed by a per-patch logit map."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        w = spec.disc_width
        self.net = nn.Sequential(
            nn.Conv2d(spec.image_channels, w, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, 2, 1),
            nn.GroupNorm(_groups(2 * w), 2 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1),
            nn.GroupNorm(_groups(4 * w), 4 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 1, 3, 1, 1),
        )
        _init_conv(self)

    def forward(self, x):
        return self.net(x)


# functional surface ---------------------------------------------------------

def _batched(*xs):
    single = xs[0].ndim == 3
    return single, [x.unsqueeze(0) if x.ndim == 3 else x for x in xs]


def encode(hr: torch.Tensor, lr_up: torch.Tensor, encoder: ResidualEncoder,
           noise: Union[torch.Tensor, None] = None) -> torch.Tensor:
    """Residual latent of an (HR, LR-up) pair.

    Returns the posterior mean, or ``mean + exp(logvar / 2) * noise`` when a
    standard-normal ``noise`` tensor is given.
    """
    if hr.shape != lr_up.shape:
        raise ValueError(f"HR {tuple(hr.shape)} and LR-up {tuple(lr_up.shape)} differ")
    single, (hr, lr_up) = _batched(hr, lr_up)
    mean, logvar = encoder(hr, lr_up)
    z = mean if noise is None else mean + torch.exp(0.5 * logvar) * noise.reshape(mean.shape)
    return z[0] if single else z


def decode(lr: torch.Tensor, z: torch.Tensor, decoder: SRDecoder) -> torch.Tensor:
    single, (lr, z) = _batched(lr, z)
    out = decoder(lr, z)
    return out[0] if single else out


def imdb_forward(features: torch.Tensor, block: IMDB) -> torch.Tensor:
    single, (features,) = _batched(features)
    out = block(features)
    return out[0] if single else out


def cond_features(lr_up: torch.Tensor, condnet: CondNet) -> torch.Tensor:
    single, (lr_up,) = _batched(lr_up)
    out = condnet(lr_up)
    return out[0] if single else out


def denoise_eps(z_t: torch.Tensor, cond: torch.Tensor, t, unet: UNet) -> torch.Tensor:
    """Predicted noise for ``z_t`` at integer step(s) ``t``."""
    if z_t.shape[-2:] != cond.shape[-2:] or z_t.ndim != cond.ndim:
        raise ValueError(f"z_t {tuple(z_t.shape)} and cond {tuple(cond.shape)} differ spatially")
    check_timestep(t, unet.num_timesteps)
    single, (z_t, cond) = _batched(z_t, cond)
    m = unet.spatial_multiple
    if z_t.shape[-1] % m or z_t.shape[-2] % m:
        raise ValueError(f"latent dims must be divisible by {m}")
    if not isinstance(t, torch.Tensor) or t.ndim == 0:
        t = torch.full((z_t.shape[0],), int(t), dtype=torch.long)
    out = unet(z_t, cond, t.to(z_t.device))
    return out[0] if single else out


# parameter sets -------------------------------------------------------------

def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_manifest(module: nn.Module) -> Dict[str, List[int]]:
    return {name: list(p.shape) for name, p in module.named_parameters()}


def frozen_copy(module: nn.Module) -> nn.Module:
    """Detached shadow copy (same paths and shapes) with gradients disabled."""
    shadow = copy.deepcopy(module)
    for p in shadow.parameters():
        p.requires_grad_(False)
    return shadow


def build_networks(spec: ModelSpec, schedule: Optional[NoiseSchedule] = None) -> Dict[str, nn.Module]:
    return {
        "autoencoder": ResidualAutoencoder(spec),
        "discriminator": PatchDiscriminator(spec),
        "unet": UNet(spec, schedule),
        "condnet": CondNet(spec),
    }


__all__ = [
    "ModelSpec", "ResidualEncoder", "SRDecoder", "ResidualAutoencoder", "CondNet",
    "UNet", "PatchDiscriminator", "IMDB", "FRU", "encode", "decode", "imdb_forward",
    "cond_features", "denoise_eps", "parameter_count", "parameter_manifest",
    "frozen_copy", "build_networks",
]
