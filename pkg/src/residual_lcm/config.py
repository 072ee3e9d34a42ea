"""Flat ``section.key = value`` configuration with typed validation.

Resolution order (later wins): built-in defaults, profile overlay, config
file, explicit overrides.  ``Config.to_text()`` writes the fully resolved
table in the same format so a run can be replayed from its echo.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Optional, Tuple, Union

from .backbone import ModelSpec
from .schedule import NoiseSchedule, make_schedule


class ConfigError(ValueError):
    """Unknown key, unparsable value or out-of-range setting."""


DEFAULTS: Dict[str, Any] = {
    "run.profile": "full",
    "run.seed": 0,
    "schedule.T": 1000,
    "schedule.beta_start": 0.0015,
    "schedule.beta_end": 0.0155,
    "schedule.sigma_data": 0.5,
    "model.image_channels": 3,
    "model.latent_channels": 4,
    "model.downsample_factor": 8,
    "model.ae_width": 64,
    "model.sr_width": 64,
    "model.num_fru": 4,
    "model.imdb_per_fru": 12,
    "model.unet_width": 64,
    "model.unet_mults": (1, 2, 4),
    "model.disc_width": 64,
    "model.unet_output": "x0_cond",
    "data.patch_size": 256,
    "data.split": (0.8, 0.1, 0.1),
    "rae.epochs": 200,
    "rae.batch_size": 8,
    "rae.lr": 3.6e-5,
    "rae.w_l1": 1.0,
    "rae.w_adv": 0.5,
    "rae.w_reg": 1.0e-6,
    "rae.warmup_epochs": 50,
    "rae.disc_lr": 3.6e-5,
    "rae.ckpt_every": 10,
    "lcd.epochs": 200,
    "lcd.batch_size": 16,
    "lcd.lr": 8e-5,
    "lcd.k": 20,
    "lcd.mu": 0.95,
    "lcd.lambda_ct": 1.0,
    "lcd.lambda_kd": 1.0,
    "lcd.ablation": "full",
    "lcd.ckpt_every": 10,
    "sample.ancestral_steps": 40,
    "eval.psnr_cap": 100.0,
    "bench.repeats": 5,
    "bench.warmup": 2,
}

# desk scale: 32x32 HR patches, f=4 latents, narrow networks, CPU-sized optimisation
PROFILES: Dict[str, Dict[str, Any]] = {
    "full": {},
    "tiny": {
        "data.patch_size": 32,
        "model.downsample_factor": 4,
        "model.ae_width": 16,
        "model.sr_width": 32,
        "model.imdb_per_fru": 2,
        "model.unet_width": 32,
        "model.disc_width": 16,
        "rae.epochs": 30,
        "rae.batch_size": 4,
        "rae.lr": 1e-3,
        "rae.disc_lr": 1e-3,
        "rae.ckpt_every": 5,
        "lcd.epochs": 50,
        "lcd.batch_size": 4,
        "lcd.lr": 5e-4,
        "lcd.ckpt_every": 10,
    },
}

ABLATIONS = ("full", "no_kd", "no_consistency")

Value = Union[int, float, str, Tuple]


def _parse(key: str, raw: str) -> Value:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown key {key!r}")
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(p) for p in raw.replace(",", " ").split())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def _coerce(key: str, val: Any) -> Value:
    default = DEFAULTS[key]
    if isinstance(val, str) and not isinstance(default, str):
        return _parse(key, val)
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) for v in val)
    if isinstance(default, float) and isinstance(val, int):
        return float(val)
    if type(val) is not type(default):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {val!r}")
    return val


def _format(value: Value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> Dict[str, Value]:
    values: Dict[str, Value] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse(key, raw)
    return values


class Config(Mapping[str, Value]):
    """Immutable resolved configuration."""

    def __init__(self, values: Mapping[str, Value]):
        merged = dict(DEFAULTS)
        for key, val in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = _coerce(key, val)
        self._values = merged
        validate(self)

    def __getitem__(self, key: str) -> Value:
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def replace(self, **dotted: Value) -> "Config":
        """Copy with overrides; keyword ``rae__lr=1e-3`` means ``rae.lr``."""
        values = dict(self._values)
        values.update({k.replace("__", "."): v for k, v in dotted.items()})
        return Config(values)

    def to_text(self) -> str:
        lines = []
        section = None
        for key in DEFAULTS:
            head = key.split(".", 1)[0]
            if head != section:
                if section is not None:
                    lines.append("")
                section = head
            lines.append(f"{key} = {_format(self._values[key])}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, Value]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self._values.items()}

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            image_channels=self["model.image_channels"],
            latent_channels=self["model.latent_channels"],
            downsample_factor=self["model.downsample_factor"],
            ae_width=self["model.ae_width"],
            sr_width=self["model.sr_width"],
            num_fru=self["model.num_fru"],
            imdb_per_fru=self["model.imdb_per_fru"],
            unet_width=self["model.unet_width"],
            unet_mults=self["model.unet_mults"],
            disc_width=self["model.disc_width"],
            num_timesteps=self["schedule.T"],
            unet_output=self["model.unet_output"],
        )

    @property
    def schedule(self) -> NoiseSchedule:
        return make_schedule(self["schedule.T"], self["schedule.beta_start"],
                             self["schedule.beta_end"], self["schedule.sigma_data"])


def validate(cfg: Config) -> None:
    def need(cond: bool, msg: str) -> None:
        if not cond:
            raise ConfigError(msg)

    need(cfg["run.profile"] in PROFILES, f"run.profile must be one of {sorted(PROFILES)}")
    need(cfg["schedule.T"] >= 2, "schedule.T must be >= 2")
    need(0 < cfg["schedule.beta_start"] < cfg["schedule.beta_end"] < 1,
         "need 0 < schedule.beta_start < schedule.beta_end < 1")
    need(cfg["schedule.sigma_data"] > 0, "schedule.sigma_data must be positive")
    for key in ("rae.w_l1", "rae.w_adv", "rae.w_reg", "lcd.lambda_ct", "lcd.lambda_kd"):
        need(cfg[key] >= 0, f"{key} must be >= 0")
    for key in ("rae.epochs", "rae.batch_size", "lcd.epochs", "lcd.batch_size",
                "rae.ckpt_every", "lcd.ckpt_every", "sample.ancestral_steps"):
        need(cfg[key] >= 1, f"{key} must be >= 1")
    need(cfg["rae.warmup_epochs"] >= 0, "rae.warmup_epochs must be >= 0")
    for key in ("rae.lr", "rae.disc_lr", "lcd.lr"):
        need(cfg[key] > 0, f"{key} must be positive")
    need(1 <= cfg["lcd.k"] <= cfg["schedule.T"] - 1, "lcd.k must be in [1, T-1]")
    need(0.0 <= cfg["lcd.mu"] <= 1.0, "lcd.mu must be in [0, 1]")
    need(cfg["lcd.ablation"] in ABLATIONS, f"lcd.ablation must be one of {ABLATIONS}")
    need(cfg["sample.ancestral_steps"] <= cfg["schedule.T"], "sample.ancestral_steps must be <= T")
    need(cfg["bench.repeats"] >= 3, "bench.repeats must be >= 3")
    need(cfg["bench.warmup"] >= 0, "bench.warmup must be >= 0")
    split = cfg["data.split"]
    need(len(split) == 3 and all(f >= 0 for f in split) and abs(sum(split) - 1.0) < 1e-9,
         "data.split must be three non-negative fractions summing to 1")
    patch = cfg["data.patch_size"]
    need(patch % 4 == 0, f"data.patch_size {patch} must be divisible by 4")
    try:
        spec = cfg.model_spec
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    unet_mult = 2 ** (len(spec.unet_mults) - 1)
    need(patch % (spec.downsample_factor * unet_mult) == 0,
         f"data.patch_size {patch} must be divisible by downsample_factor x {unet_mult}")


def resolve_config(
    path: Optional[Union[str, Path]] = None,
    profile: Optional[str] = None,
    overrides: Optional[Mapping[str, Value]] = None,
) -> Config:
    """Defaults < profile overlay < file < overrides."""
    file_values: Dict[str, Value] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        file_values = parse_text(text, str(path))
    overrides = dict(overrides or {})
    name = profile or overrides.get("run.profile") or file_values.get("run.profile") or "full"
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    values: Dict[str, Value] = dict(PROFILES[name])
    values.update(file_values)
    values.update(overrides)
    values["run.profile"] = name
    return Config(values)


def tiny_config(**dotted: Value) -> Config:
    return resolve_config(profile="tiny").replace(**dotted)
