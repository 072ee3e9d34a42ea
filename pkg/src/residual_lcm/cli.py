"""Command-line entry point: ``python -m residual_lcm <command> ...``.

Exit status: 0 on success, 1 for usage / validation errors (detected before
any work starts), 2 when the work itself fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import (ABLATIONS, PROFILES, Config, ConfigError, _parse, parse_text, resolve_config,
                     validate)
from .datapipe import (IMAGE_SUFFIXES, DatasetSplits, build_dataset, make_pair, synth_corpus,
                       synth_image, write_pairs)
from .evaluation import compare_runtime, metric_report, super_resolve, write_json
from .imaging import load_image, save_image
from .lcd_stage import train_lcd
from .rae_stage import train_rae
from .sampler import SRPipeline, sample_ancestral, sample_single_step

log = logging.getLogger("residual_lcm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; here that is a validation error (1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--profile", choices=sorted(PROFILES), help="settings overlay (e.g. tiny)")
    p.add_argument("--seed", type=int, help="sets run.seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def _checkpoints(p: argparse.ArgumentParser, lcd: bool = True) -> None:
    p.add_argument("--rae-ckpt", type=Path, required=True, help="stage-1 checkpoint")
    if lcd:
        p.add_argument("--lcd-ckpt", type=Path, required=True, help="stage-2 checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="residual_lcm", description="Residual latent consistency super-resolution")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND",
                                parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a procedural HR/LR corpus")
    _common(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--hr-size", type=int, default=32)

    p = sub.add_parser("train-rae", help="stage 1: residual autoencoder")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="image folder")
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("train-lcd", help="stage 2: latent consistency model")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="image folder")
    _checkpoints(p, lcd=False)
    p.add_argument("--ablation", choices=ABLATIONS, help="sets lcd.ablation")
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("infer", help="super-resolve LR images")
    _common(p)
    _checkpoints(p)
    p.add_argument("--input", type=Path, required=True, help="LR image or folder of LR images")
    p.add_argument("--sampler", choices=("single", "ancestral"), default="single")

    p = sub.add_parser("eval", help="PSNR report against bicubic")
    _common(p)
    _checkpoints(p)
    p.add_argument("--data", type=Path, required=True, help="image folder")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--sampler", choices=("single", "ancestral"), default="single")
    p.add_argument("--metric", action="append", default=[],
                   help="registered perceptual metric to include; repeatable")

    p = sub.add_parser("bench", help="single-step vs ancestral runtime")
    _common(p)
    _checkpoints(p)
    p.add_argument("--input", type=Path, help="LR image (default: a synthetic patch)")
    return parser


def _overrides(args) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for item in args.overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = _parse(key.strip(), raw.strip())
    if args.seed is not None:
        values["run.seed"] = args.seed
    if getattr(args, "ablation", None):
        values["lcd.ablation"] = args.ablation
    return values


def _require(path: Optional[Path], flag: str, directory: bool = False) -> None:
    if path is None:
        return
    ok = path.is_dir() if directory else path.exists()
    if not ok:
        raise UsageError(f"{flag}: {path} does not exist")


def _dataset(args, cfg: Config) -> DatasetSplits:
    splits = build_dataset(args.data, cfg["data.patch_size"], cfg["data.split"], cfg["run.seed"],
                           cfg["model.image_channels"])
    splits.write_manifest(args.out / "split_manifest.json")
    if splits.skipped:
        log.warning("skipped %d unreadable or undersized file(s)", len(splits.skipped))
    return splits


def _lr_inputs(path: Path) -> List[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise UsageError(f"--input: no images in {path}")
        return files
    return [path]


def _cmd_synth(args, cfg: Config) -> dict:
    pairs = synth_corpus(args.n, args.hr_size, cfg["run.seed"], cfg["model.image_channels"])
    manifest = write_pairs(pairs, args.out, seed=cfg["run.seed"], hr_size=args.hr_size)
    return {"pairs": len(pairs), "manifest": str(manifest)}


def _cmd_train_rae(args, cfg: Config) -> dict:
    splits = _dataset(args, cfg)
    result = train_rae(splits.train, cfg, args.out, resume=args.resume)
    return {"checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None,
            "train_pairs": len(splits.train)}


def _cmd_train_lcd(args, cfg: Config) -> dict:
    splits = _dataset(args, cfg)
    result = train_lcd(splits.train, args.rae_ckpt, cfg, args.out, resume=args.resume)
    return {"checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None,
            "train_pairs": len(splits.train), "ablation": cfg["lcd.ablation"]}


def _sample(lr: torch.Tensor, pipe: SRPipeline, cfg: Config, sampler: str, seed: int) -> torch.Tensor:
    if sampler == "single":
        return sample_single_step(lr, pipe, seed)
    return sample_ancestral(lr, pipe, cfg["sample.ancestral_steps"], seed)


def _cmd_infer(args, cfg: Config) -> dict:
    files = _lr_inputs(args.input)
    pipe = SRPipeline.from_checkpoints(args.rae_ckpt, args.lcd_ckpt)
    written = []
    for i, path in enumerate(files):
        lr = load_image(path, pipe.unet.spec.image_channels)
        sr = _sample(lr, pipe, cfg, args.sampler, cfg["run.seed"] + i)
        dest = args.out / f"{path.stem}_sr.png"
        save_image(sr, dest)
        written.append(str(dest))
    return {"images": written, "denoiser_calls": pipe.denoiser.calls}


def _cmd_eval(args, cfg: Config) -> dict:
    splits = _dataset(args, cfg)
    pairs = splits.train + splits.val + splits.test if args.split == "all" else getattr(splits, args.split)
    if not pairs:
        raise UsageError(f"split {args.split!r} is empty")
    pipe = SRPipeline.from_checkpoints(args.rae_ckpt, args.lcd_ckpt)
    steps = None if args.sampler == "single" else cfg["sample.ancestral_steps"]
    srs = super_resolve(pairs, pipe, cfg["run.seed"], steps)
    report = metric_report(pairs, srs, cfg["eval.psnr_cap"], args.metric)
    report.update(split=args.split, sampler=args.sampler, denoiser_calls=pipe.denoiser.calls,
                  lcd_checkpoint=str(args.lcd_ckpt), ablation=_ablation_of(args.lcd_ckpt))
    write_json(report, args.out / "metrics.json")
    return report["aggregate"]


def _ablation_of(lcd_ckpt: Path) -> str:
    text = load_checkpoint(lcd_ckpt, kind="lcd")["config"]
    return str(parse_text(text).get("lcd.ablation", "full"))


def _cmd_bench(args, cfg: Config) -> dict:
    pipe = SRPipeline.from_checkpoints(args.rae_ckpt, args.lcd_ckpt)
    if args.input is not None:
        lr = load_image(args.input, pipe.unet.spec.image_channels)
    else:
        hr = synth_image(2, cfg["data.patch_size"], cfg["run.seed"], pipe.unet.spec.image_channels)
        lr = make_pair(hr, "bench").lr
    report = compare_runtime(lr, pipe, cfg["bench.repeats"], cfg["bench.warmup"],
                             cfg["sample.ancestral_steps"], cfg["run.seed"])
    write_json(report, args.out / "bench.json")
    return {"ratio_mean": report["ratio_mean"],
            "single_calls": report["single"]["denoiser_calls"],
            "ancestral_calls": report["ancestral"]["denoiser_calls"]}


COMMANDS = {
    "synth-data": _cmd_synth,
    "train-rae": _cmd_train_rae,
    "train-lcd": _cmd_train_lcd,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def _prepare(args) -> Config:
    _require(args.config, "--config")
    for flag in ("data", "rae_ckpt", "lcd_ckpt", "input", "resume"):
        _require(getattr(args, flag, None), "--" + flag.replace("_", "-"), directory=flag == "data")
    cfg = resolve_config(args.config, args.profile, _overrides(args))
    validate(cfg)
    if args.command == "synth-data":
        f = cfg["model.downsample_factor"]
        if args.n < 1:
            raise UsageError("--n must be >= 1")
        if args.hr_size < 4 or args.hr_size % 4 or args.hr_size % f:
            raise UsageError(f"--hr-size {args.hr_size} must be divisible by 4 and by the latent factor {f}")
    return cfg


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _prepare(args)
    except (UsageError, ConfigError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config.txt").write_text(cfg.to_text())
        summary = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"{parser.prog} {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for key, value in summary.items():
        print(f"{key}: {value}")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
