"""Versioned checkpoint container.

A checkpoint is a single ``torch.save`` archive holding plain containers
only (loadable with ``weights_only=True``)::

    {
      "format": "residual_lcm.ckpt",
      "format_version": 1,
      "kind": "rae" | "lcd",
      "manifest": {"model_spec": {...}, "seed": int,
                   "parameters": {network: {path: shape}}},
      "networks": {network: state_dict},
      "state": {...},          # optimiser moments, counters, RNG, history
      "config": "<resolved config text>",
    }
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import torch
from torch import nn

from .backbone import ModelSpec, parameter_manifest

FORMAT = "residual_lcm.ckpt"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(
    path: Union[str, Path],
    kind: str,
    networks: Mapping[str, nn.Module],
    spec: ModelSpec,
    seed: int,
    config_text: str,
    state: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    payload = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "manifest": {
            "model_spec": spec.to_dict(),
            "seed": int(seed),
            "parameters": {name: parameter_manifest(m) for name, m in networks.items()},
        },
        "networks": {name: m.state_dict() for name, m in networks.items()},
        "state": state or {},
        "config": config_text,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: Union[str, Path], kind: Optional[str] = None) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt archives raise a variety of errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} archive")
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {payload.get('format_version')}"
        )
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, got {payload.get('kind')!r}")
    return payload


def spec_from_manifest(payload: Mapping[str, Any]) -> ModelSpec:
    return ModelSpec(**payload["manifest"]["model_spec"])


def restore(module: nn.Module, payload: Mapping[str, Any], name: str) -> nn.Module:
    try:
        module.load_state_dict(payload["networks"][name])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint has no compatible {name!r} network: {exc}") from exc
    return module
