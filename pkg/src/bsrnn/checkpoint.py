"""Versioned checkpoint files: config snapshot, weights, and training state."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from .model import ModelConfig, build_model

SCHEMA_VERSION = 1


def atomic_torch_save(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model, model_cfg: ModelConfig, **state) -> None:
    """Write ``{version, model_config, state_dict, **state}`` atomically.

    ``state`` typically carries ``optimizer``, ``epoch``, ``early_stop``,
    ``rng``, ``best_metric``, ``wall_time_s`` and the train/data configs.
    """
    payload = {
        "version": SCHEMA_VERSION,
        "model_config": model_cfg.to_dict(),
        "state_dict": model.state_dict(),
        **state,
    }
    atomic_torch_save(payload, path)


def load_checkpoint(path, map_location="cpu") -> dict:
    ckpt = torch.load(path, map_location=map_location, weights_only=False)
    version = ckpt.get("version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint schema version {version!r}")
    return ckpt


def load_model(path, map_location="cpu"):
    """Rebuild the network stored in a checkpoint, in eval mode."""
    ckpt = load_checkpoint(path, map_location)
    model = build_model(ModelConfig.from_dict(ckpt["model_config"]))
    model.load_state_dict(ckpt["state_dict"])
    return model.eval()
