"""Checkpoint container shared by DAMSM pretraining, STREAM pretraining and GAN training.

A checkpoint is a ``torch.save`` dict holding named parameter arrays for every
module, the epoch, the config (with its digest), the seed, the vocabulary and
the per-epoch loss history. Loading uses ``weights_only=True``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import torch
from torch import nn

FORMAT = "cycle_t2i-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    kind: str  # damsm | stream | gan
    epoch: int
    config: dict
    config_digest: str
    seed: int
    vocab: list[str]
    modules: dict[str, dict[str, torch.Tensor]]
    loss_history: list[dict] = field(default_factory=list)
    optimizers: dict[str, dict] = field(default_factory=dict)

    def load_into(self, name: str, module: nn.Module) -> nn.Module:
        if name not in self.modules:
            raise CheckpointError(f"checkpoint has no module {name!r} (has {sorted(self.modules)})")
        module.load_state_dict(self.modules[name])
        return module


def state_of(modules: Mapping[str, nn.Module]) -> dict[str, dict[str, torch.Tensor]]:
    return {name: {k: v.detach().clone() for k, v in m.state_dict().items()} for name, m in modules.items()}


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": FORMAT, "kind": ckpt.kind, "epoch": ckpt.epoch, "config": ckpt.config,
               "config_digest": ckpt.config_digest, "seed": ckpt.seed, "vocab": list(ckpt.vocab),
               "modules": ckpt.modules, "loss_history": ckpt.loss_history, "optimizers": ckpt.optimizers}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_digest: str | None = None, override: bool = False) -> Checkpoint:
    """Load a checkpoint; refuses a config-digest mismatch unless ``override`` is set."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unrecognised checkpoint format {payload.get('format')!r}")
    if expected_digest is not None and payload["config_digest"] != expected_digest and not override:
        raise CheckpointError(f"{path}: config digest {payload['config_digest'][:12]} does not match "
                              f"the current config {expected_digest[:12]}")
    return Checkpoint(payload["kind"], payload["epoch"], payload["config"], payload["config_digest"],
                      payload["seed"], payload["vocab"], payload["modules"], payload["loss_history"],
                      payload["optimizers"])
