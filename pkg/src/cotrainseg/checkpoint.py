"""Deterministic checkpoints.

State is converted to numpy arrays and pickled with a fixed protocol, so the
same logical state always produces the same bytes (torch's zip container does
not guarantee that). Training state beyond parameters and optimizer moments is
unnecessary: batches, augmentations, and point sampling are pure functions of
(seed, step), so a run resumed from step t replays exactly.
"""

from __future__ import annotations

import pickle
import sys
from dataclasses import dataclass

import numpy as np
import torch

FORMAT_VERSION = 1
PICKLE_PROTOCOL = 4


def _encode(obj):
    if isinstance(obj, torch.Tensor):
        array = np.ascontiguousarray(obj.detach().cpu().numpy())
        return {"__tensor__": True, "data": array}
    if isinstance(obj, dict):
        # intern keys: pickle memoizes strings by identity, and state dicts
        # restored from a checkpoint carry non-interned keys, so without this
        # a resumed run serializes to different bytes than a straight one
        return {
            sys.intern(key) if isinstance(key, str) else key: _encode(value)
            for key, value in obj.items()
        }
    if isinstance(obj, (list, tuple)):
        encoded = [_encode(value) for value in obj]
        return encoded if isinstance(obj, list) else tuple(encoded)
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, (bytes, int, float, bool, type(None), np.ndarray)):
        return obj
    raise TypeError(f"cannot checkpoint object of type {type(obj).__name__}")


def _decode(obj):
    if isinstance(obj, dict):
        if obj.get("__tensor__") is True:
            return torch.from_numpy(np.array(obj["data"]))
        return {key: _decode(value) for key, value in obj.items()}
    if isinstance(obj, list):
        return [_decode(value) for value in obj]
    if isinstance(obj, tuple):
        return tuple(_decode(value) for value in obj)
    return obj


@dataclass
class Checkpoint:
    step: int
    config_digest: str
    model_state: dict
    optimizer_state: dict

    def restore(
        self,
        models: dict[str, torch.nn.Module],
        optimizers: dict[str, torch.optim.Optimizer] | None = None,
    ) -> None:
        missing = set(models) - set(self.model_state)
        if missing:
            raise ValueError(f"checkpoint lacks state for models: {sorted(missing)}")
        for name, model in models.items():
            model.load_state_dict(_decode(self.model_state[name]), strict=True)
        if optimizers:
            for name, optimizer in optimizers.items():
                if name not in self.optimizer_state:
                    raise ValueError(f"checkpoint lacks state for optimizer {name!r}")
                optimizer.load_state_dict(_decode(self.optimizer_state[name]))


def checkpoint_bytes(
    step: int,
    models: dict[str, torch.nn.Module],
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    config_digest: str = "",
) -> bytes:
    payload = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "config_digest": config_digest,
        "models": {name: _encode(model.state_dict()) for name, model in models.items()},
        "optimizers": {
            name: _encode(opt.state_dict()) for name, opt in (optimizers or {}).items()
        },
    }
    return pickle.dumps(payload, protocol=PICKLE_PROTOCOL)


def save_checkpoint(
    path: str,
    step: int,
    models: dict[str, torch.nn.Module],
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    config_digest: str = "",
) -> None:
    data = checkpoint_bytes(step, models, optimizers, config_digest)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    return Checkpoint(
        step=payload["step"],
        config_digest=payload["config_digest"],
        model_state=payload["models"],
        optimizer_state=payload["optimizers"],
    )
