"""Model and trainer checkpoints: config header plus named float32 tensors."""

from __future__ import annotations

import numpy as np

from .config import ExperimentConfig, config_from_header, first_mismatch, flatten
from .errors import ContractError
from .models import Model, build_model
from .serialization import load_checkpoint, save_checkpoint
from .training import AdamState, Trainer

_M = "opt.m."
_V = "opt.v."


def save_model(path, model: Model, cfg: ExperimentConfig, trainer: Trainer | None = None) -> None:
    """Parameters, the full config and (optionally) optimizer moments and step."""
    header = flatten(cfg)
    tensors = dict(model.state_dict())
    if trainer is not None:
        header["state.step"] = str(trainer.step)
        header["state.adam_t"] = str(trainer.opt.t)
        names = [n for n, _ in model.named_parameters()]
        for name, m, v in zip(names, trainer.opt.m, trainer.opt.v):
            tensors[_M + name] = m
            tensors[_V + name] = v
    save_checkpoint(path, header, tensors)


def load_model(path, cfg: ExperimentConfig | None = None, dtype=np.float32) -> tuple[Model, ExperimentConfig, dict]:
    """Rebuild the model stored at ``path``.

    When ``cfg`` is given its architecture must match the stored one; the first
    differing key is named in the error.  Returns ``(model, stored_cfg, raw)``
    where ``raw`` holds the header and tensors for trainer restoration.
    """
    header, tensors = load_checkpoint(path)
    stored = config_from_header(header)
    if cfg is not None:
        diff = first_mismatch(cfg, stored)
        if diff is not None:
            key, want, have = diff
            raise ContractError(f"checkpoint {path} does not match the config: "
                                f"{key} is {have} in the checkpoint but {want} in the config")
    model = build_model(stored.model, stored.seed, dtype)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(("opt.",))})
    return model, stored, {"header": header, "tensors": tensors}


def restore_trainer(trainer: Trainer, raw: dict) -> None:
    header, tensors = raw["header"], raw["tensors"]
    if "state.step" not in header:
        raise ContractError("checkpoint carries no trainer state")
    names = [n for n, _ in trainer.model.named_parameters()]
    try:
        m = [np.array(tensors[_M + n], dtype=trainer.model.dtype) for n in names]
        v = [np.array(tensors[_V + n], dtype=trainer.model.dtype) for n in names]
    except KeyError as exc:
        raise ContractError(f"optimizer state for {exc.args[0]} missing from checkpoint") from None
    trainer.opt = AdamState(int(header["state.adam_t"]), m, v)
    trainer.step = int(header["state.step"])
