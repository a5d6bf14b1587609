"""AdamW optimisation loop for every model family, plus deep supervision for grid tasks."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diagnostics import ActivationCounter, FlopsCounter, TrainRecord
from .errors import ConfigError, NumericError
from .models import IGNORE_INDEX, AttractorModel, Model, ReasoningModel, StepStats
from .tensor import Parameter, observe, zero_grad


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 3e-3
    beta1: float = 0.8
    beta2: float = 0.95
    eps: float = 1e-10
    weight_decay: float = 0.0
    warmup: float = 0.0
    cooldown: float = 0.5
    clip: float = 1.0
    seed: int = 0
    eval_interval: int = 0
    checkpoint_interval: int = 0
    supervision_steps: int = 4
    # estimate the cell's spectral radius every this many steps (0 disables)
    rho_interval: int = 0

    def __post_init__(self):
        checks = [
            ("train.steps", self.steps >= 0, "must be non-negative"),
            ("train.batch_size", self.batch_size >= 1, "must be at least 1"),
            ("train.lr", self.lr >= 0, "must be non-negative"),
            ("train.beta1", 0 <= self.beta1 < 1, "must lie in [0, 1)"),
            ("train.beta2", 0 <= self.beta2 < 1, "must lie in [0, 1)"),
            ("train.eps", self.eps > 0, "must be positive"),
            ("train.weight_decay", self.weight_decay >= 0, "must be non-negative"),
            ("train.warmup", 0 <= self.warmup <= 1, "must lie in [0, 1]"),
            ("train.cooldown", 0 <= self.cooldown <= 1 and self.warmup + self.cooldown <= 1,
             "must lie in [0, 1] with warmup + cooldown <= 1"),
            ("train.clip", self.clip > 0, "must be positive"),
            ("train.eval_interval", self.eval_interval >= 0, "must be non-negative"),
            ("train.checkpoint_interval", self.checkpoint_interval >= 0, "must be non-negative"),
            ("train.supervision_steps", self.supervision_steps >= 1, "must be at least 1"),
            ("train.rho_interval", self.rho_interval >= 0, "must be non-negative"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Trapezoid schedule: linear warmup, flat, linear decay to zero at ``cfg.steps``."""
    total = cfg.steps
    if total <= 0:
        return cfg.lr
    frac = min(max(step / total, 0.0), 1.0)
    if cfg.warmup > 0 and frac < cfg.warmup:
        return cfg.lr * frac / cfg.warmup
    decay_start = 1.0 - cfg.cooldown
    if cfg.cooldown > 0 and frac > decay_start:
        return cfg.lr * (1.0 - frac) / cfg.cooldown
    return cfg.lr


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamState,
               cfg: TrainConfig, lr: float) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay:
            p.data -= (lr * cfg.weight_decay) * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` jointly so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def ce_targets(targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, targets, IGNORE_INDEX)


@dataclass
class DeepSupervisionState:
    """Detached latent pair carried between supervision steps, stored concatenated."""

    state: np.ndarray

    @property
    def y(self) -> np.ndarray:
        return self.state[..., : self.state.shape[-1] // 2]

    @property
    def z(self) -> np.ndarray:
        return self.state[..., self.state.shape[-1] // 2:]


class Trainer:
    """Owns the optimizer state and step counter for one model."""

    def __init__(self, model: Model, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.params = model.parameters()
        self.opt = AdamState.for_params(self.params)
        self.step = 0

    def _update(self, lr: float) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        grads, norm = clip_gradients(grads, self.cfg.clip)
        if not np.isfinite(norm):
            raise NumericError(f"non-finite gradient norm at step {self.step}", step=self.step)
        adamw_step(self.params, grads, self.opt, self.cfg, lr)
        self.model.constrain()
        return norm

    def _abort(self, loss: float):
        raise NumericError(f"non-finite loss {loss} at step {self.step}; "
                           f"resume from the last checkpoint before this step", step=self.step)

    @contextmanager
    def _step_errors(self):
        # numeric failures inside ops do not know the training step
        try:
            yield
        except NumericError as exc:
            if exc.step is not None:
                raise
            raise NumericError(f"{exc}; resume from the last checkpoint before this step",
                               step=self.step) from exc

    def _one(self, inputs, targets, lr: float) -> tuple[StepStats, float]:
        zero_grad(self.params)
        with self._step_errors():
            stats = self.model.loss_and_grad(inputs, targets)
        if not np.isfinite(stats.loss):
            self._abort(stats.loss)
        return stats, self._update(lr)

    def deep_supervision_step(self, inputs, targets, state: DeepSupervisionState,
                              lr: float) -> tuple[StepStats, float, DeepSupervisionState]:
        """One supervised solve from ``state`` with its own parameter update."""
        model = self.model
        zero_grad(self.params)
        with self._step_errors():
            stats, nxt = model.supervise(inputs, targets, state.state)
        if not np.isfinite(stats.loss):
            self._abort(stats.loss)
        return stats, self._update(lr), DeepSupervisionState(nxt)

    def train_step(self, batch) -> TrainRecord:
        """One optimisation step on ``batch`` (inputs, targets, mask); advances the schedule."""
        lr = lr_at(self.step, self.cfg)
        targets = ce_targets(batch.targets, batch.mask)
        mem, flops = ActivationCounter(), FlopsCounter()
        with observe(memory=mem, flops=flops):
            if isinstance(self.model, ReasoningModel):
                state = DeepSupervisionState(self.model.initial_state(*batch.inputs.shape))
                losses, fwd, bwd, norms = [], [], [], []
                for _ in range(self.cfg.supervision_steps):
                    stats, norm, state = self.deep_supervision_step(batch.inputs, targets, state, lr)
                    losses.append(stats.loss)
                    fwd.append(stats.iters_fwd)
                    bwd.append(stats.iters_bwd)
                    norms.append(norm)
                stats = StepStats(float(np.mean(losses)), int(round(np.mean(fwd))), int(round(np.mean(bwd))))
                norm = float(np.mean(norms))
            else:
                stats, norm = self._one(batch.inputs, targets, lr)
        rho = float("nan")
        if (self.cfg.rho_interval and self.step % self.cfg.rho_interval == 0
                and isinstance(self.model, AttractorModel) and not isinstance(self.model, ReasoningModel)):
            rho = self.model.spectral_radius(batch.inputs[:1])
        record = TrainRecord(
            step=self.step, loss=stats.loss, iters_fwd=stats.iters_fwd, iters_bwd=stats.iters_bwd,
            internalization_dist=stats.internalization_dist, act_peak=mem.peak,
            flops_backbone=flops.get("backbone"), flops_cell=flops.get("cell"),
            lr=lr, grad_norm=norm, rho_estimate=rho)
        self.step += 1
        return record


def train_step(trainer: Trainer, batch) -> TrainRecord:
    return trainer.train_step(batch)
