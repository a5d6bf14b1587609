"""Fixed-point solvers for ``y = F(y)``.

Both solvers share one stopping rule: after at least ``t_min`` evaluations of
``F``, stop once the relative residual ``||F(y) - y|| / ||y||`` falls below
``tol``; otherwise stop after ``t_max`` evaluations.  The returned equilibrium
is ``F(y_k)`` for the accepted iterate ``y_k``; when the budget runs out, the
iterate with the smallest residual is used instead of the last one.

Solvers only ever see raw arrays through ``F`` and never record tape nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor, count_flops, flops_scope, no_grad

GUARD = 1e-8

PICARD = "picard"
ANDERSON = "anderson"


@dataclass(frozen=True)
class SolverConfig:
    method: str = ANDERSON
    tol: float = 3e-4
    t_max: int = 64
    t_min: int = 6
    window: int = 5
    beta: float = 1.0
    ridge: float = 1e-8
    # ignore ``tol`` and always spend the full ``t_max`` budget
    budget_only: bool = False

    def __post_init__(self):
        if self.method not in (PICARD, ANDERSON):
            raise ConfigError("solver.method", f"unknown method {self.method!r}")
        if not self.tol > 0:
            raise ConfigError("solver.tol", "must be positive")
        if self.t_max < 1:
            raise ConfigError("solver.t_max", "must be at least 1")
        if not 0 <= self.t_min <= self.t_max:
            raise ConfigError("solver.t_min", "must satisfy 0 <= t_min <= t_max")
        if self.window < 1:
            raise ConfigError("solver.window", "must be at least 1")
        if not 0 < self.beta <= 1:
            raise ConfigError("solver.beta", "must lie in (0, 1]")
        if self.ridge < 0:
            raise ConfigError("solver.ridge", "must be non-negative")

    def with_budget(self, t: int) -> "SolverConfig":
        """Exactly ``t`` evaluations, tolerance ignored."""
        return replace(self, t_max=t, t_min=min(self.t_min, t), budget_only=True)


@dataclass
class SolverResult:
    y_star: np.ndarray
    iterations: int
    residuals: list[float]
    converged: bool
    trajectory: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")


def _norm(a: np.ndarray) -> float:
    flat = a.reshape(-1)
    return float(np.sqrt(np.dot(flat.astype(np.float64, copy=False), flat.astype(np.float64, copy=False))))


def relative_residual(y, fy) -> float:
    """``||fy - y||_F / max(||y||_F, 1e-8)`` over the whole (batched) array."""
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    fy = fy.data if isinstance(fy, Tensor) else np.asarray(fy)
    count_flops(3 * y.size)
    return _norm(fy - y) / max(_norm(y), GUARD)


class _Tracker:
    """Stopping rule and best-iterate bookkeeping shared by both solvers."""

    def __init__(self, cfg: SolverConfig, keep_trajectory: bool):
        self.cfg = cfg
        self.residuals: list[float] = []
        self.best_r = np.inf
        self.best_fy: np.ndarray | None = None
        self.trajectory = [] if keep_trajectory else None

    def observe(self, k: int, y: np.ndarray, fy: np.ndarray) -> bool:
        if not np.all(np.isfinite(fy)):
            raise NumericError("non-finite fixed-point iterate", step=k)
        r = relative_residual(y, fy)
        self.residuals.append(r)
        if self.trajectory is not None:
            self.trajectory.append(fy.copy())
        if r < self.best_r:
            self.best_r, self.best_fy = r, fy
        if self.cfg.budget_only:
            return False
        return k + 1 >= self.cfg.t_min and r < self.cfg.tol

    def result(self, fy: np.ndarray, stopped: bool) -> SolverResult:
        n = len(self.residuals)
        converged = n >= self.cfg.t_min and self.residuals[-1] < self.cfg.tol
        if stopped or self.cfg.budget_only:
            y_star = fy
        else:
            y_star = self.best_fy
        return SolverResult(y_star, n, self.residuals, converged, self.trajectory)


def picard_solve(F: Callable[[np.ndarray], np.ndarray], y_init, cfg: SolverConfig,
                 keep_trajectory: bool = False) -> SolverResult:
    """Plain fixed-point iteration ``y <- F(y)``."""
    y = np.array(y_init.data if isinstance(y_init, Tensor) else y_init, copy=True)
    track = _Tracker(cfg, keep_trajectory)
    if track.trajectory is not None:
        track.trajectory.append(y.copy())
    stopped = False
    fy = y
    for k in range(cfg.t_max):
        fy = F(y)
        if track.observe(k, y, fy):
            stopped = True
            break
        y = fy
    return track.result(fy, stopped)


def _anderson_weights(G: np.ndarray, ridge: float) -> np.ndarray | None:
    """Mixing weights minimising ``||sum a_i g_i||`` subject to ``sum a_i = 1``.

    Solves the bordered normal equations.  ``ridge`` is relative to the largest
    squared residual norm in the window.  Returns None when the system is singular.
    """
    n = G.shape[0]
    if n == 1:
        return np.ones(1)
    gram = G @ G.T
    scale = float(np.max(np.diag(gram)))
    if not np.isfinite(scale) or scale == 0.0:
        return None
    H = np.zeros((n + 1, n + 1))
    H[0, 1:] = 1.0
    H[1:, 0] = 1.0
    H[1:, 1:] = gram / scale + ridge * np.eye(n)
    rhs = np.zeros(n + 1)
    rhs[0] = 1.0
    try:
        sol = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError:
        return None
    alpha = sol[1:]
    if not np.all(np.isfinite(alpha)):
        return None
    return alpha


def anderson_solve(F: Callable[[np.ndarray], np.ndarray], y_init, cfg: SolverConfig,
                   keep_trajectory: bool = False) -> SolverResult:
    """Anderson acceleration with window ``cfg.window`` and damping ``cfg.beta``."""
    y = np.array(y_init.data if isinstance(y_init, Tensor) else y_init, copy=True)
    shape, dtype = y.shape, y.dtype
    m = cfg.window
    X = np.zeros((m, y.size))
    FX = np.zeros((m, y.size))
    track = _Tracker(cfg, keep_trajectory)
    if track.trajectory is not None:
        track.trajectory.append(y.copy())
    stopped = False
    fy = y
    for k in range(cfg.t_max):
        fy = F(y)
        if track.observe(k, y, fy):
            stopped = True
            break
        slot = k % m
        X[slot] = y.reshape(-1)
        FX[slot] = fy.reshape(-1)
        n = min(k + 1, m)
        # oldest-to-newest order keeps the arithmetic independent of the slot layout
        order = [(k - n + 1 + i) % m for i in range(n)]
        Xw, Fw = X[order], FX[order]
        alpha = _anderson_weights(Fw - Xw, cfg.ridge)
        count_flops(2 * n * n * y.size + 4 * n * y.size)
        if alpha is None:
            y = fy
            continue
        mixed = cfg.beta * (alpha @ Fw)
        if cfg.beta != 1.0:
            mixed = mixed + (1.0 - cfg.beta) * (alpha @ Xw)
        if n == 1 and cfg.beta == 1.0:
            y = fy
        else:
            y = mixed.reshape(shape).astype(dtype, copy=False)
    return track.result(fy, stopped)


def root_find(cell: Callable[[Tensor], Tensor], y_init, cfg: SolverConfig,
              keep_trajectory: bool = False) -> SolverResult:
    """Find ``y = cell(y)`` starting from ``y_init``.

    ``cell`` maps a Tensor to a Tensor and is evaluated without recording.  The
    returned ``y_star`` is a plain array, i.e. detached from every tape.
    """
    def F(arr: np.ndarray) -> np.ndarray:
        with flops_scope("cell"):
            return cell(Tensor._wrap(arr)).data

    solve = anderson_solve if cfg.method == ANDERSON else picard_solve
    with no_grad(), flops_scope("solver"):
        return solve(F, y_init, cfg, keep_trajectory=keep_trajectory)
