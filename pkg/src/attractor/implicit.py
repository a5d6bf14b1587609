"""Gradients through an equilibrium ``y* = T(y*, c)``.

Given ``v = dL/dy*`` the exact parameter gradient is ``u^T dT/dtheta`` with the
adjoint ``u = (I - J^T)^{-1} v`` and ``J = dT/dy`` at ``y*``.  Three
approximations of ``u`` are provided:

* one-step: ``u = v`` (one vector-Jacobian product, constant memory);
* phantom: backpropagate through ``k`` damped cell applications started at ``y*``;
* full IFT: solve ``u = J^T u + v`` by fixed-point iteration, then one VJP.

Every mode accumulates parameter gradients into ``.grad`` and returns the
gradient with respect to the injected input ``c``; pushing that into the graph
that produced ``c`` is the caller's job.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .solver import PICARD, SolverConfig, anderson_solve, picard_solve
from .tensor import Parameter, Tape, Tensor

ONESTEP = "onestep"
PHANTOM = "phantom"
FULL_IFT = "full_ift"

Cell = Callable[[Tensor, Tensor], Tensor]


@dataclass(frozen=True)
class BackwardMode:
    kind: str = ONESTEP
    k: int = 3
    damping: float = 0.5
    adjoint: SolverConfig = field(default_factory=lambda: SolverConfig(method=PICARD))

    def __post_init__(self):
        if self.kind not in (ONESTEP, PHANTOM, FULL_IFT):
            raise ConfigError("backward.kind", f"unknown backward mode {self.kind!r}")
        if self.k < 1:
            raise ConfigError("backward.k", "phantom unroll length must be at least 1")
        if not 0 < self.damping <= 1:
            raise ConfigError("backward.damping", "must lie in (0, 1]")


@dataclass
class ImplicitGrad:
    grad_c: np.ndarray
    adjoint: np.ndarray
    iterations: int = 0
    converged: bool = True
    residuals: list[float] = field(default_factory=list)


def _accumulate(params: Sequence[Parameter], grads) -> None:
    for p, g in zip(params, grads):
        p.grad = g.copy() if p.grad is None else p.grad + g


class Linearization:
    """The cell recorded once at ``(y*, c)``; supports repeated VJPs."""

    def __init__(self, cell: Cell, y_star, c, params: Sequence[Parameter]):
        y_star = np.asarray(y_star.data if isinstance(y_star, Tensor) else y_star)
        c = np.asarray(c.data if isinstance(c, Tensor) else c)
        if y_star.shape != c.shape:
            raise ShapeError("equilibrium and proposal shapes differ", y_star.shape, c.shape)
        self.params = list(params)
        self.tape = Tape()
        with self.tape:
            self.y = Tensor(y_star, requires_grad=True)
            self.c = Tensor(c, requires_grad=True)
            self.out = cell(self.y, self.c)
        if self.out.shape != y_star.shape:
            raise ShapeError("cell output shape differs from its state", self.out.shape, y_star.shape)

    def vjp(self, w) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        """``(w J_y, w J_c, [w dT/dtheta])`` from one backward sweep."""
        w = np.asarray(w, dtype=self.out.dtype)
        if w.shape != self.out.shape:
            raise ShapeError("cotangent shape mismatch", w.shape, self.out.shape)
        if not self.out.requires_grad:
            zeros = [np.zeros_like(p.data) for p in self.params]
            return np.zeros_like(self.y.data), np.zeros_like(self.c.data), zeros
        gy, gc, *gp = self.tape.vjp(self.out, w, [self.y, self.c, *self.params])
        return gy, gc, gp

    def release(self) -> None:
        self.tape.release()


def vjp_cell(cell: Cell, y_star, c, w, params: Sequence[Parameter] = ()):
    """Vector-Jacobian products of the cell at ``(y*, c)`` w.r.t. state, proposal and parameters."""
    lin = Linearization(cell, y_star, c, params)
    try:
        return lin.vjp(w)
    finally:
        lin.release()


def backward_onestep(cell: Cell, v, y_star, c, params: Sequence[Parameter]) -> ImplicitGrad:
    lin = Linearization(cell, y_star, c, params)
    try:
        _, gc, gp = lin.vjp(v)
    finally:
        lin.release()
    _accumulate(params, gp)
    return ImplicitGrad(gc, np.asarray(v))


def backward_phantom(cell: Cell, v, y_star, c, params: Sequence[Parameter],
                     k: int = 3, damping: float = 0.5) -> ImplicitGrad:
    """Differentiate ``k`` damped applications ``y <- (1-a) y + a T(y, c)`` from ``y*``."""
    if k < 1:
        raise ContractError("phantom gradient needs k >= 1")
    y_star = np.asarray(y_star.data if isinstance(y_star, Tensor) else y_star)
    c = np.asarray(c.data if isinstance(c, Tensor) else c)
    tape = Tape()
    try:
        with tape:
            ct = Tensor(c, requires_grad=True)
            y = Tensor._wrap(y_star)
            for _ in range(k):
                step = cell(y, ct)
                y = step if damping == 1.0 else y * (1.0 - damping) + step * damping
        if not y.requires_grad:
            zeros = [np.zeros_like(p.data) for p in params]
            _accumulate(params, zeros)
            return ImplicitGrad(np.zeros_like(c), np.asarray(v), iterations=k)
        gc, *gp = tape.vjp(y, v, [ct, *params])
    finally:
        tape.release()
    _accumulate(params, gp)
    return ImplicitGrad(gc, np.asarray(v), iterations=k)


def backward_full_ift(cell: Cell, v, y_star, c, params: Sequence[Parameter],
                      adjoint_cfg: SolverConfig | None = None) -> ImplicitGrad:
    """Solve ``u = J^T u + v`` starting at ``u = v``, then one VJP with ``u``.

    Non-convergence of the adjoint is reported with a warning; the best iterate is used.
    """
    cfg = adjoint_cfg or SolverConfig(method=PICARD)
    v = np.asarray(v)
    lin = Linearization(cell, y_star, c, params)
    try:
        def F(u):
            gy, _, _ = lin.vjp(u)
            return gy + v

        solve = picard_solve if cfg.method == PICARD else anderson_solve
        res = solve(F, v, cfg)
        if not res.converged:
            warnings.warn(f"adjoint solve did not converge in {res.iterations} iterations "
                          f"(residual {res.final_residual:.3g})", RuntimeWarning, stacklevel=2)
        u = res.y_star.astype(v.dtype, copy=False)
        _, gc, gp = lin.vjp(u)
    finally:
        lin.release()
    _accumulate(params, gp)
    return ImplicitGrad(gc, u, res.iterations, res.converged, res.residuals)


def implicit_backward(mode: BackwardMode, cell: Cell, v, y_star, c,
                      params: Sequence[Parameter]) -> ImplicitGrad:
    if mode.kind == ONESTEP:
        return backward_onestep(cell, v, y_star, c, params)
    if mode.kind == PHANTOM:
        return backward_phantom(cell, v, y_star, c, params, mode.k, mode.damping)
    return backward_full_ift(cell, v, y_star, c, params, mode.adjoint)


def spectral_radius_estimate(cell: Cell, y_star, c, iters: int = 50,
                             rng: np.random.Generator | None = None) -> float:
    """Power-iteration estimate of the dominant eigenvalue magnitude of ``J^T`` at ``y*``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    lin = Linearization(cell, y_star, c, ())
    try:
        shape, dtype = lin.y.shape, lin.y.dtype
        restarts = 0
        w = rng.standard_normal(shape).astype(dtype)
        w /= np.linalg.norm(w)
        est = 0.0
        i = 0
        while i < iters:
            z, _, _ = lin.vjp(w)
            n = float(np.linalg.norm(z))
            if not np.isfinite(n) or n < 1e-30:
                if restarts == 3:
                    return 0.0
                restarts += 1
                w = rng.standard_normal(shape).astype(dtype)
                w /= np.linalg.norm(w)
                i = 0
                continue
            est = n
            w = (z / n).astype(dtype, copy=False)
            i += 1
        return est
    finally:
        lin.release()
