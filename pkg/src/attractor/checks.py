"""Invariant and oracle suite: gradient checks, solver oracles, implicit-gradient
equivalences and memory laws.  ``run_checks`` backs the ``check`` command; the
helpers are reused by the test suite.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .diagnostics import ActivationCounter
from .implicit import (backward_full_ift, backward_onestep, backward_phantom,
                       spectral_radius_estimate)
from .models import DEQ, LOOPED, ModelSpec, build_model
from .nn import Module, TransformerBlock
from .solver import ANDERSON, PICARD, SolverConfig, anderson_solve, picard_solve, root_find
from .tensor import Parameter, Tape, Tensor, observe

FD_STEP = 1e-5
# denominators below this are treated as this, so FD round-off on near-zero
# entries does not masquerade as relative error
FD_FLOOR = 1e-5


def rel_err(a, b, floor: float = FD_FLOOR) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = FD_STEP) -> float:
    old = arr[index]
    arr[index] = old + h
    plus = f()
    arr[index] = old - h
    minus = f()
    arr[index] = old
    return (plus - minus) / (2 * h)


def sample_indices(shape, n: int, rng: np.random.Generator) -> list[tuple]:
    size = int(np.prod(shape))
    if size <= n:
        return [np.unravel_index(i, shape) for i in range(size)]
    return [np.unravel_index(i, shape) for i in rng.choice(size, n, replace=False)]


def check_op_gradient(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
                      weights: np.ndarray | None = None) -> float:
    """Worst relative error between tape and central-difference gradients of
    ``sum(op(*inputs) * W)`` over all entries of all inputs (float64)."""
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = op(*[Tensor._wrap(a) for a in arrays]).data
    W = rng.standard_normal(probe.shape) if weights is None else weights

    def value() -> float:
        return float(np.sum(op(*[Tensor._wrap(a) for a in arrays]).data * W))

    tape = Tape()
    with tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = op(*leaves)
    grads = tape.vjp(out, W, leaves)
    tape.release()
    worst = 0.0
    for arr, g in zip(arrays, grads):
        for idx in np.ndindex(arr.shape):
            worst = max(worst, float(rel_err(g[idx], fd_grad(value, arr, idx))))
    return worst


def check_param_gradients(params: Sequence[Parameter], loss_and_grad: Callable[[], None],
                          loss: Callable[[], float], samples: int = 6, seed: int = 0) -> tuple[float, str]:
    """Compare accumulated ``.grad`` against central differences of ``loss`` on sampled entries."""
    for p in params:
        p.grad = None
    loss_and_grad()
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        for idx in sample_indices(p.shape, samples, rng):
            e = float(rel_err(g[idx], fd_grad(loss, p.data, idx)))
            if e > worst:
                worst, where = e, f"param {i} {p.shape} at {idx}"
    return worst, where


# --------------------------------------------------------------------------
# affine test cells

class AffineCell(Module):
    """``T(y, c) = y A^T + c`` on states of shape ``[1, n]``; Jacobian ``A``."""

    def __init__(self, A: np.ndarray):
        self.A = Parameter(np.array(A, dtype=np.float64))

    def __call__(self, y: Tensor, c: Tensor) -> Tensor:
        return y @ self.A.T + c


def random_contraction(n: int, norm: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian matrix rescaled to spectral norm ``norm``."""
    A = rng.standard_normal((n, n))
    return A * (norm / np.linalg.norm(A, 2))


def affine_fixed_point(A: np.ndarray, c: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    return np.linalg.solve(np.eye(n) - A, c.reshape(-1)).reshape(1, n)


def bptt_gradient(cell: AffineCell, c: np.ndarray, v: np.ndarray, steps: int = 50):
    """Gradients of ``v . y_steps`` w.r.t. ``c`` and ``A`` through an explicit Picard unroll from 0."""
    cell.A.grad = None
    tape = Tape()
    with tape:
        ct = Tensor(c, requires_grad=True)
        y = Tensor._wrap(np.zeros_like(c))
        for _ in range(steps):
            y = cell(y, ct)
    gc, gA = tape.vjp(y, v, [ct, cell.A])
    tape.release()
    return gc, gA


# --------------------------------------------------------------------------
# the suite

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _op_gradients() -> CheckResult:
    rng = np.random.default_rng(0)
    x = lambda *s: rng.uniform(-1, 1, s)
    cos, sin = np.cos(np.outer(np.arange(3), [1.0, 0.3])), np.sin(np.outer(np.arange(3), [1.0, 0.3]))
    targets = rng.integers(0, 7, (2, 3))
    ops = {
        "matmul": (lambda a, b: a @ b, [x(4, 3), x(3, 2)]),
        "softmax": (lambda a: T.softmax(a), [x(2, 5)]),
        "rms_norm": (lambda a, g: T.rms_norm(a, g, 1e-5), [x(3, 6), x(6)]),
        "relu_squared": (T.relu_squared, [x(3, 5)]),
        "cross_entropy": (lambda z: T.cross_entropy(z, targets), [x(2, 3, 7)]),
        "rope": (lambda a: T.rope(a, cos, sin), [x(1, 3, 2, 4)]),
        "mul": (lambda a, b: a * b, [x(2, 3), x(2, 3)]),
        "concat": (lambda a, b: T.concat([a, b]), [x(2, 3), x(2, 2)]),
    }
    worst = {name: check_op_gradient(op, args) for name, (op, args) in ops.items()}
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    top = max(worst, key=worst.get)
    return CheckResult("op gradients", not bad, f"worst {top} rel err {worst[top]:.2e}")


def _block_gradient() -> CheckResult:
    rng = np.random.default_rng(1)
    block = TransformerBlock(8, 2, 16, 6, rng, np.float64, out_std=0.3)
    h = rng.standard_normal((2, 5, 8))
    W = rng.standard_normal(h.shape)

    def lg():
        tape = Tape()
        with tape:
            out = block(Tensor._wrap(h))
        tape.backward(out, W)
        tape.release()

    loss = lambda: float(np.sum(block(Tensor._wrap(h)).data * W))
    worst, where = check_param_gradients(block.parameters(), lg, loss, samples=8)
    return CheckResult("block parameter gradients", worst < 1e-4, f"worst rel err {worst:.2e} ({where})")


def _causality() -> CheckResult:
    rng = np.random.default_rng(2)
    block = TransformerBlock(8, 2, 16, 8, rng, np.float64, out_std=0.5)
    h = rng.standard_normal((1, 8, 8))
    base = block(Tensor._wrap(h)).data
    ok = True
    for j in range(8):
        g = h.copy()
        g[0, j] += rng.standard_normal(8)
        ok &= np.array_equal(block(Tensor._wrap(g)).data[0, :j], base[0, :j])
    return CheckResult("causal mask", bool(ok), "prefix outputs bit-identical under future perturbation")


def _picard_rate() -> CheckResult:
    rng = np.random.default_rng(3)
    violations = 0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        L = float(rng.uniform(0.75, 0.99))
        A = random_contraction(n, L, rng)
        b = rng.standard_normal(n)
        y_star = np.linalg.solve(np.eye(n) - A, b)
        y = rng.standard_normal(n)
        e0 = np.linalg.norm(y - y_star)
        for k in range(1, 51):
            y = A @ y + b
            if np.linalg.norm(y - y_star) > (L + 1e-6) ** k * e0:
                violations += 1
                break
    return CheckResult("Picard linear rate", violations == 0, f"{violations} of 100 contractions violate the bound")


def _anderson_oracles() -> CheckResult:
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        A = random_contraction(8, 0.9, rng)
        b = rng.standard_normal(8)
        res = anderson_solve(lambda y: A @ y + b, np.zeros(8),
                             SolverConfig(ANDERSON, tol=1e-12, t_max=200, t_min=0))
        worst = max(worst, float(np.max(np.abs(res.y_star - np.linalg.solve(np.eye(8) - A, b)))))
    return CheckResult("Anderson vs dense solve", worst < 1e-8, f"max abs error {worst:.2e}")


def anderson_dominance(trials: int = 100, seed: int = 5) -> int:
    """Number of random affine contractions where Anderson(5) needs no more iterations than Picard."""
    rng = np.random.default_rng(seed)
    wins = 0
    for _ in range(trials):
        n = int(rng.integers(4, 17))
        A = random_contraction(n, float(rng.uniform(0.5, 0.95)), rng)
        b = rng.standard_normal(n)
        F = lambda y: A @ y + b
        y0 = np.zeros(n)
        p = picard_solve(F, y0, SolverConfig(PICARD, tol=1e-8, t_max=2000, t_min=0))
        a = anderson_solve(F, y0, SolverConfig(ANDERSON, tol=1e-8, t_max=2000, t_min=0, window=5, beta=1.0))
        wins += a.converged and a.iterations <= p.iterations
    return wins


def _anderson_dominance() -> CheckResult:
    wins = anderson_dominance()
    return CheckResult("Anderson needs no more iterations than Picard", wins >= 95, f"{wins} of 100")


def ift_errors(trials: int = 10, seed: int = 6) -> tuple[float, float]:
    """Worst error of full-IFT gradients vs the dense oracle and vs 50-step BPTT."""
    rng = np.random.default_rng(seed)
    dense_err = bptt_err = 0.0
    adj = SolverConfig(PICARD, tol=1e-13, t_max=2000, t_min=0)
    for _ in range(trials):
        n = int(rng.integers(2, 17))
        A = random_contraction(n, float(rng.uniform(0.3, 0.9)), rng)
        cell = AffineCell(A)
        c = rng.standard_normal((1, n))
        v = rng.standard_normal((1, n))
        y_star = affine_fixed_point(A, c)
        cell.A.grad = None
        ig = backward_full_ift(cell, v, y_star, c, [cell.A], adj)
        u = np.linalg.solve(np.eye(n) - A.T, v.reshape(-1))
        dense_err = max(dense_err, float(np.max(np.abs(ig.grad_c.reshape(-1) - u))),
                        float(np.max(np.abs(cell.A.grad - np.outer(u, y_star)))))
        gA_ift = cell.A.grad.copy()
        gc, gA = bptt_gradient(cell, c, v, 50)
        bptt_err = max(bptt_err, float(np.max(np.abs(gc - ig.grad_c))), float(np.max(np.abs(gA - gA_ift))))
    return dense_err, bptt_err


def _ift() -> CheckResult:
    dense, bptt = ift_errors()
    return CheckResult("full IFT vs dense solve and 50-step BPTT", dense < 1e-6 and bptt < 1e-4,
                       f"dense {dense:.2e}, BPTT {bptt:.2e}")


def phantom_errors(ks=(1, 2, 4, 8), seed: int = 7, damping: float = 1.0) -> list[float]:
    """Parameter-gradient error of phantom(k) relative to full IFT on one affine cell."""
    rng = np.random.default_rng(seed)
    n = 8
    A = random_contraction(n, 0.8, rng)
    cell = AffineCell(A)
    c = rng.standard_normal((1, n))
    v = rng.standard_normal((1, n))
    y_star = affine_fixed_point(A, c)
    cell.A.grad = None
    backward_full_ift(cell, v, y_star, c, [cell.A], SolverConfig(PICARD, tol=1e-14, t_max=5000, t_min=0))
    exact = cell.A.grad.copy()
    errs = []
    for k in ks:
        cell.A.grad = None
        backward_phantom(cell, v, y_star, c, [cell.A], k, damping)
        errs.append(float(np.linalg.norm(cell.A.grad - exact)))
    return errs


def _phantom() -> CheckResult:
    rng = np.random.default_rng(8)
    block = TransformerBlock(8, 2, 16, 4, rng, np.float64, out_std=0.3)
    cell = lambda y, c: block(y + c) * 0.5
    y = rng.standard_normal((1, 4, 8))
    c = rng.standard_normal((1, 4, 8))
    v = rng.standard_normal((1, 4, 8))
    params = block.parameters()
    for p in params:
        p.grad = None
    one = backward_onestep(cell, v, y, c, params)
    g_one = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    ph = backward_phantom(cell, v, y, c, params, k=1, damping=1.0)
    same = np.array_equal(one.grad_c, ph.grad_c) and all(np.array_equal(a, p.grad) for a, p in zip(g_one, params))
    errs = phantom_errors()
    mono = all(b < a for a, b in zip(errs, errs[1:]))
    return CheckResult("phantom hierarchy", same and mono,
                       f"k=1 bit-equal to one-step: {same}; errors k=1,2,4,8: "
                       + ", ".join(f"{e:.2e}" for e in errs))


def _spectral() -> CheckResult:
    cell = AffineCell(0.7 * np.eye(6))
    est = spectral_radius_estimate(cell, np.zeros((1, 6)), np.ones((1, 6)), 50)
    cell2 = AffineCell(np.diag([0.9, 0.1, 0.1]))
    est2 = spectral_radius_estimate(cell2, np.zeros((1, 3)), np.ones((1, 3)), 200)
    ok = abs(est - 0.7) < 1e-3 and abs(est2 - 0.9) < 1e-3
    return CheckResult("spectral radius estimate", ok, f"0.7 I -> {est:.4f}; diag(0.9, 0.1) -> {est2:.4f}")


def tiny_spec(**kw) -> ModelSpec:
    base = dict(vocab=11, d=16, d_ff=32, heads=2, max_len=16, n_backbone=2, n_cell=1)
    base.update(kw)
    return ModelSpec(**base)


def peak_activations(model, inputs, targets) -> int:
    mem = ActivationCounter()
    with observe(memory=mem):
        model.loss_and_grad(inputs, targets)
    for p in model.parameters():
        p.grad = None
    if mem.current != 0:
        raise AssertionError("tapes leaked saved activations")
    return mem.peak


def memory_law() -> tuple[list[int], list[int], float]:
    """Attractor one-step peaks at t_max 4/16/64 and looped peaks at T 2/4/8/16 with affine-fit residual."""
    rng = np.random.default_rng(9)
    inputs = rng.integers(0, 11, (2, 8))
    targets = rng.integers(0, 11, (2, 8))
    att = []
    for t_max in (4, 16, 64):
        spec = tiny_spec(out_std=0.3, solver=SolverConfig(tol=1e-12, t_max=t_max, t_min=4))
        att.append(peak_activations(build_model(spec, 0), inputs, targets))
    Ts = np.array([2, 4, 8, 16])
    loop = [peak_activations(build_model(tiny_spec(family=LOOPED, looped_T=int(t)), 0), inputs, targets)
            for t in Ts]
    coef = np.polyfit(Ts, loop, 1)
    fit = np.polyval(coef, Ts)
    resid = float(np.linalg.norm(fit - loop) / np.linalg.norm(loop))
    return att, loop, resid


def _memory() -> CheckResult:
    att, loop, resid = memory_law()
    ok = len(set(att)) == 1 and resid < 0.01 and loop[-1] > loop[0]
    return CheckResult("activation memory law", ok,
                       f"attractor peaks {att}; looped peaks {loop} (affine residual {resid:.1e})")


def _uniqueness() -> CheckResult:
    rng = np.random.default_rng(10)
    tokens = rng.integers(0, 11, (2, 6))
    tol = 1e-6
    finals = []
    for init in ("zero", "gaussian", "proposal"):
        spec = tiny_spec(init=init, cell_scale=0.3, solver=SolverConfig(tol=tol, t_max=400))
        finals.append(build_model(spec, 0, np.float64).forward(tokens).solver.y_star)
    gap = max(float(np.linalg.norm(a - finals[0]) / np.linalg.norm(finals[0])) for a in finals[1:])
    return CheckResult("equilibrium independent of solver init", gap < 10 * tol, f"max relative gap {gap:.1e}")


def _family_gradients(quick: bool) -> CheckResult:
    from .models import IGNORE_INDEX
    rng = np.random.default_rng(11)
    inputs = rng.integers(0, 11, (2, 8))
    targets = rng.integers(0, 11, (2, 8))
    tight = SolverConfig(tol=1e-13, t_max=300, t_min=1)
    from .implicit import BackwardMode
    ift = BackwardMode("full_ift", adjoint=SolverConfig(PICARD, tol=1e-13, t_max=1000, t_min=1))
    specs = [("plain", tiny_spec(family="plain", out_std=0.3)),
             ("looped", tiny_spec(family=LOOPED, looped_T=3, out_std=0.3))]
    if not quick:
        specs += [("attractor", tiny_spec(out_std=0.3, solver=tight, backward=ift)),
                  ("deq", tiny_spec(family=DEQ, n_backbone=0, n_cell=2, out_std=0.05, solver=tight, backward=ift))]
    details, ok = [], True
    for name, spec in specs:
        model = build_model(spec, 0, np.float64)

        def loss(model=model):
            logits = model.forward(inputs).logits
            return float(T.cross_entropy(Tensor._wrap(logits), targets, IGNORE_INDEX).data)

        worst, _ = check_param_gradients(model.parameters(), lambda m=model: m.loss_and_grad(inputs, targets),
                                         loss, samples=3)
        ok &= worst < 1e-4
        details.append(f"{name} {worst:.1e}")
    return CheckResult("model family gradients", ok, "; ".join(details))


def _checkpoint() -> CheckResult:
    import tempfile
    from pathlib import Path
    from .serialization import load_tensors, save_tensors
    rng = np.random.default_rng(12)
    model = build_model(tiny_spec(out_std=0.3), 0)
    tokens = rng.integers(0, 11, (2, 8))
    before = model.forward(tokens).logits
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.atrk"
        save_tensors(path, model.state_dict())
        fresh = build_model(tiny_spec(out_std=0.3), 1)
        fresh.load_state_dict(load_tensors(path))
    after = fresh.forward(tokens).logits
    return CheckResult("checkpoint round trip", np.array_equal(before, after), "logits bit-identical after reload")


def _sudoku() -> CheckResult:
    from .tasks import gen_sudoku4, is_valid_solution, solve_all
    puzzles = gen_sudoku4(50, (4, 10), 0)
    ok = all(is_valid_solution(p.solution) and len(sols := solve_all(p.givens)) == 1
             and np.array_equal(sols[0], p.solution) for p in puzzles)
    return CheckResult("Sudoku uniqueness oracle", ok, "50 generated puzzles re-solved exhaustively")


CHECKS: list[tuple[str, Callable[..., CheckResult], bool]] = [
    ("ops", _op_gradients, False),
    ("block", _block_gradient, False),
    ("causality", _causality, False),
    ("families", _family_gradients, True),
    ("picard", _picard_rate, False),
    ("anderson", _anderson_oracles, False),
    ("anderson_dominance", _anderson_dominance, False),
    ("ift", _ift, False),
    ("phantom", _phantom, False),
    ("spectral", _spectral, False),
    ("memory", _memory, False),
    ("uniqueness", _uniqueness, False),
    ("checkpoint", _checkpoint, False),
    ("sudoku", _sudoku, False),
]


def run_checks(quick: bool = False, only: Sequence[str] | None = None) -> list[CheckResult]:
    results = []
    for key, fn, takes_quick in CHECKS:
        if only is not None and key not in only:
            continue
        t0 = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                res = fn(quick) if takes_quick else fn()
            except Exception as exc:  # a crashing check is a failing check
                res = CheckResult(key, False, f"raised {type(exc).__name__}: {exc}")
        res.detail += f" [{time.perf_counter() - t0:.1f}s]"
        results.append(res)
    return results
