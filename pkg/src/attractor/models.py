"""Model families: Attractor, finite-unroll Looped, plain Transformer and DEQ.

All families share the tied embedding and the block implementation so that
ablations change exactly one ingredient.  Each model offers

* ``forward(tokens, override_T=None)`` -- inference without recording, and
* ``loss_and_grad(inputs, targets)`` -- one loss evaluation with gradients
  accumulated into the parameters' ``.grad`` by the family's backward rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .implicit import (BackwardMode, FULL_IFT, ImplicitGrad, ONESTEP, PHANTOM,
                       implicit_backward, spectral_radius_estimate)
from .nn import (ADDITIVE, CONCAT, INJECTION_MODES, AttractorCell, Backbone, Module,
                 TiedEmbedding)
from .solver import SolverConfig, SolverResult, root_find
from .tensor import Parameter, Tape, Tensor, flops_scope, no_grad

ATTRACTOR = "attractor"
LOOPED = "looped"
PLAIN = "plain"
DEQ = "deq"
FAMILIES = (ATTRACTOR, LOOPED, PLAIN, DEQ)

INIT_PROPOSAL = "proposal"
INIT_ZERO = "zero"
INIT_GAUSSIAN = "gaussian"
INIT_MODES = (INIT_PROPOSAL, INIT_ZERO, INIT_GAUSSIAN)

IGNORE_INDEX = -100


@dataclass(frozen=True)
class ModelSpec:
    family: str = ATTRACTOR
    vocab: int = 259
    d: int = 64
    d_ff: int = 256
    heads: int = 4
    max_len: int = 64
    n_backbone: int = 2
    n_cell: int = 1
    injection: str = ADDITIVE
    init: str = INIT_PROPOSAL
    init_sigma: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    backward: BackwardMode = field(default_factory=BackwardMode)
    looped_T: int = 8
    deq_separate_head: bool = False
    causal: bool = True
    pos_embedding: bool = False
    # (y, z) latent pair initialised by learned embeddings; no backbone
    deep_supervision: bool = False
    cell_output: str = "scale"
    cell_scale: float = 0.5
    cell_scale_max: float = 0.75
    # std of output projections at init; 0 gives identity blocks
    out_std: float = 0.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        checks = [
            ("model.family", self.family in FAMILIES, f"must be one of {FAMILIES}"),
            ("model.vocab", self.vocab >= 2, "must be at least 2"),
            ("model.d", self.d >= 2, "must be at least 2"),
            ("model.heads", self.heads >= 1 and self.d % self.heads == 0,
             "must divide model.d"),
            ("model.d_ff", self.d_ff >= 1, "must be positive"),
            ("model.max_len", self.max_len >= 1, "must be positive"),
            ("model.n_backbone", self.n_backbone >= 0, "must be non-negative"),
            ("model.n_cell", self.n_cell >= 1 or self.family == PLAIN, "must be at least 1"),
            ("model.injection", self.injection in INJECTION_MODES,
             f"must be one of {INJECTION_MODES}"),
            ("model.init", self.init in INIT_MODES, f"must be one of {INIT_MODES}"),
            ("model.init_sigma", self.init_sigma >= 0, "must be non-negative"),
            ("model.looped_T", self.looped_T >= 1 or self.family != LOOPED, "must be at least 1"),
            ("model.cell_output", self.cell_output in ("scale", "norm"), "must be scale or norm"),
            ("model.cell_scale", 0 <= self.cell_scale <= self.cell_scale_max,
             "must lie in [0, model.cell_scale_max]"),
            ("model.deep_supervision", not self.deep_supervision or self.family == ATTRACTOR,
             "only the attractor family supports deep supervision"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        if (self.d // self.heads) % 2:
            raise ConfigError("model.heads", "head width model.d / model.heads must be even")


@dataclass
class ForwardOutput:
    logits: np.ndarray
    solver: SolverResult | None = None
    proposal: np.ndarray | None = None


@dataclass
class StepStats:
    loss: float
    iters_fwd: int = 0
    iters_bwd: int = 0
    converged: bool = True
    internalization_dist: float = float("nan")
    y_star: np.ndarray | None = None
    proposal: np.ndarray | None = None


def _dist(a: np.ndarray, b: np.ndarray) -> float:
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    return float(np.linalg.norm(a64 - b64) / max(np.linalg.norm(b64), 1e-8))


def _backward_iters(mode: BackwardMode, ig: ImplicitGrad) -> int:
    if mode.kind == ONESTEP:
        return 1
    return ig.iterations if mode.kind == FULL_IFT else mode.k


class Model(Module):
    spec: ModelSpec

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self._spec = spec
        self._seed = seed
        self._dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)
        self.embed = TiedEmbedding(spec.vocab, spec.d, self._rng, self._dtype)
        if spec.pos_embedding:
            self.pos = TiedEmbedding(spec.max_len, spec.d, self._rng, self._dtype)

    @property
    def spec(self) -> ModelSpec:
        return self._spec

    @property
    def dtype(self):
        return self._dtype

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be [B, L], got shape {tokens.shape}")
        if tokens.shape[1] > self.spec.max_len:
            raise ContractError(f"sequence length {tokens.shape[1]} exceeds max length {self.spec.max_len}")
        return tokens

    def embed_inputs(self, tokens) -> Tensor:
        x = self.embed.embed(tokens)
        if self.spec.pos_embedding:
            B, L = tokens.shape
            x = x + self.pos.embed(np.broadcast_to(np.arange(L), (B, L)))
        return x

    def constrain(self) -> None:
        """Project constrained parameters back to their feasible set after an update."""
        cell = getattr(self, "cell", None)
        if cell is not None and hasattr(cell, "scale"):
            np.clip(cell.scale.data, 0.0, self.spec.cell_scale_max, out=cell.scale.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        for name, p in own.items():
            if name not in state:
                raise ContractError(f"parameter {name} missing from checkpoint")
            if state[name].shape != p.shape:
                raise ContractError(f"parameter {name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=self.dtype)
        extra = sorted(set(state) - set(own))
        if extra:
            raise ContractError(f"unexpected parameter {extra[0]} in checkpoint")

    def forward(self, tokens, override_T: int | None = None, keep_trajectory: bool = False) -> ForwardOutput:
        raise NotImplementedError

    def loss_and_grad(self, inputs, targets) -> StepStats:
        raise NotImplementedError

    def _head_loss(self, state: np.ndarray, targets, decode) -> tuple[float, np.ndarray]:
        """Loss on ``decode(state)``; returns ``(loss, dL/dstate)`` and fills decode-side grads."""
        head = Tape()
        try:
            with head, flops_scope("embed"):
                ys = Tensor(state, requires_grad=True)
                loss = T.cross_entropy(decode(ys), targets, IGNORE_INDEX)
            if not np.isfinite(loss.data):
                return float(loss.data), np.zeros_like(state)
            head.backward(loss)
            v = ys.grad if ys.grad is not None else np.zeros_like(state)
        finally:
            head.release()
        return float(loss.data), v


class PlainModel(Model):
    """Embedding, ``n_backbone`` blocks, final norm, tied unembedding."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        super().__init__(spec, seed, dtype)
        s = spec
        self.backbone = Backbone(s.d, s.heads, s.d_ff, s.n_backbone, s.max_len, self._rng,
                                 self.dtype, s.causal, s.out_std, s.norm_eps)

    def logits(self, tokens) -> Tensor:
        with flops_scope("embed"):
            x = self.embed_inputs(tokens)
        with flops_scope("backbone"):
            h = self.backbone(x)
        with flops_scope("embed"):
            return self.embed.unembed(h)

    def forward(self, tokens, override_T=None, keep_trajectory=False) -> ForwardOutput:
        tokens = self._check_tokens(tokens)
        with no_grad():
            return ForwardOutput(self.logits(tokens).data)

    def loss_and_grad(self, inputs, targets) -> StepStats:
        inputs = self._check_tokens(inputs)
        tape = Tape()
        try:
            with tape:
                loss = T.cross_entropy(self.logits(inputs), targets, IGNORE_INDEX)
            if np.isfinite(loss.data):
                tape.backward(loss)
        finally:
            tape.release()
        return StepStats(float(loss.data))


class AttractorModel(Model):
    """Backbone proposal refined to a fixed point of the attractor cell, decoded by ``E^T``."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        super().__init__(spec, seed, dtype)
        s = spec
        self.backbone = Backbone(s.d, s.heads, s.d_ff, s.n_backbone, s.max_len, self._rng,
                                 self.dtype, s.causal, s.out_std, s.norm_eps)
        self.cell = AttractorCell(s.d, s.heads, s.d_ff, s.n_cell, s.max_len, self._rng, self.dtype,
                                  s.injection, s.causal, s.cell_output, s.cell_scale, s.out_std,
                                  s.norm_eps)

    def proposal(self, tokens) -> Tensor:
        with flops_scope("embed"):
            x = self.embed_inputs(tokens)
        with flops_scope("backbone"):
            return self.backbone(x)

    def initial_state(self, y0: np.ndarray) -> np.ndarray:
        mode = self.spec.init
        if mode == INIT_PROPOSAL:
            return y0
        if mode == INIT_ZERO:
            return np.zeros_like(y0)
        rng = np.random.default_rng(self._seed + 1)
        return (self.spec.init_sigma * rng.standard_normal(y0.shape)).astype(y0.dtype)

    def solve(self, y0: np.ndarray, cfg: SolverConfig, keep_trajectory: bool = False) -> SolverResult:
        c = Tensor._wrap(y0)
        return root_find(lambda y: self.cell(y, c), self.initial_state(y0), cfg, keep_trajectory)

    def forward(self, tokens, override_T=None, keep_trajectory=False) -> ForwardOutput:
        tokens = self._check_tokens(tokens)
        with no_grad():
            y0 = self.proposal(tokens).data
            if override_T == 0:
                res = SolverResult(y0, 0, [], False, [y0] if keep_trajectory else None)
            else:
                cfg = self.spec.solver if override_T is None else self.spec.solver.with_budget(override_T)
                res = self.solve(y0, cfg, keep_trajectory)
            with flops_scope("embed"):
                logits = self.embed.unembed(Tensor._wrap(res.y_star)).data
        return ForwardOutput(logits, res, y0)

    def loss_and_grad(self, inputs, targets) -> StepStats:
        inputs = self._check_tokens(inputs)
        outer = Tape()
        try:
            with outer:
                y0 = self.proposal(inputs)
            res = self.solve(y0.data, self.spec.solver)
            loss, v = self._head_loss(res.y_star, targets, self.embed.unembed)
            stats = StepStats(loss, res.iterations, 0, res.converged,
                              _dist(y0.data, res.y_star), res.y_star, y0.data)
            if not np.isfinite(loss):
                return stats
            mode = self.spec.backward
            with flops_scope("cell"):
                ig = implicit_backward(mode, self.cell, v, res.y_star, y0.data, self.cell.parameters())
            stats.iters_bwd = _backward_iters(mode, ig)
            if y0.requires_grad:
                outer.backward(y0, grad=ig.grad_c)
        finally:
            outer.release()
        return stats

    def spectral_radius(self, tokens, iters: int = 30) -> float:
        """Dominant-eigenvalue estimate of the cell Jacobian at the equilibrium for ``tokens``."""
        out = self.forward(tokens)
        return spectral_radius_estimate(self.cell, out.solver.y_star, out.proposal, iters,
                                        np.random.default_rng(self._seed))


class LoopedModel(AttractorModel):
    """Same modules as the Attractor model, unrolled ``looped_T`` times from zero with BPTT."""

    def initial_state(self, y0: np.ndarray) -> np.ndarray:
        return np.zeros_like(y0)

    def _unroll(self, c: Tensor, steps: int, keep_trajectory: bool = False):
        h = Tensor._wrap(np.zeros(c.shape, dtype=c.dtype))
        traj = [h.data] if keep_trajectory else None
        with flops_scope("cell"):
            for _ in range(steps):
                h = self.cell(h, c)
                if traj is not None:
                    traj.append(h.data)
        return h, traj

    def forward(self, tokens, override_T=None, keep_trajectory=False, converge: bool = False) -> ForwardOutput:
        """``override_T`` loops (default ``looped_T``); ``converge=True`` iterates to tolerance."""
        tokens = self._check_tokens(tokens)
        with no_grad():
            c = self.proposal(tokens)
            if converge:
                cfg = replace(self.spec.solver, method="picard", t_min=0)
                res = self.solve(c.data, cfg, keep_trajectory)
                state, solver = res.y_star, res
            else:
                steps = self.spec.looped_T if override_T is None else override_T
                h, traj = self._unroll(c, steps, keep_trajectory)
                state, solver = h.data, None
                if keep_trajectory:
                    solver = SolverResult(state, steps, [], False, traj)
            with flops_scope("embed"):
                logits = self.embed.unembed(Tensor._wrap(state)).data
        return ForwardOutput(logits, solver, c.data)

    def loss_and_grad(self, inputs, targets) -> StepStats:
        inputs = self._check_tokens(inputs)
        tape = Tape()
        try:
            with tape:
                c = self.proposal(inputs)
                h, _ = self._unroll(c, self.spec.looped_T)
                with flops_scope("embed"):
                    loss = T.cross_entropy(self.embed.unembed(h), targets, IGNORE_INDEX)
            if np.isfinite(loss.data):
                tape.backward(loss)
        finally:
            tape.release()
        T_ = self.spec.looped_T
        return StepStats(float(loss.data), T_, T_, True, _dist(c.data, h.data))


class DEQModel(Model):
    """Hidden-state equilibrium ``z = T(z, E(x))`` from ``z0 = 0``; norm + head decoding."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        super().__init__(spec, seed, dtype)
        s = spec
        self.cell = AttractorCell(s.d, s.heads, s.d_ff, s.n_cell, s.max_len, self._rng, self.dtype,
                                  ADDITIVE, s.causal, s.cell_output, s.cell_scale, s.out_std,
                                  s.norm_eps)
        self.out_gain = Parameter(np.ones(s.d, dtype=self.dtype))
        if s.deq_separate_head:
            self.head = Parameter(self._rng.normal(0.0, 1.0 / np.sqrt(s.d), (s.d, s.vocab)).astype(self.dtype))

    def embed_inputs(self, tokens) -> Tensor:
        # unit-scale injection, matching the normalised proposal of the attractor family
        return T.rms_norm(super().embed_inputs(tokens), None, self.spec.norm_eps)

    def decode(self, z: Tensor) -> Tensor:
        h = T.rms_norm(z, self.out_gain, self.spec.norm_eps)
        if self.spec.deq_separate_head:
            return h @ self.head
        return self.embed.unembed(h)

    def solve(self, x: np.ndarray, cfg: SolverConfig, keep_trajectory: bool = False) -> SolverResult:
        c = Tensor._wrap(x)
        return root_find(lambda z: self.cell(z, c), np.zeros_like(x), cfg, keep_trajectory)

    def forward(self, tokens, override_T=None, keep_trajectory=False) -> ForwardOutput:
        tokens = self._check_tokens(tokens)
        with no_grad():
            with flops_scope("embed"):
                x = self.embed_inputs(tokens).data
            if override_T == 0:
                res = SolverResult(np.zeros_like(x), 0, [], False)
            else:
                cfg = self.spec.solver if override_T is None else self.spec.solver.with_budget(override_T)
                res = self.solve(x, cfg, keep_trajectory)
            with flops_scope("embed"):
                logits = self.decode(Tensor._wrap(res.y_star)).data
        return ForwardOutput(logits, res, x)

    def loss_and_grad(self, inputs, targets) -> StepStats:
        inputs = self._check_tokens(inputs)
        outer = Tape()
        try:
            with outer, flops_scope("embed"):
                x = self.embed_inputs(inputs)
            res = self.solve(x.data, self.spec.solver)
            loss, v = self._head_loss(res.y_star, targets, self.decode)
            stats = StepStats(loss, res.iterations, 0, res.converged, float("nan"), res.y_star)
            if not np.isfinite(loss):
                return stats
            mode = self.spec.backward
            with flops_scope("cell"):
                ig = implicit_backward(mode, self.cell, v, res.y_star, x.data, self.cell.parameters())
            stats.iters_bwd = _backward_iters(mode, ig)
            outer.backward(x, grad=ig.grad_c)
        finally:
            outer.release()
        return stats


class ReasoningModel(Model):
    """Grid model with a latent pair ``(y, z)`` refined to a joint fixed point.

    One refinement step is ``z <- N(z + y + x)`` then ``y <- N(y + z)`` where ``N``
    is the shared cell body.  The state is carried across supervision steps and
    starts from learned per-channel embeddings.

    The cell always ends in an RMS norm: with a per-channel scale of 0.5 and
    identity blocks, the coupled linear update has an eigenvalue of exactly one
    and the state drifts instead of settling.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        super().__init__(spec, seed, dtype)
        s = spec
        self.cell = AttractorCell(s.d, s.heads, s.d_ff, s.n_cell, s.max_len, self._rng, self.dtype,
                                  ADDITIVE, s.causal, "norm", s.cell_scale, s.out_std, s.norm_eps)
        self.y_init = Parameter(self._rng.normal(0.0, 1.0, s.d).astype(self.dtype))
        self.z_init = Parameter(self._rng.normal(0.0, 1.0, s.d).astype(self.dtype))

    def embed_inputs(self, tokens) -> Tensor:
        return T.rms_norm(super().embed_inputs(tokens), None, self.spec.norm_eps)

    def step(self, state: Tensor, x: Tensor) -> Tensor:
        d = self.spec.d
        y = T.slice_last(state, 0, d)
        z = T.slice_last(state, d, 2 * d)
        z = self.cell.body(z + y + x)
        y = self.cell.body(y + z)
        return T.concat([y, z])

    def initial_state(self, batch: int, length: int) -> np.ndarray:
        pair = np.concatenate([self.y_init.data, self.z_init.data])
        return np.broadcast_to(pair, (batch, length, 2 * self.spec.d)).copy()

    def decode(self, state: Tensor) -> Tensor:
        return self.embed.unembed(T.slice_last(state, 0, self.spec.d))

    def solve(self, x: np.ndarray, state: np.ndarray, cfg: SolverConfig | None = None) -> SolverResult:
        c = Tensor._wrap(x)
        return root_find(lambda s: self.step(s, c), state, cfg or self.spec.solver)

    def forward(self, tokens, override_T=None, keep_trajectory=False, steps: int = 1,
                state: np.ndarray | None = None) -> ForwardOutput:
        """Run ``steps`` supervision-step solves, each warm-started from the previous state."""
        tokens = self._check_tokens(tokens)
        with no_grad():
            x = self.embed_inputs(tokens).data
            if state is None:
                state = self.initial_state(*tokens.shape)
            cfg = self.spec.solver if override_T is None else self.spec.solver.with_budget(override_T)
            res = None
            for _ in range(steps):
                res = self.solve(x, state, cfg)
                state = res.y_star
            logits = self.decode(Tensor._wrap(state)).data
        return ForwardOutput(logits, res, None)

    def supervise(self, inputs, targets, state: np.ndarray) -> tuple[StepStats, np.ndarray]:
        """One deep-supervision step: solve from ``state``, phantom backward, next state."""
        inputs = self._check_tokens(inputs)
        outer = Tape()
        try:
            with outer, flops_scope("embed"):
                x = self.embed_inputs(inputs)
            with flops_scope("cell"):
                res = self.solve(x.data, state)
            loss, v = self._head_loss(res.y_star, targets, self.decode)
            stats = StepStats(loss, res.iterations, 0, res.converged, float("nan"), res.y_star)
            if not np.isfinite(loss):
                return stats, res.y_star
            mode = self.spec.backward
            if mode.kind != PHANTOM:
                mode = BackwardMode(PHANTOM)
            with flops_scope("cell"):
                ig = implicit_backward(mode, self.step, v, res.y_star, x.data, self.cell.parameters())
            stats.iters_bwd = mode.k
            outer.backward(x, grad=ig.grad_c)
        finally:
            outer.release()
        return stats, res.y_star.copy()

    def loss_and_grad(self, inputs, targets) -> StepStats:
        inputs = self._check_tokens(inputs)
        stats, _ = self.supervise(inputs, targets, self.initial_state(*inputs.shape))
        return stats


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    if spec.family == ATTRACTOR:
        cls = ReasoningModel if spec.deep_supervision else AttractorModel
    else:
        cls = {LOOPED: LoopedModel, PLAIN: PlainModel, DEQ: DEQModel}[spec.family]
    return cls(spec, seed, dtype)


def _block_params(spec: ModelSpec) -> int:
    d = spec.d
    return 4 * d * d + 4 * d + 2 * d * spec.d_ff


def param_count(spec: ModelSpec) -> int:
    """Closed-form trainable-parameter total of ``build_model(spec)``."""
    d, blk = spec.d, _block_params(spec)
    total = spec.vocab * d
    if spec.pos_embedding:
        total += spec.max_len * d
    cell = spec.n_cell * blk + d
    if spec.family == PLAIN:
        return total + spec.n_backbone * blk + d
    if spec.family == DEQ:
        head = spec.vocab * d if spec.deq_separate_head else 0
        return total + cell + d + head
    if spec.deep_supervision:
        return total + cell + 2 * d
    if spec.injection == CONCAT:
        cell += 2 * d * d
    return total + spec.n_backbone * blk + d + cell
