"""Dense tensors with tape-based reverse-mode differentiation.

Values are numpy arrays.  Operations executed while a :class:`Tape` is active
and that touch at least one ``requires_grad`` input are appended to the tape
together with the arrays their backward rule needs.  ``Tape.backward`` walks the
records in reverse once and accumulates gradients into leaf tensors.

Outside of an active tape every operation is a plain numpy computation, which
is how the fixed-point solvers evaluate the attractor cell without storing
anything.

Two observers can be attached through context variables: an activation counter
(saved-element bookkeeping) and a FLOP counter.  They never alter results.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError, TargetIndexError

_node_ids = itertools.count(1)

_TAPE: ContextVar["Tape | None"] = ContextVar("attractor_tape", default=None)
_MEMORY: ContextVar[object | None] = ContextVar("attractor_memory", default=None)
_FLOPS: ContextVar[object | None] = ContextVar("attractor_flops", default=None)
_SCOPE: ContextVar[str] = ContextVar("attractor_flops_scope", default="other")


class Tensor:
    """A dense real array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "node", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node = next(_node_ids) if requires_grad else None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(Tensor)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ContractError(".T is defined for rank-2 tensors only")
        return transpose(self, (1, 0))


class Parameter(Tensor):
    """A trainable leaf.  Its storage is not counted as a saved activation."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


@dataclass
class Node:
    op: str
    out: int
    parents: tuple[int | None, ...]
    backward: Callable
    saved: tuple
    saved_elements: int


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations run inside the block are recorded.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self.saved_elements = 0
        self._memory = None
        self._tokens: list = []
        self.released = False

    def __enter__(self) -> "Tape":
        if self.released:
            raise ContractError("cannot reuse a released tape")
        self._tokens.append(_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, out: Tensor, parents: Sequence[Tensor], backward, saved) -> None:
        ids = []
        param_data = set()
        for p in parents:
            if p.requires_grad:
                ids.append(p.node)
                if p.node not in self._produced:
                    self.leaves[p.node] = p
                if isinstance(p, Parameter):
                    param_data.add(id(p.data))
            else:
                ids.append(None)
        n_saved = sum(a.size for a in saved if id(a) not in param_data)
        out.requires_grad = True
        out.node = next(_node_ids)
        self._produced.add(out.node)
        self.nodes.append(Node(op, out.node, tuple(ids), backward, tuple(saved), n_saved))
        self.saved_elements += n_saved
        mem = _MEMORY.get()
        if mem is not None:
            if self._memory is None:
                self._memory = mem
            if self._memory is mem:
                mem.allocate(n_saved)

    def _sweep(self, output: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
        if not output.requires_grad:
            raise ContractError("output is not tracked on any tape")
        if output.node not in self._produced and output.node not in self.leaves:
            raise ContractError("output was not produced on this tape")
        grads: dict[int, np.ndarray] = {output.node: seed}
        for node in reversed(self.nodes):
            g = grads.get(node.out)
            if g is None:
                continue
            if node.out != output.node:
                del grads[node.out]
            parent_grads = node.backward(g, *node.saved)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg
        return grads

    def _seed(self, output: Tensor, grad) -> np.ndarray:
        if grad is None:
            if output.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {output.shape}")
            return np.ones_like(output.data)
        seed = np.asarray(grad, dtype=output.dtype)
        if seed.shape != output.shape:
            raise ShapeError("seed gradient shape mismatch", seed.shape, output.shape)
        return seed

    def backward(self, output: Tensor, grad=None) -> None:
        """Accumulate d(output)/d(leaf) into every reachable leaf's ``.grad``.

        ``grad`` seeds a non-scalar output (a vector-Jacobian product).
        """
        grads = self._sweep(output, self._seed(output, grad))
        for nid, leaf in self.leaves.items():
            g = grads.get(nid)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    def vjp(self, output: Tensor, grad, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Return ``grad · d(output)/d(w)`` for each tensor in ``wrt``.

        Leaf ``.grad`` fields are left untouched.
        """
        grads = self._sweep(output, self._seed(output, grad))
        out = []
        for w in wrt:
            g = grads.get(w.node) if w.requires_grad else None
            out.append(np.zeros_like(w.data) if g is None else g)
        return out

    def release(self) -> None:
        """Drop saved values and return their count to the activation counter."""
        if self._memory is not None and not self.released:
            self._memory.free(self.saved_elements)
        self.nodes = []
        self.released = True


def active_tape() -> Tape | None:
    return _TAPE.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on any tape."""
    token = _TAPE.set(None)
    try:
        yield
    finally:
        _TAPE.reset(token)


def backward(loss: Tensor, grad=None, tape: Tape | None = None) -> None:
    """Backpropagate ``loss`` over ``tape`` (default: the active tape)."""
    tape = tape if tape is not None else _TAPE.get()
    if tape is None:
        raise ContractError("no active tape")
    tape.backward(loss, grad)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# observers -----------------------------------------------------------------

@contextmanager
def observe(memory=None, flops=None) -> Iterator[None]:
    """Attach an activation counter and/or a FLOP counter for the block."""
    tokens = []
    if memory is not None:
        tokens.append((_MEMORY, _MEMORY.set(memory)))
    if flops is not None:
        tokens.append((_FLOPS, _FLOPS.set(flops)))
    try:
        yield
    finally:
        for var, tok in reversed(tokens):
            var.reset(tok)


@contextmanager
def flops_scope(label: str) -> Iterator[None]:
    token = _SCOPE.set(label)
    try:
        yield
    finally:
        _SCOPE.reset(token)


def count_flops(n: int) -> None:
    counter = _FLOPS.get()
    if counter is not None:
        counter.add(_SCOPE.get(), int(n))


# op plumbing ---------------------------------------------------------------

def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], backward, saved=()) -> Tensor:
    out = Tensor._wrap(data)
    tape = _TAPE.get()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                tape.record(op, out, parents, backward, saved)
                break
    return out


def _lead_sum(g: np.ndarray, ndim: int) -> np.ndarray:
    return g.reshape(-1, *g.shape[g.ndim - ndim:]).sum(axis=0)


# differentiable ops --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner dimensions disagree", a.shape, b.shape)
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul batch dimensions disagree", a.shape, b.shape)
    out = a.data @ b.data
    count_flops(2 * out.size * a.shape[-1])
    shared = b.ndim == 2

    def bwd(g, av, bv):
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), bwd, (a.data, b.data))


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may be a scalar or a vector over the last axis."""
    if not isinstance(b, Tensor):
        out = a.data + np.asarray(b, dtype=a.dtype)
        count_flops(out.size)
        return _emit("add_scalar", out, (a,), lambda g: (g,))
    if a.shape == b.shape:
        out = a.data + b.data
        count_flops(out.size)
        return _emit("add", out, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.shape[-1:] == b.shape:
        out = a.data + b.data
        count_flops(out.size)
        return _emit("add_bias", out, (a, b), lambda g: (g, _lead_sum(g, 1)))
    raise ShapeError("add operands are not broadcast-compatible", a.shape, b.shape)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape:
        raise ShapeError("sub operands differ in shape", a.shape, b.shape)
    out = a.data - b.data
    count_flops(out.size)
    return _emit("sub", out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a scalar or a vector over the last axis."""
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        out = a.data * c
        count_flops(out.size)
        return _emit("mul_scalar", out, (a,), lambda g: (g * c,))
    if a.shape == b.shape:
        out = a.data * b.data
        count_flops(out.size)
        return _emit("mul", out, (a, b), lambda g, av, bv: (g * bv, g * av), (a.data, b.data))
    if b.ndim == 1 and a.shape[-1:] == b.shape:
        out = a.data * b.data
        count_flops(out.size)

        def bwd(g, av, bv):
            return g * bv, _lead_sum(g * av, 1)

        return _emit("mul_bias", out, (a, b), bwd, (a.data, b.data))
    raise ShapeError("mul operands are not broadcast-compatible", a.shape, b.shape)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    count_flops(a.size)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    count_flops(a.size)
    return _emit("mean", out, (a,), lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    if axis not in (-1, parts[0].ndim - 1):
        raise ContractError("concat is only supported along the last axis")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError("concat leading dimensions differ", parts[0].shape, p.shape)
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _emit("concat", out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=-1)))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    shape, dtype = a.shape, a.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", a.data[..., start:stop].copy(), (a,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilised softmax along ``axis``."""
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    count_flops(5 * y.size)

    def bwd(g, yv):
        return (yv * (g - (g * yv).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), bwd, (y,))


_tril_cache: dict[int, np.ndarray] = {}


def _tril(n: int) -> np.ndarray:
    m = _tril_cache.get(n)
    if m is None:
        m = np.tril(np.ones((n, n), dtype=bool))
        _tril_cache[n] = m
    return m


def causal_mask(scores: Tensor) -> Tensor:
    """Set entries above the diagonal of the trailing square to -inf."""
    n = scores.shape[-1]
    if scores.shape[-2] != n:
        raise ShapeError("causal mask needs square trailing dims", scores.shape)
    keep = _tril(n)
    out = np.where(keep, scores.data, -np.inf).astype(scores.dtype, copy=False)
    return _emit("causal_mask", out, (scores,), lambda g: (np.where(keep, g, 0.0).astype(g.dtype),))


def rms_norm(x: Tensor, gain: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to unit root-mean-square, then scale by ``gain``.

    ``gain`` covers the trailing dims of ``x`` (e.g. ``(d,)`` or ``(heads, d_head)``).
    """
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    n = x.data * r
    count_flops(4 * x.size)
    if gain is None:
        def bwd_plain(g, nv, rv):
            return (rv * (g - nv * (g * nv).mean(axis=-1, keepdims=True)),)

        return _emit("rms_norm", n, (x,), bwd_plain, (n, r))
    if x.shape[x.ndim - gain.ndim:] != gain.shape:
        raise ShapeError("rms_norm gain does not match trailing dims", x.shape, gain.shape)
    out = n * gain.data
    k = gain.ndim

    def bwd(g, nv, rv, gv):
        gn = g * gv
        gx = rv * (gn - nv * (gn * nv).mean(axis=-1, keepdims=True))
        return gx, _lead_sum(g * nv, k)

    return _emit("rms_norm", out, (x, gain), bwd, (n, r, gain.data))


def relu_squared(x: Tensor) -> Tensor:
    """``max(x, 0) ** 2``; the derivative at 0 is 0."""
    pos = np.maximum(x.data, 0)
    count_flops(2 * x.size)
    return _emit("relu2", pos * pos, (x,), lambda g, p: (2.0 * p * g,), (pos,))


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding of ``x[B, L, H, D]`` with ``cos, sin`` of shape ``(L, D/2)``.

    Feature pairs are (i, i + D/2).
    """
    half = x.shape[-1] // 2
    c = cos[:, None, :].astype(x.dtype, copy=False)
    s = sin[:, None, :].astype(x.dtype, copy=False)
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)
    count_flops(3 * x.size)

    def bwd(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * c + g2 * s, g2 * c - g1 * s], axis=-1),)

    return _emit("rope", out, (x,), bwd)


def embedding(table: Tensor, tokens) -> Tensor:
    """Row lookup ``table[tokens]``."""
    idx = np.asarray(tokens)
    if idx.dtype.kind not in "iu":
        raise ContractError("tokens must be integers")
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise TargetIndexError(f"token id outside [0, {v})")
    shape = table.shape

    def bwd(g, ids):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.ravel(), g.reshape(-1, shape[1]))
        return (gt,)

    return _emit("embedding", table.data[idx], (table,), bwd, (idx,))


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ignored.

    Returns 0 (with zero gradient) when every position is ignored.
    """
    t = np.asarray(targets)
    if t.shape != logits.shape[:-1]:
        raise ShapeError("targets must match logits without the class axis", t.shape, logits.shape)
    v = logits.shape[-1]
    valid = t != ignore_index
    bad = valid & ((t < 0) | (t >= v))
    if bad.any():
        raise TargetIndexError(f"target {int(t[bad][0])} outside [0, {v})")
    n = int(valid.sum())
    x = logits.data
    dtype = x.dtype
    if n == 0:
        return _emit("cross_entropy", np.zeros((), dtype=dtype), (logits,),
                     lambda g: (np.zeros(logits.shape, dtype=dtype),))
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    logp = z - np.log(s)
    safe_t = np.where(valid, t, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = np.asarray(-(picked * valid).sum() / n, dtype=dtype)
    count_flops(5 * x.size)

    def bwd(g, pv, tv, mask):
        d = pv.copy()
        np.put_along_axis(d, tv[..., None], np.take_along_axis(d, tv[..., None], axis=-1) - 1.0, axis=-1)
        d *= (mask[..., None] * (g / n))
        return (d.astype(dtype, copy=False),)

    return _emit("cross_entropy", loss, (logits,), bwd, (p, safe_t, valid))
