"""Causal Transformer blocks, the backbone stack and the attractor cell."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Parameter, Tensor

INITIAL_ONLY = "initial_only"
CONCAT = "concat"
ADDITIVE = "additive"
INJECTION_MODES = (INITIAL_ONLY, CONCAT, ADDITIVE)


class Module:
    """Parameter container; parameters and submodules are discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self.__dict__.items():
            if name.startswith("_"):
                continue
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape).astype(dtype))


def rope_tables(max_len: int, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.outer(np.arange(max_len, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


class TransformerBlock(Module):
    """Pre-norm block: ``h + Attn(rms(h))`` then ``+ MLP(rms(.))``.

    Attention uses per-head RMS-normalised queries and keys with learned gains and
    rotary positions.  The MLP uses a squared ReLU.
    """

    def __init__(self, d: int, heads: int, d_ff: int, max_len: int, rng: np.random.Generator,
                 dtype=np.float32, causal: bool = True, out_std: float = 0.0, eps: float = 1e-5):
        if d % heads:
            raise ShapeError("model width must be divisible by the head count", (d,), (heads,))
        if (d // heads) % 2:
            raise ShapeError("head width must be even for rotary encoding", (d // heads,))
        self._d, self._heads, self._dh = d, heads, d // heads
        self._max_len, self._causal, self._eps = max_len, causal, eps
        self._cos, self._sin = rope_tables(max_len, self._dh)
        std = 1.0 / math.sqrt(d)
        ones = lambda *s: Parameter(np.ones(s, dtype=dtype))
        self.attn_gain = ones(d)
        self.wq = _normal(rng, (d, d), std, dtype)
        self.wk = _normal(rng, (d, d), std, dtype)
        self.wv = _normal(rng, (d, d), std, dtype)
        self.q_gain = ones(heads, self._dh)
        self.k_gain = ones(heads, self._dh)
        self.wo = _normal(rng, (d, d), out_std, dtype)
        self.mlp_gain = ones(d)
        self.w1 = _normal(rng, (d, d_ff), std, dtype)
        self.w2 = _normal(rng, (d_ff, d), out_std / math.sqrt(d_ff / d) if out_std else 0.0, dtype)

    def attention(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        H, dh = self._heads, self._dh
        cos, sin = self._cos[:L], self._sin[:L]
        q = T.reshape(x @ self.wq, (B, L, H, dh))
        k = T.reshape(x @ self.wk, (B, L, H, dh))
        v = T.reshape(x @ self.wv, (B, L, H, dh))
        q = T.rope(T.rms_norm(q, self.q_gain, self._eps), cos, sin)
        k = T.rope(T.rms_norm(k, self.k_gain, self._eps), cos, sin)
        q = T.transpose(q, (0, 2, 1, 3))
        k = T.transpose(k, (0, 2, 3, 1))
        v = T.transpose(v, (0, 2, 1, 3))
        scores = T.matmul(q, k) * (1.0 / math.sqrt(dh))
        if self._causal:
            scores = T.causal_mask(scores)
        out = T.matmul(T.softmax(scores, axis=-1), v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, L, d))
        return out @ self.wo

    def mlp(self, x: Tensor) -> Tensor:
        return T.relu_squared(x @ self.w1) @ self.w2

    def __call__(self, h: Tensor) -> Tensor:
        if h.ndim != 3 or h.shape[-1] != self._d:
            raise ShapeError("block input must be [B, L, d]", h.shape)
        if h.shape[1] > self._max_len:
            raise ContractError(f"sequence length {h.shape[1]} exceeds max length {self._max_len}")
        h = h + self.attention(T.rms_norm(h, self.attn_gain, self._eps))
        return h + self.mlp(T.rms_norm(h, self.mlp_gain, self._eps))


class TiedEmbedding(Module):
    """One matrix ``E[V, d]`` used for token lookup and for decoding by ``E^T``."""

    def __init__(self, vocab: int, d: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = _normal(rng, (vocab, d), 1.0 / math.sqrt(d), dtype)

    def embed(self, tokens) -> Tensor:
        return T.embedding(self.weight, tokens)

    def unembed(self, y: Tensor) -> Tensor:
        return y @ self.weight.T


class Backbone(Module):
    """A stack of blocks followed by a final RMS norm (the proposal map)."""

    def __init__(self, d: int, heads: int, d_ff: int, n_layers: int, max_len: int,
                 rng: np.random.Generator, dtype=np.float32, causal: bool = True,
                 out_std: float = 0.0, eps: float = 1e-5):
        self._eps = eps
        self.blocks = [TransformerBlock(d, heads, d_ff, max_len, rng, dtype, causal, out_std, eps)
                       for _ in range(n_layers)]
        self.norm_gain = Parameter(np.ones(d, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(h)
        return T.rms_norm(h, self.norm_gain, self._eps)


class AttractorCell(Module):
    """Weight-tied refinement map ``(y, c) -> T(y, c)``.

    The injected input ``u`` depends on the mode: ``y + c`` (additive),
    ``[y; c] W`` (concat, ``W`` initialised to ``[I; I]``) or ``y`` (initial-only).
    ``u`` passes through ``n_layers`` blocks and an output stage: a per-channel
    scale (``output="scale"``) or an RMS norm with gain (``output="norm"``).
    """

    def __init__(self, d: int, heads: int, d_ff: int, n_layers: int, max_len: int,
                 rng: np.random.Generator, dtype=np.float32, injection: str = ADDITIVE,
                 causal: bool = True, output: str = "scale", scale_init: float = 0.5,
                 out_std: float = 0.0, eps: float = 1e-5):
        if injection not in INJECTION_MODES:
            raise ContractError(f"unknown injection mode {injection!r}")
        if output not in ("scale", "norm"):
            raise ContractError(f"unknown cell output stage {output!r}")
        self._d, self._injection, self._output, self._eps = d, injection, output, eps
        self.blocks = [TransformerBlock(d, heads, d_ff, max_len, rng, dtype, causal, out_std, eps)
                       for _ in range(n_layers)]
        if injection == CONCAT:
            eye = np.eye(d, dtype=dtype)
            self.inject_proj = Parameter(np.concatenate([eye, eye], axis=0))
        if output == "scale":
            self.scale = Parameter(np.full(d, scale_init, dtype=dtype))
        else:
            self.norm_gain = Parameter(np.ones(d, dtype=dtype))

    @property
    def injection(self) -> str:
        return self._injection

    def inject(self, y: Tensor, c: Tensor | None) -> Tensor:
        if self._injection == INITIAL_ONLY:
            return y
        if c is None or c.shape != y.shape:
            raise ContractError(f"{self._injection} injection needs a proposal shaped like the state")
        if self._injection == ADDITIVE:
            return y + c
        return T.concat([y, c]) @ self.inject_proj

    def body(self, u: Tensor) -> Tensor:
        for block in self.blocks:
            u = block(u)
        if self._output == "scale":
            return u * self.scale
        return T.rms_norm(u, self.norm_gain, self._eps)

    def __call__(self, y: Tensor, c: Tensor | None = None) -> Tensor:
        if y.shape[-1] != self._d:
            raise ShapeError("cell state width mismatch", y.shape, (self._d,))
        return self.body(self.inject(y, c))
