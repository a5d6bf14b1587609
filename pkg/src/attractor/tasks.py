"""Synthetic tasks with exact oracles and a byte-level text corpus."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError

SUDOKU_BLANK = 0
SUDOKU_VOCAB = 5
BYTE_VOCAB = 257  # 256 bytes plus an end-of-text marker
END_OF_TEXT = 256


@dataclass
class TaskBatch:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not (self.inputs.shape == self.targets.shape == self.mask.shape):
            raise ContractError("inputs, targets and mask must share one shape")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "TaskBatch":
        return TaskBatch(self.inputs[idx], self.targets[idx], self.mask[idx])


def copy_vocab(vocab: int) -> int:
    """Model vocabulary for the copy task: data symbols plus the delimiter."""
    return vocab + 1


def gen_copy(batch: int, L: int, vocab: int, seed: int) -> TaskBatch:
    """Prefix of ``L/2`` random symbols, a delimiter, then the prefix again.

    The full sequence has ``L + 1`` tokens; inputs/targets are its next-token
    shift, so both have length ``L``.  Only targets in the repeated half are scored.
    """
    if L < 2 or L % 2:
        raise ContractError("copy task length must be even and positive")
    half = L // 2
    rng = np.random.default_rng(seed)
    prefix = rng.integers(0, vocab, size=(batch, half))
    delim = np.full((batch, 1), vocab)
    seq = np.concatenate([prefix, delim, prefix], axis=1)
    mask = np.zeros((batch, L), dtype=bool)
    mask[:, half:] = True
    return TaskBatch(seq[:, :-1], seq[:, 1:], mask)


def modadd_vocab(modulus: int) -> int:
    """Residues plus the ``=`` token."""
    return modulus + 1


def modadd_table(modulus: int) -> TaskBatch:
    """Every pair ``(a, b)`` in row-major order."""
    a, b = np.divmod(np.arange(modulus * modulus), modulus)
    return _modadd(a, b, modulus)


def _modadd(a: np.ndarray, b: np.ndarray, m: int) -> TaskBatch:
    n = len(a)
    inputs = np.stack([a, b, np.full(n, m)], axis=1)
    targets = np.zeros((n, 3), dtype=np.int64)
    targets[:, 2] = (a + b) % m
    mask = np.zeros((n, 3), dtype=bool)
    mask[:, 2] = True
    return TaskBatch(inputs, targets, mask)


def gen_modadd(batch: int, modulus: int, seed: int) -> TaskBatch:
    """Sequences ``a b =`` whose scored target at ``=`` is ``(a + b) mod m``."""
    if modulus < 2:
        raise ContractError("modulus must be at least 2")
    rng = np.random.default_rng(seed)
    a = rng.integers(0, modulus, batch)
    b = rng.integers(0, modulus, batch)
    return _modadd(a, b, modulus)


# --------------------------------------------------------------------------
# 4x4 Sudoku

@dataclass(frozen=True)
class SudokuInstance:
    givens: np.ndarray    # [4, 4], 0 = blank
    solution: np.ndarray  # [4, 4], digits 1-4

    def __eq__(self, other):
        return (isinstance(other, SudokuInstance) and np.array_equal(self.givens, other.givens)
                and np.array_equal(self.solution, other.solution))

    def __hash__(self):
        return hash((self.givens.tobytes(), self.solution.tobytes()))


def _box(r: int, c: int) -> int:
    return (r // 2) * 2 + c // 2


def is_valid_solution(grid) -> bool:
    g = np.asarray(grid)
    if g.shape != (4, 4) or not np.all((g >= 1) & (g <= 4)):
        return False
    full = {1, 2, 3, 4}
    for i in range(4):
        if set(g[i]) != full or set(g[:, i]) != full:
            return False
        r, c = divmod(i, 2)
        if set(g[2 * r:2 * r + 2, 2 * c:2 * c + 2].ravel()) != full:
            return False
    return True


def solve_all(givens, limit: int = 2) -> list[np.ndarray]:
    """Exhaustive backtracking; returns up to ``limit`` completions of ``givens``."""
    g = np.array(givens, dtype=np.int64).reshape(4, 4)
    rows = [set() for _ in range(4)]
    cols = [set() for _ in range(4)]
    boxes = [set() for _ in range(4)]
    for r in range(4):
        for c in range(4):
            v = g[r, c]
            if v:
                if v in rows[r] or v in cols[c] or v in boxes[_box(r, c)]:
                    return []
                rows[r].add(v)
                cols[c].add(v)
                boxes[_box(r, c)].add(v)
    holes = [(r, c) for r in range(4) for c in range(4) if g[r, c] == 0]
    found: list[np.ndarray] = []

    def rec(i: int) -> None:
        if len(found) >= limit:
            return
        if i == len(holes):
            found.append(g.copy())
            return
        r, c = holes[i]
        b = _box(r, c)
        for v in range(1, 5):
            if v in rows[r] or v in cols[c] or v in boxes[b]:
                continue
            g[r, c] = v
            rows[r].add(v)
            cols[c].add(v)
            boxes[b].add(v)
            rec(i + 1)
            rows[r].discard(v)
            cols[c].discard(v)
            boxes[b].discard(v)
            g[r, c] = 0

    rec(0)
    return found


def _random_solution(rng: np.random.Generator) -> np.ndarray:
    g = np.zeros((4, 4), dtype=np.int64)

    def rec(i: int) -> bool:
        if i == 16:
            return True
        r, c = divmod(i, 4)
        for v in rng.permutation(4) + 1:
            if (v in g[r] or v in g[:, c]
                    or v in g[2 * (r // 2):2 * (r // 2) + 2, 2 * (c // 2):2 * (c // 2) + 2]):
                continue
            g[r, c] = v
            if rec(i + 1):
                return True
            g[r, c] = 0
        return False

    rec(0)
    return g


def gen_sudoku4(count: int, givens_range: tuple[int, int] = (4, 8), seed: int = 0) -> list[SudokuInstance]:
    """Unique-solution puzzles with a given-count drawn uniformly from ``givens_range``.

    Cells are removed in random order as long as the puzzle keeps exactly one
    solution; if the target count cannot be reached the puzzle is redrawn.
    """
    lo, hi = givens_range
    if not 4 <= lo <= hi <= 16:
        raise ContractError("givens range must satisfy 4 <= lo <= hi <= 16")
    rng = np.random.default_rng(seed)
    out: list[SudokuInstance] = []
    while len(out) < count:
        solution = _random_solution(rng)
        target = int(rng.integers(lo, hi + 1))
        givens = solution.copy()
        n_givens = 16
        for cell in rng.permutation(16):
            if n_givens == target:
                break
            r, c = divmod(int(cell), 4)
            keep = givens[r, c]
            givens[r, c] = SUDOKU_BLANK
            if len(solve_all(givens)) == 1:
                n_givens -= 1
            else:
                givens[r, c] = keep
        if n_givens == target:
            out.append(SudokuInstance(givens, solution))
    return out


def sudoku_batch(instances: Sequence[SudokuInstance]) -> TaskBatch:
    """16-token grids; only blank cells are scored."""
    inputs = np.stack([p.givens.reshape(16) for p in instances])
    targets = np.stack([p.solution.reshape(16) for p in instances])
    return TaskBatch(inputs, targets, inputs == SUDOKU_BLANK)


def grid_accuracy(logits: np.ndarray, batch: TaskBatch) -> float:
    """Fraction of puzzles whose every scored cell is predicted exactly."""
    pred = np.argmax(logits, axis=-1)
    wrong = (pred != batch.targets) & batch.mask
    return float(np.mean(~wrong.any(axis=1)))


def save_sudoku(path, instances: Sequence[SudokuInstance]) -> None:
    lines = ["".join(map(str, p.givens.ravel())) + "\t" + "".join(map(str, p.solution.ravel()))
             for p in instances]
    try:
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise OSError(f"cannot write puzzles to {path}: {exc}") from exc


def load_sudoku(path) -> list[SudokuInstance]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read puzzles from {path}: {exc}") from exc
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        givens, _, solution = line.partition("\t")
        if len(givens) != 16 or len(solution) != 16 or not (givens + solution).isdigit():
            raise ContractError(f"{path}:{n}: expected 16 digits, a tab, 16 digits")
        out.append(SudokuInstance(np.array([int(ch) for ch in givens]).reshape(4, 4),
                                  np.array([int(ch) for ch in solution]).reshape(4, 4)))
    return out


# --------------------------------------------------------------------------
# byte corpus

def tokenize(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> str:
    arr = np.asarray(tokens).ravel()
    return bytes(int(t) for t in arr if t < 256).decode("utf-8")


def load_corpus(path, seq_len: int) -> TaskBatch:
    """Non-overlapping windows of ``seq_len + 1`` bytes as next-token pairs."""
    if seq_len < 1:
        raise ContractError("sequence length must be positive")
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise OSError(f"corpus {path} is not valid UTF-8: {exc}") from exc
    tokens = tokenize(raw)
    n = (len(tokens) - 1) // seq_len
    if n < 1:
        raise ContractError(f"corpus {path} is shorter than one window of {seq_len + 1} bytes")
    inputs = np.stack([tokens[i * seq_len:(i + 1) * seq_len] for i in range(n)])
    targets = np.stack([tokens[i * seq_len + 1:(i + 1) * seq_len + 1] for i in range(n)])
    return TaskBatch(inputs, targets, np.ones_like(inputs, dtype=bool))


def iterate_batches(data: TaskBatch, batch_size: int, seed: int) -> Iterator[TaskBatch]:
    """Endless shuffled minibatches; the order depends only on ``seed``."""
    rng = np.random.default_rng(seed)
    n = len(data)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield data.take(perm[i:i + batch_size])
