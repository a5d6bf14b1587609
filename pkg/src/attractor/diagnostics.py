"""Observers and metrics: activation and FLOP counters, internalization, PCA, export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

COLUMNS = ("step", "loss", "iters_fwd", "iters_bwd", "internalization_dist", "act_peak",
           "flops_backbone", "flops_cell", "lr", "grad_norm", "rho_estimate")


class ActivationCounter:
    """Saved-element bookkeeping: tapes allocate when recording and free on release."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def allocate(self, n: int) -> None:
        self.current += int(n)
        self.peak = max(self.peak, self.current)

    def free(self, n: int) -> None:
        self.current -= int(n)
        if self.current < 0:
            raise ContractError("activation counter freed more than it allocated")

    def reset(self) -> None:
        self.current = 0
        self.peak = 0


class FlopsCounter:
    """Analytic multiply-add counts split by scope label."""

    def __init__(self):
        self.by_scope: dict[str, int] = {}

    def add(self, scope: str, n: int) -> None:
        if n < 0:
            raise ContractError("negative FLOP count")
        self.by_scope[scope] = self.by_scope.get(scope, 0) + n

    def get(self, scope: str) -> int:
        return self.by_scope.get(scope, 0)

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def reset(self) -> None:
        self.by_scope.clear()


def count_activations(tape) -> int:
    """Saved-value elements held by ``tape`` (parameters excluded)."""
    return sum(node.saved_elements for node in tape.nodes)


@dataclass
class TrainRecord:
    step: int
    loss: float
    iters_fwd: int = 0
    iters_bwd: int = 0
    internalization_dist: float = float("nan")
    act_peak: int = 0
    flops_backbone: int = 0
    flops_cell: int = 0
    lr: float = 0.0
    grad_norm: float = 0.0
    rho_estimate: float = float("nan")


_INT_COLUMNS = {f.name for f in fields(TrainRecord) if f.type in ("int", int)}


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    return format(value, ".9g")


def _row(record) -> dict:
    row = asdict(record) if isinstance(record, TrainRecord) else dict(record)
    return {key: row[key] for key in row}


def export_metrics(records: Sequence, path, fmt: str | None = None) -> None:
    """Write ``records`` (TrainRecords or dicts with shared keys) as CSV or JSONL.

    Column order is the dataclass order for TrainRecords, otherwise the first
    record's key order.  Floats carry 9 significant digits.
    """
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix == ".jsonl" else "csv")
    rows = [_row(r) for r in records]
    columns = list(rows[0]) if rows else list(COLUMNS)
    buf = io.StringIO()
    if fmt == "csv":
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) if not isinstance(row[c], str) else row[c] for c in columns])
    elif fmt == "jsonl":
        for row in rows:
            items = []
            for c in columns:
                v = row[c]
                if isinstance(v, str):
                    items.append(f"{json.dumps(c)}: {json.dumps(v)}")
                else:
                    text = _fmt(v)
                    items.append(f"{json.dumps(c)}: {json.dumps(text) if text == 'nan' else text}")
            buf.write("{" + ", ".join(items) + "}\n")
    else:
        raise ContractError(f"unknown metrics format {fmt!r}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def _parse(text: str):
    if text == "nan":
        return float("nan")
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_metrics(path) -> list[dict]:
    """Parse a file written by :func:`export_metrics` back into dicts."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read metrics from {path}: {exc}") from exc
    if path.suffix == ".jsonl":
        out = []
        for line in text.splitlines():
            row = json.loads(line)
            out.append({k: float("nan") if v == "nan" else v for k, v in row.items()})
        return out
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None) or []
    return [{k: _parse(v) for k, v in zip(header, row)} for row in reader]


def records_from_rows(rows: Iterable[dict]) -> list[TrainRecord]:
    return [TrainRecord(**{k: (int(v) if k in _INT_COLUMNS else v) for k, v in row.items()})
            for row in rows]


# --------------------------------------------------------------------------
# equilibrium internalization

SWEEP_T = (0, 1, 2, 4, 8)


@dataclass
class InternalizationReport:
    distance: float
    iterations: float
    converged_fraction: float
    loss_at_T: dict

    def as_row(self) -> dict:
        row = {"internalization_dist": self.distance, "iters_to_tol": self.iterations,
               "converged_fraction": self.converged_fraction}
        row.update({f"loss_T{k}": v for k, v in self.loss_at_T.items()})
        return row


def _masked_ce(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, np.where(mask, targets, 0)[..., None], axis=-1)[..., 0]
    n = int(mask.sum())
    return float(-(picked * mask).sum() / n) if n else 0.0


def internalization_metrics(model, batches, sweep: Sequence[int] = SWEEP_T) -> InternalizationReport:
    """Proposal-to-equilibrium distance, iterations to tolerance and loss per budget ``T``.

    ``batches`` yields objects with ``inputs``, ``targets`` and ``mask``.
    ``loss_at_T`` keys are the integers of ``sweep`` plus ``"converged"``.
    """
    dists, iters, conv = [], [], []
    losses: dict = {t: [] for t in sweep}
    losses["converged"] = []
    for batch in batches:
        out = model.forward(batch.inputs)
        if out.solver is None or out.proposal is None:
            raise ContractError("internalization metrics need an attractor model")
        y0, ys = out.proposal, out.solver.y_star
        for b in range(y0.shape[0]):
            dists.append(float(np.linalg.norm(y0[b].astype(np.float64) - ys[b])
                               / max(np.linalg.norm(ys[b].astype(np.float64)), 1e-8)))
        iters.append(out.solver.iterations)
        conv.append(out.solver.converged)
        losses["converged"].append(_masked_ce(out.logits, batch.targets, batch.mask))
        for t in sweep:
            losses[t].append(_masked_ce(model.forward(batch.inputs, override_T=t).logits,
                                        batch.targets, batch.mask))
    return InternalizationReport(float(np.mean(dists)), float(np.mean(iters)), float(np.mean(conv)),
                                 {k: float(np.mean(v)) for k, v in losses.items()})


# --------------------------------------------------------------------------
# PCA of solver trajectories

def _top_eigvecs(cov: np.ndarray, k: int, iters: int, tol: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Leading ``k`` eigenvectors of a PSD matrix by power iteration with deflation."""
    n = cov.shape[0]
    vecs = []
    work = cov.copy()
    for _ in range(k):
        v = rng.standard_normal(n)
        for basis in vecs:
            v -= (v @ basis) * basis
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = work @ v
            for basis in vecs:
                w -= (w @ basis) * basis
            nw = np.linalg.norm(w)
            if nw < 1e-300:
                break
            w /= nw
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        vecs.append(v)
        lam = float(v @ cov @ v)
        work = work - lam * np.outer(v, v)
    return np.stack(vecs, axis=1)


def pca2_trajectory(trajectory: Sequence[np.ndarray], position: int = -1, batch_index: int = 0,
                    iters: int = 100, tol: float = 1e-9, seed: int = 0) -> np.ndarray:
    """Project the states at one sequence position onto their top-2 principal directions.

    Returns an array of shape ``[len(trajectory), 2]``.
    """
    if len(trajectory) < 3:
        raise ContractError("PCA of a trajectory needs at least 3 iterates")
    X = np.stack([np.asarray(getattr(s, "data", s))[batch_index, position]
                  for s in trajectory]).astype(np.float64)
    X = X - X.mean(axis=0)
    cov = X.T @ X / len(X)
    basis = _top_eigvecs(cov, 2, iters, tol, np.random.default_rng(seed))
    return X @ basis
