"""Experiment orchestration shared by the command-line entry points."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_model, restore_trainer, save_model
from .config import ExperimentConfig
from .diagnostics import TrainRecord, _masked_ce, export_metrics, read_metrics, records_from_rows
from .errors import ContractError
from .implicit import FULL_IFT, ONESTEP, PHANTOM, BackwardMode
from .models import (ATTRACTOR, DEQ, INIT_GAUSSIAN, INIT_PROPOSAL, INIT_ZERO, PLAIN,
                     DEQModel, LoopedModel, Model, PlainModel, ReasoningModel, build_model,
                     param_count)
from .nn import ADDITIVE, CONCAT, INITIAL_ONLY
from .tasks import (TaskBatch, gen_copy, gen_modadd, gen_sudoku4, grid_accuracy, load_corpus,
                    load_sudoku, save_sudoku, solve_all, sudoku_batch)
from .training import Trainer

CHECKPOINT = "checkpoint.ckpt"
FINAL = "final.ckpt"


def _stream_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class TaskData:
    """Training batches as a pure function of the step index, plus a fixed eval set."""

    def __init__(self, cfg: ExperimentConfig, cache_dir: Path | None = None):
        self.cfg = cfg
        t = cfg.task
        self.batch_size = cfg.train.batch_size
        self.pool: TaskBatch | None = None
        if t.kind == "copy":
            self.eval = gen_copy(t.eval_size, t.copy_len, t.copy_vocab, _stream_seed(t.data_seed, 1))
        elif t.kind == "modadd":
            self.eval = gen_modadd(t.eval_size, t.modulus, _stream_seed(t.data_seed, 1))
        elif t.kind == "sudoku":
            train, test = sudoku_sets(t.sudoku_train, t.sudoku_test, (t.givens_min, t.givens_max),
                                      t.data_seed, cache_dir)
            self.pool, self.eval = sudoku_batch(train), sudoku_batch(test)
        else:
            data = load_corpus(t.corpus_path, t.seq_len)
            n_eval = max(1, len(data) // 10)
            if len(data) < 2:
                raise ContractError("corpus too small for a train/eval split")
            self.pool = data.take(np.arange(len(data) - n_eval))
            self.eval = data.take(np.arange(len(data) - n_eval, len(data)))

    def batch_at(self, step: int) -> TaskBatch:
        t, B = self.cfg.task, self.batch_size
        seed = _stream_seed(t.data_seed, 0, step)
        if t.kind == "copy":
            return gen_copy(B, t.copy_len, t.copy_vocab, seed)
        if t.kind == "modadd":
            return gen_modadd(B, t.modulus, seed)
        n = len(self.pool)
        per_epoch = max(1, n // B)
        epoch, i = divmod(step, per_epoch)
        perm = np.random.default_rng(_stream_seed(t.data_seed, 2, epoch)).permutation(n)
        return self.pool.take(perm[i * B:(i + 1) * B] if n >= B else perm)


def sudoku_sets(n_train: int, n_test: int, givens_range, seed: int, cache_dir: Path | None = None):
    """Disjoint train/test puzzle sets, cached as text and re-verified by exhaustive solve."""
    paths = None
    if cache_dir is not None:
        tag = f"{seed}_{givens_range[0]}-{givens_range[1]}"
        paths = (cache_dir / f"sudoku_train_{n_train}_{tag}.txt", cache_dir / f"sudoku_test_{n_test}_{tag}.txt")
        if all(p.exists() for p in paths):
            train, test = load_sudoku(paths[0]), load_sudoku(paths[1])
            for p in train + test:
                found = solve_all(p.givens)
                if len(found) != 1 or not np.array_equal(found[0], p.solution):
                    raise ContractError(f"cached puzzle fails the uniqueness oracle in {paths[0].parent}")
            return train, test
    pool = gen_sudoku4(n_train, givens_range, seed)
    seen = {p.givens.tobytes() for p in pool}
    test = []
    k = 1
    while len(test) < n_test:
        for p in gen_sudoku4(n_test, givens_range, _stream_seed(seed, k)):
            if p.givens.tobytes() not in seen and len(test) < n_test:
                seen.add(p.givens.tobytes())
                test.append(p)
        k += 1
    if paths is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        save_sudoku(paths[0], pool)
        save_sudoku(paths[1], test)
    return pool, test


def metrics_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / f"metrics.{cfg.diag.metrics_format}"


@dataclass
class TrainResult:
    model: Model
    records: list[TrainRecord]
    trainer: Trainer


def run_training(cfg: ExperimentConfig, resume: str | Path | None = None,
                 log: Callable[[str], None] | None = None, stop_after: int | None = None,
                 dtype=np.float32) -> TrainResult:
    """Train per ``cfg`` writing metrics and checkpoints under ``cfg.out``.

    ``resume`` continues from a checkpoint's parameters, optimizer state and
    step; the metrics file is truncated to that step and extended.
    ``stop_after`` ends the run early after that many steps (used to simulate
    an interruption).
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = TaskData(cfg, out)
    records: list[TrainRecord] = []
    if resume is not None:
        model, _, raw = load_model(resume, cfg, dtype)
        trainer = Trainer(model, cfg.train)
        restore_trainer(trainer, raw)
        if metrics_path(cfg).exists():
            records = [r for r in records_from_rows(read_metrics(metrics_path(cfg))) if r.step < trainer.step]
    else:
        model = build_model(cfg.model, cfg.seed, dtype)
        trainer = Trainer(model, cfg.train)
    ckpt_every = cfg.train.checkpoint_interval
    done = 0
    try:
        while trainer.step < cfg.train.steps:
            if stop_after is not None and done >= stop_after:
                break
            rec = trainer.train_step(data.batch_at(trainer.step))
            records.append(rec)
            done += 1
            if log and cfg.diag.log_interval and rec.step % cfg.diag.log_interval == 0:
                log(f"step {rec.step} loss {rec.loss:.4f} iters {rec.iters_fwd} lr {rec.lr:.3g}")
            if ckpt_every and trainer.step % ckpt_every == 0:
                save_model(out / CHECKPOINT, model, cfg, trainer)
                export_metrics(records, metrics_path(cfg), cfg.diag.metrics_format)
    finally:
        export_metrics(records, metrics_path(cfg), cfg.diag.metrics_format)
    save_model(out / CHECKPOINT, model, cfg, trainer)
    if trainer.step >= cfg.train.steps:
        save_model(out / FINAL, model, cfg, trainer)
    return TrainResult(model, records, trainer)


# --------------------------------------------------------------------------
# evaluation

def _chunks(batch: TaskBatch, size: int = 256):
    for i in range(0, len(batch), size):
        yield batch.take(np.arange(i, min(i + size, len(batch))))


def evaluate(model: Model, batch: TaskBatch, override_T: int | None = None, converge: bool = False,
             grid: bool = False, supervision_steps: int = 1) -> dict:
    """Masked loss (and exact-grid accuracy for grids) at one iteration budget."""
    losses, accs, iters, conv, weights = [], [], [], [], []
    for part in _chunks(batch):
        if isinstance(model, LoopedModel):
            out = model.forward(part.inputs, override_T=override_T, converge=converge)
        elif isinstance(model, ReasoningModel):
            out = model.forward(part.inputs, override_T=override_T, steps=supervision_steps)
        else:
            out = model.forward(part.inputs, override_T=override_T)
        losses.append(_masked_ce(out.logits, part.targets, part.mask))
        weights.append(int(part.mask.sum()))
        if grid:
            accs.append(grid_accuracy(out.logits, part) * len(part))
        if out.solver is not None:
            iters.append(out.solver.iterations)
            conv.append(out.solver.converged)
    row = {"loss": float(np.average(losses, weights=weights))}
    if grid:
        row["accuracy"] = float(np.sum(accs) / len(batch))
    row["iters"] = float(np.mean(iters)) if iters else float("nan")
    row["converged"] = float(np.mean(conv)) if conv else float("nan")
    return row


def t_sweep_rows(model: Model, batch: TaskBatch, t_sweep: Sequence[int], grid: bool = False,
                 supervision_steps: int = 1) -> list[dict]:
    """One row per budget ``T`` plus a final ``converged`` row."""
    if isinstance(model, PlainModel):
        if t_sweep:
            warnings.warn("plain transformer has no iteration budget; ignoring the T sweep",
                          UserWarning, stacklevel=2)
        return [{"T": "none", **evaluate(model, batch, grid=grid)}]
    rows = [{"T": str(t), **evaluate(model, batch, override_T=t, grid=grid,
                                     supervision_steps=supervision_steps)} for t in t_sweep]
    rows.append({"T": "converged", **evaluate(model, batch, converge=True, grid=grid,
                                              supervision_steps=supervision_steps)})
    return rows


# --------------------------------------------------------------------------
# ablation grids

GRIDS = ("deq", "injection", "backward", "init")


def grid_variants(cfg: ExperimentConfig, grid: str) -> list[tuple[str, ExperimentConfig]]:
    m = cfg.model
    base = replace(m, family=ATTRACTOR, deep_supervision=False)
    if grid == "injection":
        pairs = [(name, replace(base, injection=mode)) for name, mode in
                 (("initial_only", INITIAL_ONLY), ("concat", CONCAT), ("additive", ADDITIVE))]
    elif grid == "backward":
        pairs = [(name, replace(base, backward=replace(m.backward, kind=kind))) for name, kind in
                 (("full_ift", FULL_IFT), (f"phantom_k{m.backward.k}", PHANTOM), ("onestep", ONESTEP))]
    elif grid == "init":
        pairs = [(name, replace(base, init=mode)) for name, mode in
                 (("zero", INIT_ZERO), ("gaussian", INIT_GAUSSIAN), ("proposal", INIT_PROPOSAL))]
    elif grid == "deq":
        depth = m.n_backbone + m.n_cell
        deq = replace(base, family=DEQ, n_backbone=0, n_cell=depth)
        pairs = [("attractor", base), ("deq_separate_head", replace(deq, deq_separate_head=True)),
                 ("deq_tied", deq)]
    else:
        raise ContractError(f"unknown ablation grid {grid!r}; choose from {GRIDS}")
    return [(name, replace(cfg, model=spec, out=str(Path(cfg.out) / f"{grid}_{name}")))
            for name, spec in pairs]


def run_grid(cfg: ExperimentConfig, grid: str, log: Callable[[str], None] | None = None) -> list[dict]:
    """Train every variant on the same data stream and tabulate the comparison."""
    rows = []
    for name, vcfg in grid_variants(cfg, grid):
        Path(vcfg.out).mkdir(parents=True, exist_ok=True)
        data = TaskData(vcfg, Path(cfg.out))
        model = build_model(vcfg.model, vcfg.seed)
        trainer = Trainer(model, vcfg.train)
        records = []
        t0 = time.perf_counter()
        for step in range(vcfg.train.steps):
            records.append(trainer.train_step(data.batch_at(step)))
        elapsed = time.perf_counter() - t0
        export_metrics(records, metrics_path(vcfg), vcfg.diag.metrics_format)
        ev = evaluate(model, data.eval, grid=vcfg.task.kind == "sudoku")
        rows.append({
            "variant": name,
            "params": param_count(vcfg.model),
            "val_loss": ev["loss"],
            "avg_iters": ev["iters"],
            "pct_converged": 100.0 * ev["converged"],
            "mem": float(np.mean([r.act_peak for r in records])) if records else 0.0,
            "step_time": elapsed / max(1, len(records)),
        })
        if log:
            log(f"{grid}/{name}: val loss {ev['loss']:.4f}")
    ref_mem = rows[0]["mem"] or 1.0
    ref_time = rows[0]["step_time"] or 1.0
    for row in rows:
        row["rel_mem"] = row["mem"] / ref_mem
        row["rel_time"] = row["step_time"] / ref_time
    return rows
