import csv
import time

import numpy as np
import pytest

from attractor import models
from attractor.checks import run_checks
from attractor.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from attractor.config import ExperimentConfig, flatten, load_config, parse_lines
from attractor.errors import ConfigError
from attractor.experiment import run_training

SMALL = ["--model.d=16", "--model.d_ff=32", "--model.heads=2", "--model.n_backbone=1",
         "--task.kind=copy", "--task.copy_len=8", "--task.eval_size=32", "--train.batch_size=8"]


def small_cfg(tmp_path, **extra):
    pairs = [tuple(a[2:].split("=", 1)) for a in SMALL]
    pairs += [(k, str(v)) for k, v in extra.items()]
    pairs.append(("out", str(tmp_path)))
    return load_config(None, pairs)


def test_empty_file_gives_valid_defaults(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# nothing here\n\n")
    cfg = load_config(f)
    base = ExperimentConfig()
    assert cfg.train == base.train and cfg.model.solver == base.model.solver
    assert cfg.model.vocab == cfg.task.vocab


def test_file_values_and_flag_precedence(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("solver.tol = 1e-5\ntrain.lr = 0.01  # comment\nmodel.d = 32\n")
    cfg = load_config(f, [("train.lr", "0.02")])
    assert cfg.model.solver.tol == 1e-5 and cfg.train.lr == 0.02 and cfg.model.d == 32


@pytest.mark.parametrize("text,key", [("solver.tol = -1", "solver.tol"), ("model.colour = red", "model.colour"),
                                      ("train.steps = many", "train.steps"), ("nokey", "c.txt:1")])
def test_bad_config_names_the_key(tmp_path, text, key):
    f = tmp_path / "c.txt"
    f.write_text(text + "\n")
    with pytest.raises(ConfigError) as err:
        load_config(f)
    assert err.value.key.endswith(key)


def test_flatten_round_trips_through_the_parser():
    cfg = load_config(None, [("backward.kind", "phantom"), ("adjoint.tol", "1e-7"), ("model.init", "zero")])
    again = load_config(None, parse_lines(f"{k} = {v}" for k, v in flatten(cfg).items()))
    assert again == cfg


def test_cli_rejects_bad_overrides_and_missing_files(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--solver.tol=-1"]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path), "--model.bogus=1"]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.txt")]) == EXIT_IO
    assert main(["eval", "--out", str(tmp_path / "empty")]) == EXIT_IO


def test_copy_smoke_run_at_width_64_is_fast(tmp_path):
    t0 = time.perf_counter()
    code = main(["train", "--out", str(tmp_path), "--task.kind=copy", "--train.steps=10",
                 "--task.eval_size=32", "--train.batch_size=8"])
    assert code == EXIT_OK and time.perf_counter() - t0 < 30
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert [int(r["step"]) for r in rows] == list(range(10))
    assert (tmp_path / "final.ckpt").exists()


def test_identical_runs_write_identical_metrics(tmp_path):
    args = SMALL + ["--train.steps=6", "--seed=3"]
    assert main(["train", "--out", str(tmp_path / "a")] + args) == EXIT_OK
    assert main(["train", "--out", str(tmp_path / "b")] + args) == EXIT_OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_continues_the_step_numbering_and_trajectory(tmp_path):
    full = run_training(small_cfg(tmp_path / "full", **{"train.steps": 8}))
    cfg = small_cfg(tmp_path / "cut", **{"train.steps": 8})
    run_training(cfg, stop_after=5)
    res = run_training(cfg, resume=tmp_path / "cut" / "checkpoint.ckpt")
    assert [r.step for r in res.records] == list(range(8))
    assert (tmp_path / "cut" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()
    for a, b in zip(full.model.parameters(), res.model.parameters()):
        assert np.array_equal(a.data, b.data)


def test_eval_sweep_rows(tmp_path):
    args = SMALL + ["--out", str(tmp_path), "--train.steps=3", "--model.out_std=0.2"]
    assert main(["train"] + args) == EXIT_OK
    assert main(["eval", "--t-sweep", "0,2,64"] + args) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "eval.csv")))
    assert [r["T"] for r in rows] == ["0", "2", "64", "converged"]
    assert float(rows[-1]["loss"]) == pytest.approx(float(rows[2]["loss"]), abs=1e-3)


def test_budget_zero_row_is_the_backbone_readout(tmp_path):
    cfg = small_cfg(tmp_path, **{"train.steps": 2, "model.out_std": 0.2})
    res = run_training(cfg)
    from attractor.experiment import TaskData, t_sweep_rows
    from attractor.diagnostics import _masked_ce
    data = TaskData(cfg, tmp_path)
    (row, _) = t_sweep_rows(res.model, data.eval, [0])
    readout = res.model.embed.unembed(res.model.proposal(data.eval.inputs)).data
    assert row["loss"] == pytest.approx(_masked_ce(readout, data.eval.targets, data.eval.mask), rel=1e-6)


def test_plain_model_ignores_the_sweep_with_a_warning(tmp_path, capsys):
    args = SMALL + ["--out", str(tmp_path), "--train.steps=2", "--model.family=plain"]
    assert main(["train"] + args) == EXIT_OK
    assert main(["eval"] + args) == EXIT_OK
    assert "warning" in capsys.readouterr().err
    rows = list(csv.DictReader(open(tmp_path / "eval.csv")))
    assert [r["T"] for r in rows] == ["none"]


def test_eval_against_a_mismatched_spec_names_the_key(tmp_path, capsys):
    args = SMALL + ["--out", str(tmp_path), "--train.steps=1"]
    assert main(["train"] + args) == EXIT_OK
    assert main(["eval"] + args + ["--model.d_ff=64"]) != EXIT_OK
    assert "model.d_ff" in capsys.readouterr().err


@pytest.mark.parametrize("grid,names", [
    ("injection", ["initial_only", "concat", "additive"]),
    ("backward", ["full_ift", "phantom_k3", "onestep"]),
    ("init", ["zero", "gaussian", "proposal"]),
    ("deq", ["attractor", "deq_separate_head", "deq_tied"]),
])
def test_ablation_grids_emit_one_row_per_variant(tmp_path, grid, names):
    args = SMALL + ["--out", str(tmp_path), "--train.steps=2", "--model.out_std=0.05"]
    assert main(["ablate", "--grid", grid] + args) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / f"ablate_{grid}.csv")))
    assert [r["variant"] for r in rows] == names
    for col in ("params", "val_loss", "avg_iters", "pct_converged", "mem", "step_time", "rel_mem", "rel_time"):
        assert col in rows[0]


def test_check_detects_a_perturbed_backward_rule(monkeypatch):
    assert run_checks(only=["families"])[0].passed
    real = models.implicit_backward

    def skewed(*args, **kw):
        g = real(*args, **kw)
        g.grad_c = 1.1 * g.grad_c
        return g

    monkeypatch.setattr(models, "implicit_backward", skewed)
    assert not run_checks(only=["families"])[0].passed


def test_quick_check_passes(capsys):
    assert main(["check", "--quick"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out
