"""Command-line entry point: ``attractor {train,eval,ablate,check}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 numeric
failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

from .config import ExperimentConfig, load_config
from .diagnostics import export_metrics
from .errors import AttractorError, ConfigError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    """``--section.key=value`` or ``--section.key value`` pairs from unparsed arguments."""
    pairs = []
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise ConfigError(arg, "unexpected argument")
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        elif i + 1 < len(extra):
            key, value = body, extra[i + 1]
            i += 1
        else:
            raise ConfigError(body, "missing value")
        pairs.append((key, value))
        i += 1
    return pairs


def _build_config(args, extra) -> ExperimentConfig:
    pairs = _split_overrides(extra)
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    if args.out is not None:
        pairs.append(("out", args.out))
    return load_config(args.config, pairs)


def _parse_sweep(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("--t-sweep", f"expected comma-separated integers, got {text!r}") from None
    if any(v < 0 for v in values):
        raise ConfigError("--t-sweep", "budgets must be non-negative")
    return values


def cmd_train(cfg: ExperimentConfig, resume=None) -> int:
    from .experiment import run_training
    res = run_training(cfg, resume=resume, log=_log)
    last = res.records[-1] if res.records else None
    if last is not None:
        _log(f"finished step {last.step}: loss {last.loss:.4f}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, t_sweep=()) -> int:
    from .checkpoint import load_model
    from .experiment import FINAL, TaskData, t_sweep_rows
    from .models import ReasoningModel
    path = Path(checkpoint) if checkpoint else Path(cfg.out) / FINAL
    model, stored, _ = load_model(path, cfg)
    data = TaskData(cfg, Path(cfg.out))
    steps = cfg.train.supervision_steps if isinstance(model, ReasoningModel) else 1
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = t_sweep_rows(model, data.eval, list(t_sweep), grid=cfg.task.kind == "sudoku",
                            supervision_steps=steps)
    for w in caught:
        _log(f"warning: {w.message}")
    export_metrics(rows, Path(cfg.out) / "eval.csv", "csv")
    for row in rows:
        _log("  ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, grid: str) -> int:
    from .experiment import run_grid
    rows = run_grid(cfg, grid, log=_log)
    export_metrics(rows, Path(cfg.out) / f"ablate_{grid}.csv", "csv")
    for row in rows:
        _log("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_check(quick: bool = False) -> int:
    from .checks import run_checks
    results = run_checks(quick=quick)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}")
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: " + ", ".join(r.name for r in failed))
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attractor", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="model seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")

    p = sub.add_parser("train", help="train a model; any --section.key=value overrides the config")
    common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval", help="evaluate a checkpoint across iteration budgets")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/final.ckpt)")
    p.add_argument("--t-sweep", default="0,1,2,4,8,16", help="comma-separated budgets")
    p = sub.add_parser("ablate", help="run an ablation grid")
    common(p)
    p.add_argument("--grid", required=True, choices=("deq", "injection", "backward", "init"))
    p = sub.add_parser("check", help="run the invariant and oracle suite")
    p.add_argument("--quick", action="store_true", help="skip the slower checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "check":
            if extra:
                raise ConfigError(extra[0], "check takes no overrides")
            return cmd_check(args.quick)
        cfg = _build_config(args, extra)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, _parse_sweep(args.t_sweep))
        return cmd_ablate(cfg, args.grid)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except NumericError as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except OSError as exc:
        _log(f"I/O error: {exc}")
        return EXIT_IO
    except AttractorError as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
