"""Experiment configuration as flat ``section.key = value`` text.

Sections: ``model``, ``solver``, ``backward``, ``adjoint``, ``train``, ``task``
and ``diag``; ``seed`` and ``out`` are top-level keys.  Values are parsed using
the type of the field's default.  Later sources override earlier ones:
defaults, then the config file, then command-line overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError
from .implicit import BackwardMode
from .models import ModelSpec
from .solver import PICARD, SolverConfig
from .tasks import BYTE_VOCAB, SUDOKU_VOCAB, copy_vocab, modadd_vocab
from .training import TrainConfig

TASKS = ("copy", "modadd", "sudoku", "corpus")


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "modadd"
    modulus: int = 97
    copy_len: int = 16
    copy_vocab: int = 8
    sudoku_train: int = 1000
    sudoku_test: int = 200
    givens_min: int = 4
    givens_max: int = 8
    corpus_path: str = ""
    seq_len: int = 64
    # seeds the data stream independently of the model seed
    data_seed: int = 1234
    eval_size: int = 1024

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ConfigError("task.kind", f"must be one of {TASKS}")
        if self.kind == "corpus" and not self.corpus_path:
            raise ConfigError("task.corpus_path", "required for the corpus task")
        if self.modulus < 2:
            raise ConfigError("task.modulus", "must be at least 2")
        if self.copy_len < 2 or self.copy_len % 2:
            raise ConfigError("task.copy_len", "must be even and at least 2")
        if self.copy_vocab < 1:
            raise ConfigError("task.copy_vocab", "must be positive")
        if not 4 <= self.givens_min <= self.givens_max <= 12:
            raise ConfigError("task.givens_min", "need 4 <= givens_min <= givens_max <= 12")
        if self.sudoku_train < 1 or self.sudoku_test < 1:
            raise ConfigError("task.sudoku_train", "puzzle counts must be positive")
        if self.seq_len < 1:
            raise ConfigError("task.seq_len", "must be positive")
        if self.eval_size < 1:
            raise ConfigError("task.eval_size", "must be positive")

    @property
    def vocab(self) -> int:
        return {"copy": copy_vocab(self.copy_vocab), "modadd": modadd_vocab(self.modulus),
                "sudoku": SUDOKU_VOCAB, "corpus": BYTE_VOCAB}[self.kind]

    @property
    def length(self) -> int:
        return {"copy": self.copy_len, "modadd": 3, "sudoku": 16, "corpus": self.seq_len}[self.kind]


@dataclass(frozen=True)
class DiagConfig:
    metrics_format: str = "csv"
    log_interval: int = 0

    def __post_init__(self):
        if self.metrics_format not in ("csv", "jsonl"):
            raise ConfigError("diag.metrics_format", "must be csv or jsonl")
        if self.log_interval < 0:
            raise ConfigError("diag.log_interval", "must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    diag: DiagConfig = field(default_factory=DiagConfig)
    seed: int = 0
    out: str = "runs/default"


# section name -> (path of attribute names from ExperimentConfig, dataclass)
_SECTIONS = {
    "model": ("model",),
    "solver": ("model", "solver"),
    "backward": ("model", "backward"),
    "adjoint": ("model", "backward", "adjoint"),
    "train": ("train",),
    "task": ("task",),
    "diag": ("diag",),
}
_NESTED = {"solver", "backward", "adjoint"}


def _get(obj, path):
    for name in path:
        obj = getattr(obj, name)
    return obj


def _scalar_fields(obj) -> list[dataclasses.Field]:
    return [f for f in fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))]


def _parse_value(key: str, text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(key, f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {text!r}") from None
    if isinstance(like, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {text!r}") from None
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten(cfg: ExperimentConfig) -> dict[str, str]:
    """Every configurable key with its current value as text, in a stable order."""
    out = {"seed": str(cfg.seed), "out": cfg.out}
    for section, path in _SECTIONS.items():
        obj = _get(cfg, path)
        for f in _scalar_fields(obj):
            out[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
    return out


def parse_lines(lines: Iterable[str], source: str = "<config>") -> list[tuple[str, str]]:
    """``key = value`` pairs; ``#`` starts a comment, blank lines are skipped."""
    pairs = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}", "expected 'key = value'")
        pairs.append((key.strip(), value.strip()))
    return pairs


def _rebuild(obj, updates: dict):
    """Reconstruct a frozen dataclass, re-running its validation."""
    try:
        return replace(obj, **updates)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None


def apply(cfg: ExperimentConfig, pairs: Iterable[tuple[str, str]]) -> ExperimentConfig:
    """Apply textual overrides; unknown keys and bad values raise ConfigError naming the key."""
    pending: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    top: dict[str, object] = {}
    for key, text in pairs:
        if key in ("seed", "out"):
            top[key] = _parse_value(key, text, getattr(cfg, key))
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(key, "unknown key")
        obj = _get(cfg, _SECTIONS[section])
        known = {f.name for f in _scalar_fields(obj)}
        if name not in known:
            raise ConfigError(key, "unknown key")
        pending[section][name] = _parse_value(key, text, getattr(obj, name))
    # innermost first so that rebuilt children are available to their parents
    adjoint = _rebuild(cfg.model.backward.adjoint, pending["adjoint"])
    backward = _rebuild(cfg.model.backward, {**pending["backward"], "adjoint": adjoint})
    solver = _rebuild(cfg.model.solver, pending["solver"])
    model = _rebuild(cfg.model, {**pending["model"], "solver": solver, "backward": backward})
    return _rebuild(cfg, {"model": model, "train": _rebuild(cfg.train, pending["train"]),
                          "task": _rebuild(cfg.task, pending["task"]),
                          "diag": _rebuild(cfg.diag, pending["diag"]), **top})


def fit_to_task(cfg: ExperimentConfig) -> ExperimentConfig:
    """Size the vocabulary and context of the model to the task."""
    model = replace(cfg.model, vocab=cfg.task.vocab, max_len=max(cfg.model.max_len, cfg.task.length))
    return replace(cfg, model=model)


def load_config(path=None, overrides: Mapping[str, str] | Iterable[tuple[str, str]] = ()) -> ExperimentConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    cfg = ExperimentConfig()
    pairs: list[tuple[str, str]] = []
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        pairs += parse_lines(text.splitlines(), str(path))
    pairs += list(overrides.items()) if isinstance(overrides, Mapping) else list(overrides)
    return fit_to_task(apply(cfg, pairs))


def config_from_header(header: Mapping[str, str]) -> ExperimentConfig:
    """Rebuild a config from a checkpoint header, ignoring non-config entries."""
    known = set(flatten(ExperimentConfig()))
    pairs = [(k, v) for k, v in header.items() if k in known]
    return apply(ExperimentConfig(), pairs)


def first_mismatch(a: ExperimentConfig, b: ExperimentConfig, prefixes=("model.", "solver.", "backward.", "adjoint.")):
    """First architecture key whose value differs between two configs, or None."""
    fa, fb = flatten(a), flatten(b)
    for key in fa:
        if key.startswith(prefixes) and fa[key] != fb.get(key):
            return key, fa[key], fb.get(key)
    return None


def adjoint_picard(cfg: SolverConfig) -> SolverConfig:
    return replace(cfg, method=PICARD)
