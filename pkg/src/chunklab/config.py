"""Experiment configuration: a human-editable INI file plus flag overrides.

Every subcommand reads one config file with nested ``[section]`` key/value
pairs.  Values are typed by a fixed schema, unknown sections or keys are
rejected, and parse -> serialize -> parse is the identity, so configs can be
hashed and versioned.  Command-line overrides (``--set section.key=value``)
are applied after the file and always win.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

from .trainer import TrainConfig


class ConfigError(ValueError):
    """A configuration file or override failed validation."""


_BOOL_WORDS = {"true": True, "false": False}


def _parse_scalar(kind: str, field: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "bool":
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError
            return _BOOL_WORDS[raw.lower()]
        if kind == "opt_int":
            return int(raw) if raw else None
        if kind == "opt_float":
            return float(raw) if raw else None
        if kind == "opt_str":
            return raw if raw else None
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",")) if raw else ()
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",")) if raw else ()
    except ValueError:
        raise ConfigError(f"{field}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"{field}: unknown schema kind {kind}")


def _format_scalar(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_scalar(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from: built-in blobs, a CSV file, or an IDX pair."""

    kind: str = "blobs"
    d: int = 2
    classes: int = 4
    per_class: int = 1000
    separation: float = 4.0
    per_class_test: int | None = None  # None: reserve 20% of each class
    path: str | None = None
    images: str | None = None
    labels: str | None = None


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"


@dataclass(frozen=True)
class StreamSpec:
    """How the training set is cut into chunks.

    Sweep commands take ``chunk_sizes`` or ``chunk_counts`` (exactly one);
    single-run commands take ``chunk_size`` or ``n_chunks``; task streams
    take ``classes_per_task``.
    """

    mode: str = "balanced"
    chunk_sizes: tuple[int, ...] = ()
    chunk_counts: tuple[int, ...] = ()
    chunk_size: int | None = None
    n_chunks: int | None = None
    classes_per_task: int | None = None


@dataclass(frozen=True)
class AveragerSpec:
    """Which weight averages to report next to the final weights.

    ``none`` reports final weights only; ``mean`` adds the running mean;
    ``ema`` adds one EMA column per alpha; ``both`` adds mean and the EMAs.
    """

    kind: str = "none"
    alphas: tuple[float, ...] = (0.8, 0.95)

    def options(self) -> tuple[str, ...]:
        if self.kind == "none":
            return ("none",)
        if self.kind == "mean":
            return ("none", "mean")
        if self.kind == "ema":
            return ("none",) + tuple(f"ema:{_format_scalar(a)}" for a in self.alphas)
        if self.kind == "both":
            return ("none", "mean") + tuple(f"ema:{_format_scalar(a)}" for a in self.alphas)
        raise ConfigError(f"averager.kind: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class LinearStudySpec:
    d: int = 5
    chunk_sizes: tuple[int, ...] = (50, 100, 200, 400, 800)
    k: int = 10
    n_seeds: int = 20
    lambda_min: float = 0.2
    noise_sd: float = 1.0
    a_x: float | None = None
    delta: float = 0.05
    alpha_sg: float = 1.0
    a1: float = 1.0
    a2: float = 1.0
    a3: float = 1.0


@dataclass(frozen=True)
class RunSpec:
    seeds: tuple[int, ...] = (0,)
    out: str = "runs/out"
    jobs: int = 1
    save_logs: bool = False
    tracked: tuple[int, ...] = ()  # empty: the 10%/40%/80% defaults
    window: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    model: ModelSpec
    stream: StreamSpec
    train: TrainConfig
    averager: AveragerSpec
    linear: LinearStudySpec
    run: RunSpec


_SCHEMA: dict[str, tuple[type, dict[str, str]]] = {
    "dataset": (DatasetSpec, {
        "kind": "str", "d": "int", "classes": "int", "per_class": "int",
        "separation": "float", "per_class_test": "opt_int",
        "path": "opt_str", "images": "opt_str", "labels": "opt_str",
    }),
    "model": (ModelSpec, {"hidden": "ints", "activation": "str"}),
    "stream": (StreamSpec, {
        "mode": "str", "chunk_sizes": "ints", "chunk_counts": "ints",
        "chunk_size": "opt_int", "n_chunks": "opt_int", "classes_per_task": "opt_int",
    }),
    "train": (TrainConfig, {
        "epochs_per_chunk": "int", "batch_size": "int", "lr": "float",
        "method": "str", "memory_size": "int", "replay_batch": "int",
        "eval_every_steps": "int", "regime": "str",
    }),
    "averager": (AveragerSpec, {"kind": "str", "alphas": "floats"}),
    "linear": (LinearStudySpec, {
        "d": "int", "chunk_sizes": "ints", "k": "int", "n_seeds": "int",
        "lambda_min": "float", "noise_sd": "float", "a_x": "opt_float",
        "delta": "float", "alpha_sg": "float", "a1": "float", "a2": "float", "a3": "float",
    }),
    "run": (RunSpec, {
        "seeds": "ints", "out": "str", "jobs": "int", "save_logs": "bool",
        "tracked": "ints", "window": "int",
    }),
}


def default_config() -> ExperimentConfig:
    return ExperimentConfig(
        dataset=DatasetSpec(),
        model=ModelSpec(),
        stream=StreamSpec(),
        train=TrainConfig(epochs_per_chunk=20),
        averager=AveragerSpec(),
        linear=LinearStudySpec(),
        run=RunSpec(),
    )


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        _, fields = _SCHEMA[section]
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"[{section}] {key}: unknown key")
            values[section][key] = _parse_scalar(fields[key], f"[{section}] {key}", raw)
    sections = {}
    for section, (cls, _) in _SCHEMA.items():
        try:
            sections[section] = cls(**values.get(section, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    cfg = ExperimentConfig(**sections)
    validate_config(cfg)
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, (_, fields) in _SCHEMA.items():
        parser.add_section(section)
        spec = getattr(cfg, section)
        for key in fields:
            parser.set(section, key, _format_scalar(getattr(spec, key)))
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def load_config_file(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(encoding="utf-8"))


def apply_overrides(cfg: ExperimentConfig, assignments: "list[str]") -> ExperimentConfig:
    """Apply ``section.key=value`` strings on top of a parsed config."""
    if not assignments:
        return cfg
    text = serialize_config(cfg)
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    for assignment in assignments:
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(
                f"override {assignment!r} must look like section.key=value"
            )
        target, value = assignment.split("=", 1)
        section, key = target.split(".", 1)
        section, key = section.strip(), key.strip()
        if section not in _SCHEMA or key not in _SCHEMA[section][1]:
            raise ConfigError(f"override {assignment!r}: unknown field {section}.{key}")
        parser.set(section, key, value.strip())
    buffer = io.StringIO()
    parser.write(buffer)
    return parse_config_text(buffer.getvalue())


def validate_config(cfg: ExperimentConfig):
    if not cfg.run.seeds:
        raise ConfigError("[run] seeds: at least one seed is required")
    if cfg.run.jobs < 1:
        raise ConfigError("[run] jobs: must be >= 1")
    if cfg.run.window < 1:
        raise ConfigError("[run] window: must be >= 1")
    if cfg.dataset.kind not in ("blobs", "csv", "idx"):
        raise ConfigError(f"[dataset] kind: unknown kind {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "csv":
        if not cfg.dataset.path:
            raise ConfigError("[dataset] path: required for kind=csv")
        if not Path(cfg.dataset.path).exists():
            raise ConfigError(f"[dataset] path: {cfg.dataset.path} does not exist")
    if cfg.dataset.kind == "idx":
        for key in ("images", "labels"):
            value = getattr(cfg.dataset, key)
            if not value:
                raise ConfigError(f"[dataset] {key}: required for kind=idx")
            if not Path(value).exists():
                raise ConfigError(f"[dataset] {key}: {value} does not exist")
    if cfg.stream.mode not in ("balanced", "unbalanced", "task"):
        raise ConfigError(f"[stream] mode: unknown mode {cfg.stream.mode!r}")
    if cfg.stream.chunk_sizes and cfg.stream.chunk_counts:
        raise ConfigError("[stream]: give chunk_sizes or chunk_counts, not both")
    cfg.averager.options()  # raises on an unknown kind


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()
