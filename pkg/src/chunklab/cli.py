"""Experiment runner: every measurement protocol as a deterministic subcommand.

Each subcommand reads one config file (overridable with ``--set``), runs its
sweep cells on a bounded worker pool, and writes CSV/JSON outputs into the
run directory along with a manifest recording the config hash, the seeds,
and the package version.  Re-running a command with the same config yields
byte-identical outputs.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .averaging import average_checkpoints
from .config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    config_hash,
    default_config,
    load_config_file,
    serialize_config,
)
from .data import (
    LabeledDataset,
    build_balanced_stream,
    build_task_stream,
    build_unbalanced_stream,
    default_per_class_test,
    gaussian_blobs,
    load_csv_dataset,
    load_idx_dataset,
    split_train_test,
)
from .linear import (
    calibrate_a1_for_study,
    chunking_invariance_check,
    empirical_convergence_study,
    loglog_slope,
)
from .metrics import (
    StabilityTrace,
    accuracy_matrix,
    default_tracked_chunks,
    forgetting_report,
    stability_gap,
    write_accuracy_matrix_csv,
    write_forgetting_csv,
    write_stability_csv,
)
from .model import MlpConfig, mlp_init
from .output import atomic_write_csv, atomic_write_text
from .rng import child_seeds
from .trainer import (
    METHOD_ER,
    METHOD_PLAIN_SGD,
    REGIME_ONLINE,
    REGIME_STANDARD,
    evaluate_dataset,
    save_run_log,
    train_on_stream,
)

EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

CHUNK_CURVE_HEADER = ["chunk_size", "seed", "method", "averager", "final_test_acc"]
CL_COMPARE_HEADER = ["setting", "method", "averager", "seed", "final_acc"]
STUDY_HEADER = ["S", "seed", "gap", "bound", "min_S", "prob_floor"]


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------


def build_dataset(cfg: ExperimentConfig, seed: int) -> LabeledDataset:
    spec = cfg.dataset
    if spec.kind == "blobs":
        return gaussian_blobs(spec.d, spec.classes, spec.per_class, spec.separation, seed)
    if spec.kind == "csv":
        return load_csv_dataset(spec.path)
    return load_idx_dataset(spec.images, spec.labels)


def split_dataset(cfg: ExperimentConfig, dataset: LabeledDataset, seed: int):
    per = cfg.dataset.per_class_test
    if per is None:
        per = default_per_class_test(int(dataset.class_counts().min()))
    return split_train_test(dataset, per, seed)


def model_config(cfg: ExperimentConfig, dataset: LabeledDataset) -> MlpConfig:
    sizes = (dataset.feature_dim, *cfg.model.hidden, dataset.class_count)
    return MlpConfig(sizes, cfg.model.activation)


def _prepare(cfg: ExperimentConfig, seed: int):
    """Dataset, split, model config, init, and derived seeds for one run."""
    ds_seed, split_seed, stream_seed, init_seed, train_seed = child_seeds(seed, 5)
    full = build_dataset(cfg, ds_seed)
    train, test = split_dataset(cfg, full, split_seed)
    if len(test) == 0:
        raise ConfigError("[dataset] per_class_test: a non-empty test set is required")
    mconfig = model_config(cfg, full)
    init = mlp_init(mconfig, init_seed)
    return train, test, mconfig, init, stream_seed, train_seed


def resolve_sweep_sizes(cfg: ExperimentConfig, train_size: int) -> "list[tuple[int, int]]":
    """``(chunk_size, n_chunks)`` cells of a chunk-size sweep, offline included."""
    stream = cfg.stream
    cells: list[tuple[int, int]] = []
    if stream.chunk_sizes:
        for size in stream.chunk_sizes:
            if size < 1 or train_size % size:
                raise ConfigError(
                    f"[stream] chunk_sizes: {size} does not divide the training size {train_size}"
                )
            cells.append((size, train_size // size))
    elif stream.chunk_counts:
        for count in stream.chunk_counts:
            if count < 1 or train_size % count:
                raise ConfigError(
                    f"[stream] chunk_counts: {count} does not divide the training size {train_size}"
                )
            cells.append((train_size // count, count))
    else:
        raise ConfigError("[stream]: chunk_sizes or chunk_counts is required for a sweep")
    if all(count != 1 for _, count in cells):
        cells.append((train_size, 1))  # the offline point
    return cells


def build_single_stream(cfg: ExperimentConfig, train: LabeledDataset, seed: int):
    stream = cfg.stream
    try:
        if stream.mode == "balanced":
            if stream.chunk_size is None:
                raise ConfigError("[stream] chunk_size: required for balanced single runs")
            return build_balanced_stream(train, stream.chunk_size, seed)
        if stream.mode == "unbalanced":
            if stream.n_chunks is None:
                raise ConfigError("[stream] n_chunks: required for unbalanced single runs")
            return build_unbalanced_stream(train, stream.n_chunks, seed)
        if stream.classes_per_task is None:
            raise ConfigError("[stream] classes_per_task: required for task streams")
        return build_task_stream(train, stream.classes_per_task, seed)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[stream]: {exc}") from exc


def _averager_label(option: str) -> str:
    return option.replace(":", "")


def _pool_map(fn, cells, jobs: int):
    if jobs <= 1 or len(cells) <= 1:
        return [fn(cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


def write_manifest(cfg: ExperimentConfig, command: str, out: Path):
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seeds": list(cfg.run.seeds),
        "version": __version__,
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "config.ini", serialize_config(cfg))


# ---------------------------------------------------------------------------
# sweep cells (top level so worker processes can pickle them)
# ---------------------------------------------------------------------------


def _chunk_curve_cell(cell):
    cfg, chunk_size, n_chunks, seed = cell
    train, test, mconfig, init, stream_seed, train_seed = _prepare(cfg, seed)
    if cfg.stream.mode == "unbalanced":
        stream = build_unbalanced_stream(train, n_chunks, stream_seed)
    else:
        stream = build_balanced_stream(train, chunk_size, stream_seed)
    log = train_on_stream(init, mconfig, stream, train, test, cfg.train, train_seed)
    rows = []
    for option in cfg.averager.options():
        weights = average_checkpoints(log.checkpoints, option)
        acc = evaluate_dataset(weights, mconfig, test)
        rows.append([chunk_size, seed, cfg.train.method, option, acc])
    return rows


def _forgetting_cell(cell):
    cfg, seed = cell
    train, test, mconfig, init, stream_seed, train_seed = _prepare(cfg, seed)
    stream = build_single_stream(cfg, train, stream_seed)
    log = train_on_stream(init, mconfig, stream, train, test, cfg.train, train_seed)
    tracked = cfg.run.tracked or default_tracked_chunks(stream.n_chunks)
    results = []
    for option in cfg.averager.options():
        averager = None if option == "none" else option
        matrix = accuracy_matrix(log, stream, tracked, train, test, mconfig, averager)
        results.append((option, matrix, forgetting_report(matrix)))
    return seed, log, results


def _stability_cell(cell):
    cfg, method, seed = cell
    tc = replace(cfg.train, method=method)
    run_cfg = replace(cfg, train=tc)
    train, test, mconfig, init, stream_seed, train_seed = _prepare(run_cfg, seed)
    stream = build_single_stream(run_cfg, train, stream_seed)
    log = train_on_stream(init, mconfig, stream, train, test, tc, train_seed)
    trace = StabilityTrace.from_run_log(log, cfg.run.window)
    return method, seed, log, stability_gap(trace)


def _cl_compare_cell(cell):
    cfg, regime, method, seed = cell
    tc = replace(cfg.train, regime=regime, method=method)
    run_cfg = replace(cfg, train=tc)
    train, test, mconfig, init, stream_seed, train_seed = _prepare(run_cfg, seed)
    stream = build_single_stream(run_cfg, train, stream_seed)
    log = train_on_stream(init, mconfig, stream, train, test, tc, train_seed)
    rows = []
    for option in cfg.averager.options():
        weights = average_checkpoints(log.checkpoints, option)
        acc = evaluate_dataset(weights, mconfig, test)
        rows.append([regime, method, option, seed, acc])
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def common_options(fn):
    fn = click.option("--config", "config_path", default=None, metavar="PATH",
                      help="Config file (INI); defaults are used when omitted.")(fn)
    fn = click.option("--seed", "seeds", type=int, multiple=True,
                      help="Override [run] seeds (repeatable).")(fn)
    fn = click.option("--out", "out_dir", default=None, metavar="DIR",
                      help="Override [run] out.")(fn)
    fn = click.option("--jobs", type=int, default=None,
                      help="Override [run] jobs (worker pool size).")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                      help="Override any config field (repeatable; wins over the file).")(fn)
    return fn


def resolve_config(config_path, seeds, out_dir, jobs, overrides) -> ExperimentConfig:
    cfg = load_config_file(config_path) if config_path else default_config()
    assignments = list(overrides)
    if seeds:
        assignments.append("run.seeds=" + ",".join(str(s) for s in seeds))
    if out_dir is not None:
        assignments.append(f"run.out={out_dir}")
    if jobs is not None:
        assignments.append(f"run.jobs={jobs}")
    return apply_overrides(cfg, assignments)


def _execute(command: str, config_path, seeds, out_dir, jobs, overrides, body):
    try:
        cfg = resolve_config(config_path, seeds, out_dir, jobs, overrides)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    try:
        out = Path(cfg.run.out)
        out.mkdir(parents=True, exist_ok=True)
        body(cfg, out)
        write_manifest(cfg, command, out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    except Exception as exc:
        click.echo(f"runtime error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME_ERROR)


@click.group()
@click.version_option(__version__)
def main():
    """Chunked-learning experiments with seeded, reproducible sweeps."""


def _run_chunk_curve(cfg: ExperimentConfig, out: Path):
    if cfg.stream.mode == "task":
        raise ConfigError("[stream] mode: chunk-curve sweeps need balanced or unbalanced mode")
    probe_seed = cfg.run.seeds[0]
    ds_seed, split_seed = child_seeds(probe_seed, 2)
    probe_train, _ = split_dataset(cfg, build_dataset(cfg, ds_seed), split_seed)
    sweep = resolve_sweep_sizes(cfg, len(probe_train))
    if cfg.stream.mode == "balanced":
        for size, _ in sweep:  # surface infeasible sizes as config errors up front
            try:
                build_balanced_stream(probe_train, size, probe_seed)
            except ValueError as exc:
                raise ConfigError(f"[stream]: {exc}") from exc
    cells = [(cfg, size, count, seed) for size, count in sweep for seed in cfg.run.seeds]
    rows = []
    for cell_rows in _pool_map(_chunk_curve_cell, cells, cfg.run.jobs):
        rows.extend(cell_rows)
    rows.sort(key=lambda r: (r[0], r[1], r[3]))
    atomic_write_csv(out / "chunk_curve.csv", CHUNK_CURVE_HEADER, rows)
    click.echo(f"wrote {out / 'chunk_curve.csv'} ({len(rows)} rows)")


@main.command("chunk-curve")
@common_options
def chunk_curve_command(config_path, seeds, out_dir, jobs, overrides):
    """End-of-training accuracy across chunk sizes (offline point included)."""
    _execute("chunk-curve", config_path, seeds, out_dir, jobs, overrides, _run_chunk_curve)


@main.command("wa-compare")
@common_options
def wa_compare_command(config_path, seeds, out_dir, jobs, overrides):
    """chunk-curve with every weight-averaging option reported."""

    def body(cfg: ExperimentConfig, out: Path):
        _run_chunk_curve(replace(cfg, averager=replace(cfg.averager, kind="both")), out)

    _execute("wa-compare", config_path, seeds, out_dir, jobs, overrides, body)


def _run_forgetting(cfg: ExperimentConfig, out: Path):
    cells = [(cfg, seed) for seed in cfg.run.seeds]
    for seed, log, results in _pool_map(_forgetting_cell, cells, cfg.run.jobs):
        for option, matrix, entries in results:
            label = _averager_label(option)
            write_accuracy_matrix_csv(matrix, out / f"matrix_{label}_seed{seed}.csv")
            write_forgetting_csv(entries, out / f"forgetting_{label}_seed{seed}.csv")
        if cfg.run.save_logs:
            save_run_log(log, out / f"runlog_seed{seed}")
    click.echo(f"wrote accuracy matrices for {len(cells)} run(s) to {out}")


@main.command("forgetting")
@common_options
def forgetting_command(config_path, seeds, out_dir, jobs, overrides):
    """Accuracy matrix and forgetting curves for tracked chunks."""
    _execute("forgetting", config_path, seeds, out_dir, jobs, overrides, _run_forgetting)


def _run_stability(cfg: ExperimentConfig, out: Path):
    if cfg.train.eval_every_steps < 1:
        raise ConfigError("[train] eval_every_steps: must be > 0 for stability traces")
    methods = [METHOD_PLAIN_SGD]
    if cfg.train.memory_size >= 1:
        methods.append(METHOD_ER)
    cells = [(cfg, method, seed) for method in methods for seed in cfg.run.seeds]
    mean_dips: dict[str, list[float]] = {m: [] for m in methods}
    for method, seed, log, dips in _pool_map(_stability_cell, cells, cfg.run.jobs):
        write_stability_csv(dips, out / f"stability_{method}_seed{seed}.csv")
        atomic_write_csv(
            out / f"eval_{method}_seed{seed}.csv",
            ["step", "test_acc"],
            [[step, acc] for step, acc in log.eval_trace],
        )
        if cfg.run.save_logs:
            save_run_log(log, out / f"runlog_{method}_seed{seed}")
        mean_dips[method].extend(dip for _, dip in dips)
    for method in methods:
        values = mean_dips[method]
        mean = float(np.mean(values)) if values else float("nan")
        click.echo(f"{method}: mean dip over {len(values)} boundaries = {mean:.6f}")


@main.command("stability")
@common_options
def stability_command(config_path, seeds, out_dir, jobs, overrides):
    """Per-boundary accuracy dips right after each chunk starts."""
    _execute("stability", config_path, seeds, out_dir, jobs, overrides, _run_stability)


def _run_linear_study(cfg: ExperimentConfig, out: Path):
    spec = cfg.linear
    study = empirical_convergence_study(
        dim=spec.d,
        chunk_sizes=spec.chunk_sizes,
        n_chunks=spec.k,
        n_seeds=spec.n_seeds,
        lambda_min=spec.lambda_min,
        noise_sd=spec.noise_sd,
        a_x=spec.a_x,
        delta=spec.delta,
        alpha_sg=spec.alpha_sg,
        a1=spec.a1,
        a2=spec.a2,
        a3=spec.a3,
    )
    atomic_write_csv(
        out / "linear_study.csv",
        STUDY_HEADER,
        [[r.chunk_size, r.seed, r.gap, r.bound, r.min_chunk_size, r.prob_floor]
         for r in study.rows],
    )
    invariance = chunking_invariance_check(
        dim=spec.d,
        chunk_size=min(spec.chunk_sizes),
        n_chunks=spec.k,
        noise_sd=spec.noise_sd,
        lambda_min=spec.lambda_min,
        a_x=spec.a_x,
        seed=cfg.run.seeds[0],
    )
    slope = loglog_slope(
        [s.chunk_size for s in study.summary], [s.mean_gap for s in study.summary]
    )
    summary = {
        "per_chunk_size": [
            {
                "chunk_size": s.chunk_size,
                "mean_gap": s.mean_gap,
                # null: the bound's side condition fails at these constants
                "mean_bound": s.mean_bound if math.isfinite(s.mean_bound) else None,
            }
            for s in study.summary
        ],
        "loglog_slope": slope,
        "invariance_max_rel_error": invariance,
        "invariance_pass": invariance < 1e-8,
        "calibrated_a1": calibrate_a1_for_study(
            study,
            dim=spec.d,
            n_chunks=spec.k,
            lambda_min=spec.lambda_min,
            a_x=spec.a_x,
            delta=spec.delta,
            alpha_sg=spec.alpha_sg,
        ),
    }
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    click.echo(
        f"wrote {out / 'linear_study.csv'} ({len(study.rows)} rows); "
        f"log-log slope {slope:.3f}; invariance max rel err {invariance:.3e}"
    )


@main.command("linear-study")
@common_options
def linear_study_command(config_path, seeds, out_dir, jobs, overrides):
    """BLR-vs-weight-averaging gap study with the analytic bound."""
    _execute("linear-study", config_path, seeds, out_dir, jobs, overrides, _run_linear_study)


def _run_cl_compare(cfg: ExperimentConfig, out: Path):
    if cfg.stream.classes_per_task is None:
        raise ConfigError("[stream] classes_per_task: required for cl-compare")
    if cfg.train.memory_size < 1:
        raise ConfigError("[train] memory_size: must be >= 1 so the ER cells can run")
    if cfg.averager.kind == "none":
        # The command's whole point is the averaged-vs-final comparison.
        cfg = replace(cfg, averager=replace(cfg.averager, kind="mean"))
    cfg = replace(cfg, stream=replace(cfg.stream, mode="task"))
    cells = [
        (cfg, regime, method, seed)
        for regime in (REGIME_STANDARD, REGIME_ONLINE)
        for method in (METHOD_PLAIN_SGD, METHOD_ER)
        for seed in cfg.run.seeds
    ]
    rows = []
    for cell_rows in _pool_map(_cl_compare_cell, cells, cfg.run.jobs):
        rows.extend(cell_rows)
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    atomic_write_csv(out / "cl_compare.csv", CL_COMPARE_HEADER, rows)
    deltas = {}
    for regime in (REGIME_STANDARD, REGIME_ONLINE):
        for method in (METHOD_PLAIN_SGD, METHOD_ER):
            per_seed = []
            for seed in cfg.run.seeds:
                accs = {
                    r[2]: r[4]
                    for r in rows
                    if r[0] == regime and r[1] == method and r[3] == seed
                }
                if "mean" in accs and "none" in accs:
                    per_seed.append(accs["mean"] - accs["none"])
            if per_seed:
                deltas[f"{regime}/{method}"] = float(np.median(per_seed))
    atomic_write_text(
        out / "delta_acc.json", json.dumps(deltas, indent=2, sort_keys=True) + "\n"
    )
    for name, value in sorted(deltas.items()):
        click.echo(f"median delta-acc (mean averaging vs final weights) {name}: {value:+.4f}")


@main.command("cl-compare")
@common_options
def cl_compare_command(config_path, seeds, out_dir, jobs, overrides):
    """Class-incremental runs across regimes and methods, with and without averaging."""
    _execute("cl-compare", config_path, seeds, out_dir, jobs, overrides, _run_cl_compare)


if __name__ == "__main__":
    main()
