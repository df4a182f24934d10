"""Command-line entry point: ingest, train, eval, sweep, ablate, report.

Options can come from an INI config file (sections data/model/train/run) and
are overridden one-to-one by command-line flags.  Every run writes a
manifest.json (resolved config, seed, package version, wall time) next to
its outputs.  Exit codes: 0 success, 1 validation error, 2 runtime failure.

Environment: CAKT_OUTPUT_ROOT prefixes relative output directories;
CAKT_NUM_THREADS caps torch CPU threads.
"""

from __future__ import annotations

import configparser
import functools
import json
import os
import sys
import time
from pathlib import Path

import click

from cakt import __version__
from cakt.config import CAKTConfig, ConfigError, TrainConfig, VARIANTS
from cakt.data import (
    DataError,
    fold_long_sequences,
    generate_synthetic,
    parse_dataset,
    split_train_test,
    write_canonical_jsonl,
)


def _set_threads() -> None:
    threads = os.environ.get("CAKT_NUM_THREADS")
    if threads:
        import torch

        torch.set_num_threads(int(threads))


def _resolve_out(out_dir: str) -> Path:
    root = os.environ.get("CAKT_OUTPUT_ROOT", "")
    path = Path(out_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, command: str, resolved: dict, started: float) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": resolved,
        "seed": resolved.get("seed"),
        "wall_time_seconds": time.time() - started,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)


def guarded(fn):
    """Map validation errors to exit 1 and runtime failures to exit 2."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, DataError, click.UsageError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
        except Exception as e:
            click.echo(f"failure: {e}", err=True)
            sys.exit(2)

    return wrapper


def _load_config_file(path) -> dict:
    """Flatten an INI file into {section.key: value} strings."""
    if not path:
        return {}
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path} not found or unreadable")
    flat = {}
    for section in parser.sections():
        for key, value in parser[section].items():
            flat[f"{section}.{key}"] = value
    return flat


def _merge(file_cfg: dict, section: str, key: str, flag_value, cast):
    """Flag wins over file; file wins over the caller's default (flag None)."""
    if flag_value is not None:
        return flag_value
    raw = file_cfg.get(f"{section}.{key}")
    if raw is None:
        return None
    if cast is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return cast(raw)


def _load_data(data: str, fmt: str, max_len: int):
    ds = parse_dataset(data, format=fmt)
    return fold_long_sequences(ds, max_len=max_len)


def _model_cfg(file_cfg, M, k, H, W, d_e, variant, seed) -> CAKTConfig:
    k = _merge(file_cfg, "model", "k", k, int) or 6
    H = _merge(file_cfg, "model", "h", H, int) or 17
    W = _merge(file_cfg, "model", "w", W, int)
    d_e = _merge(file_cfg, "model", "d_e", d_e, int)
    variant = _merge(file_cfg, "model", "variant", variant, str) or "CAKT"
    if W is None:
        W = H
    violations = []
    if d_e is not None and d_e != H * W:
        violations.append(f"declared d_e={d_e} but H*W={H * W}")
    if variant not in VARIANTS:
        violations.append(f"unknown variant {variant!r}")
    if violations:
        raise ConfigError("; ".join(violations))
    return CAKTConfig(M=M, k=k, H=H, W=W, variant=variant, seed=seed)


def _train_cfg(file_cfg, lr, batch_size, epochs, seed, no_lr_decay) -> TrainConfig:
    kwargs = {}
    lr = _merge(file_cfg, "train", "lr", lr, float)
    if lr is not None:
        kwargs["lr"] = lr
    batch_size = _merge(file_cfg, "train", "batch_size", batch_size, int)
    if batch_size is not None:
        kwargs["batch_size"] = batch_size
    epochs = _merge(file_cfg, "train", "epochs", epochs, int)
    if epochs is not None:
        kwargs["epochs"] = epochs
    if no_lr_decay or _merge(file_cfg, "train", "no_lr_decay", None, bool):
        kwargs["lr_decay_every"] = 0
    kwargs["seed"] = seed
    return TrainConfig(**kwargs)


common_options = [
    click.option("--config", "config_path", type=click.Path(), default=None, help="INI config file."),
    click.option("--out", "out_dir", default="runs/latest", show_default=True),
    click.option("--seed", type=int, default=None, help="Random seed (default 0)."),
]

data_options = [
    click.option("--data", "data_path", type=click.Path(), default=None, help="Input dataset."),
    click.option(
        "--format",
        "data_format",
        type=click.Choice(["assistments_csv", "canonical_jsonl"]),
        default=None,
    ),
    click.option("--max-len", type=int, default=None, help="Fold sequences longer than this."),
]

model_options = [
    click.option("--k", type=int, default=None, help="Same-concept window size."),
    click.option("--H", "H", type=int, default=None, help="Feature map height."),
    click.option("--W", "W", type=int, default=None, help="Feature map width (default: H)."),
    click.option("--d-e", "d_e", type=int, default=None, help="Declared embedding size (must equal H*W)."),
    click.option("--variant", type=click.Choice(list(VARIANTS)), default=None),
]

train_options = [
    click.option("--lr", type=float, default=None),
    click.option("--batch-size", type=int, default=None),
    click.option("--epochs", type=int, default=None),
    click.option("--no-lr-decay", is_flag=True, default=False),
    click.option("--desk-scale", is_flag=True, default=False, help="Bound students, epochs and grids."),
]


def add_options(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn

    return deco


DESK_MAX_STUDENTS = 500
DESK_MAX_EPOCHS = 5
DESK_MAX_GRID = 3


def _apply_desk_scale(ds, train_cfg: TrainConfig):
    if len(ds.sequences) > DESK_MAX_STUDENTS:
        ds.sequences = ds.sequences[:DESK_MAX_STUDENTS]
    if train_cfg.epochs > DESK_MAX_EPOCHS:
        train_cfg.epochs = DESK_MAX_EPOCHS
    return ds, train_cfg


@click.group()
def main():
    """Knowledge-tracing experiment harness."""
    _set_threads()


@main.command()
@add_options(common_options)
@add_options(data_options)
@guarded
def ingest(config_path, out_dir, seed, data_path, data_format, max_len):
    """Parse a raw dataset, fold long sequences, write the canonical form."""
    started = time.time()
    file_cfg = _load_config_file(config_path)
    data_path = _merge(file_cfg, "data", "path", data_path, str)
    data_format = _merge(file_cfg, "data", "format", data_format, str) or "assistments_csv"
    max_len = _merge(file_cfg, "data", "max_len", max_len, int) or 200
    if not data_path:
        raise ConfigError("--data is required")
    if not Path(data_path).exists():
        raise DataError(f"input file {data_path} does not exist")

    ds = parse_dataset(data_path, format=data_format)
    folded = fold_long_sequences(ds, max_len=max_len)
    out = _resolve_out(out_dir)
    write_canonical_jsonl(folded, out / "dataset.jsonl")
    if ds.concept_map is not None:
        with open(out / "concept_map.json", "w", encoding="utf-8") as f:
            json.dump({str(k): v for k, v in ds.concept_map.items()}, f, indent=2, sort_keys=True)
    n_inter = folded.num_interactions
    n_students = len(ds.sequences)
    click.echo(f"{folded.M}, {n_students}, {n_inter}, {n_inter // max(n_students, 1)}")
    _write_manifest(
        out,
        "ingest",
        {"data": data_path, "format": data_format, "max_len": max_len, "seed": seed},
        started,
    )


@main.command()
@add_options(common_options)
@add_options(data_options)
@add_options(model_options)
@add_options(train_options)
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--folds-used", type=int, default=1, show_default=True)
@click.option("--test-frac", type=float, default=0.2, show_default=True)
@guarded
def train(
    config_path, out_dir, seed, data_path, data_format, max_len, k, H, W, d_e, variant,
    lr, batch_size, epochs, no_lr_decay, desk_scale, folds, folds_used, test_frac,
):
    """Train a model with cross-validation and save the best checkpoint."""
    from cakt.model import save_checkpoint
    from cakt.reports import write_history_csv
    from cakt.training import train as train_cv

    started = time.time()
    file_cfg = _load_config_file(config_path)
    seed = seed if seed is not None else int(_merge(file_cfg, "run", "seed", None, int) or 0)
    data_path = _merge(file_cfg, "data", "path", data_path, str)
    data_format = _merge(file_cfg, "data", "format", data_format, str) or "canonical_jsonl"
    max_len = _merge(file_cfg, "data", "max_len", max_len, int) or 200
    if not data_path:
        raise ConfigError("--data is required")

    ds = _load_data(data_path, data_format, max_len)
    train_cfg = _train_cfg(file_cfg, lr, batch_size, epochs, seed, no_lr_decay)
    model_cfg = _model_cfg(file_cfg, ds.M, k, H, W, d_e, variant, seed)
    if desk_scale:
        ds, train_cfg = _apply_desk_scale(ds, train_cfg)

    split = split_train_test(ds, test_frac=test_frac, folds=folds, seed=seed)
    model, histories, best_fold = train_cv(split["cv_folds"][:folds_used], model_cfg, train_cfg)

    out = _resolve_out(out_dir)
    save_checkpoint(out / "checkpoint.pt", model, extra={"best_fold": best_fold})
    for fi, hist in enumerate(histories):
        write_history_csv(hist, out / f"history_fold{fi}.csv")
    _write_manifest(
        out,
        "train",
        {
            "data": data_path,
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "folds_used": folds_used,
            "test_frac": test_frac,
            "seed": seed,
            "desk_scale": desk_scale,
        },
        started,
    )
    click.echo(f"checkpoint written to {out / 'checkpoint.pt'} (best fold {best_fold})")


@main.command(name="eval")
@add_options(common_options)
@add_options(data_options)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--test-frac", type=float, default=0.2, show_default=True)
@click.option("--folds", type=int, default=5, show_default=True)
@guarded
def eval_cmd(config_path, out_dir, seed, data_path, data_format, max_len, checkpoint_path, test_frac, folds):
    """Evaluate a checkpoint on the held-out test split of a dataset."""
    from cakt.evaluation import evaluate
    from cakt.reports import write_eval_csv

    started = time.time()
    file_cfg = _load_config_file(config_path)
    seed = seed if seed is not None else 0
    data_path = _merge(file_cfg, "data", "path", data_path, str)
    data_format = _merge(file_cfg, "data", "format", data_format, str) or "canonical_jsonl"
    max_len = _merge(file_cfg, "data", "max_len", max_len, int) or 200
    if not data_path:
        raise ConfigError("--data is required")
    ds = _load_data(data_path, data_format, max_len)
    split = split_train_test(ds, test_frac=test_frac, folds=folds, seed=seed)
    report = evaluate(checkpoint_path, split["test"])
    out = _resolve_out(out_dir)
    write_eval_csv([report], out / "evaluation.csv")
    _write_manifest(
        out,
        "eval",
        {"data": data_path, "checkpoint": str(checkpoint_path), "seed": seed},
        started,
    )
    click.echo(f"test AUC {report.mean_auc:.4f} over {report.n_predictions} predictions")


@main.command()
@add_options(common_options)
@add_options(data_options)
@add_options(model_options)
@add_options(train_options)
@click.option("--axis", type=click.Choice(["k", "batch_size", "H"]), required=True)
@click.option("--values", default=None, help="Comma-separated grid values (default: standard grid).")
@click.option("--seeds", default="0", show_default=True, help="Comma-separated seeds.")
@guarded
def sweep(
    config_path, out_dir, seed, data_path, data_format, max_len, k, H, W, d_e, variant,
    lr, batch_size, epochs, no_lr_decay, desk_scale, axis, values, seeds,
):
    """Sensitivity sweep over one hyperparameter axis."""
    from cakt.evaluation import SweepGrid, sweep as run_sweep
    from cakt.reports import plot_sweep, write_sweep_csv

    started = time.time()
    file_cfg = _load_config_file(config_path)
    seed0 = seed if seed is not None else 0
    data_path = _merge(file_cfg, "data", "path", data_path, str)
    data_format = _merge(file_cfg, "data", "format", data_format, str) or "canonical_jsonl"
    max_len = _merge(file_cfg, "data", "max_len", max_len, int) or 200
    if not data_path:
        raise ConfigError("--data is required")
    ds = _load_data(data_path, data_format, max_len)
    train_cfg = _train_cfg(file_cfg, lr, batch_size, epochs, seed0, no_lr_decay)
    model_cfg = _model_cfg(file_cfg, ds.M, k, H, W, d_e, variant, seed0)
    grid_values = [int(v) for v in values.split(",")] if values else []
    grid = SweepGrid(axis=axis, values=grid_values)
    if desk_scale:
        ds, train_cfg = _apply_desk_scale(ds, train_cfg)
        grid.values = grid.values[:DESK_MAX_GRID]
    seed_list = tuple(int(s) for s in seeds.split(","))

    rows = run_sweep(ds, grid, model_cfg, train_cfg, seeds=seed_list)
    out = _resolve_out(out_dir)
    write_sweep_csv(rows, out / "sweep.csv")
    plot_sweep(rows, out / "sweep.png")
    _write_manifest(
        out,
        "sweep",
        {
            "data": data_path,
            "axis": axis,
            "values": grid.values,
            "seeds": list(seed_list),
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "seed": seed0,
            "desk_scale": desk_scale,
        },
        started,
    )
    click.echo(f"sweep results written to {out / 'sweep.csv'}")


@main.command()
@add_options(common_options)
@add_options(data_options)
@add_options(model_options)
@add_options(train_options)
@click.option("--seeds", default="0", show_default=True, help="Comma-separated seeds.")
@guarded
def ablate(
    config_path, out_dir, seed, data_path, data_format, max_len, k, H, W, d_e, variant,
    lr, batch_size, epochs, no_lr_decay, desk_scale, seeds,
):
    """Run the ablation suite (eight variants plus the unmodified model)."""
    from cakt.evaluation import ablation_suite
    from cakt.reports import write_ablation_csv

    started = time.time()
    file_cfg = _load_config_file(config_path)
    seed0 = seed if seed is not None else 0
    data_path = _merge(file_cfg, "data", "path", data_path, str)
    data_format = _merge(file_cfg, "data", "format", data_format, str) or "canonical_jsonl"
    max_len = _merge(file_cfg, "data", "max_len", max_len, int) or 200
    if not data_path:
        raise ConfigError("--data is required")
    ds = _load_data(data_path, data_format, max_len)
    train_cfg = _train_cfg(file_cfg, lr, batch_size, epochs, seed0, no_lr_decay)
    model_cfg = _model_cfg(file_cfg, ds.M, k, H, W, d_e, variant, seed0)
    if desk_scale:
        ds, train_cfg = _apply_desk_scale(ds, train_cfg)
    seed_list = tuple(int(s) for s in seeds.split(","))

    rows = ablation_suite(ds, model_cfg, train_cfg, seeds=seed_list)
    out = _resolve_out(out_dir)
    write_ablation_csv(rows, out / "ablation.csv")
    _write_manifest(
        out,
        "ablate",
        {
            "data": data_path,
            "seeds": list(seed_list),
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "seed": seed0,
            "desk_scale": desk_scale,
        },
        started,
    )
    click.echo(f"ablation results written to {out / 'ablation.csv'}")


@main.command()
@add_options(common_options)
@click.option("--run-dir", type=click.Path(), required=True, help="A directory produced by train.")
@click.option("--data", "data_path", type=click.Path(), default=None, help="Dataset for the heatmap.")
@click.option(
    "--format", "data_format", type=click.Choice(["assistments_csv", "canonical_jsonl"]), default=None
)
@guarded
def report(config_path, out_dir, seed, run_dir, data_path, data_format):
    """Emit plots (loss curves, knowledge heatmap) from a finished run."""
    import csv as _csv

    from cakt.model import load_checkpoint
    from cakt.reports import emit_reports

    started = time.time()
    run = Path(run_dir)
    hist_path = run / "history_fold0.csv"
    if not hist_path.exists():
        raise DataError(f"{hist_path} not found; is {run_dir} a train output directory?")
    with open(hist_path, newline="", encoding="utf-8") as f:
        history = [
            {k: float(v) if k != "epoch" else int(v) for k, v in row.items()}
            for row in _csv.DictReader(f)
        ]
    heatmap_model = heatmap_seq = None
    ckpt = run / "checkpoint.pt"
    if ckpt.exists() and data_path:
        heatmap_model, _ = load_checkpoint(ckpt)
        ds = _load_data(data_path, data_format or "canonical_jsonl", 200)
        heatmap_seq = max(ds.sequences, key=len)
    out = _resolve_out(out_dir)
    written = emit_reports(history, out, heatmap_model=heatmap_model, heatmap_sequence=heatmap_seq)
    _write_manifest(out, "report", {"run_dir": str(run_dir), "seed": seed}, started)
    click.echo("\n".join(f"{name}: {path}" for name, path in written.items()))


@main.command()
@add_options(common_options)
@click.option("--students", type=int, default=2000, show_default=True)
@click.option("--concepts", "M", type=int, default=20, show_default=True)
@click.option("--length", type=int, default=100, show_default=True)
@guarded
def synth(config_path, out_dir, seed, students, M, length):
    """Generate a power-law learning-curve synthetic dataset."""
    started = time.time()
    seed0 = seed if seed is not None else 0
    ds = generate_synthetic(num_students=students, M=M, seq_len=length, seed=seed0)
    out = _resolve_out(out_dir)
    write_canonical_jsonl(ds, out / "dataset.jsonl")
    _write_manifest(
        out,
        "synth",
        {"students": students, "M": M, "length": length, "seed": seed0},
        started,
    )
    click.echo(f"wrote {out / 'dataset.jsonl'} ({ds.num_interactions} interactions)")


if __name__ == "__main__":
    main()
