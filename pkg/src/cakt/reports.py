"""CSV and figure emission for training histories, sweeps and ablations."""

from __future__ import annotations

import csv
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


class ReportError(ValueError):
    """Raised for empty inputs or unwritable output locations."""


def _check_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"cannot create output directory {out}: {e}") from None
    if not os.access(out, os.W_OK):
        raise ReportError(f"output directory {out} is not writable")
    return out


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def _write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in fieldnames])


def write_history_csv(history: list, path) -> None:
    if not history:
        raise ReportError("empty training history")
    _write_csv(path, ["epoch", "train_loss", "val_loss", "val_auc", "lr"], history)


def write_sweep_csv(rows: list, path) -> None:
    if not rows:
        raise ReportError("empty sweep results")
    _write_csv(path, ["axis", "value", "seed", "fold", "auc"], rows)


def write_ablation_csv(rows: list, path) -> None:
    if not rows:
        raise ReportError("empty ablation results")
    _write_csv(path, ["variant", "seed", "fold", "auc"], rows)


def write_eval_csv(reports: list, path) -> None:
    if not reports:
        raise ReportError("empty evaluation results")
    rows = []
    for r in reports:
        aucs = [a for a in r.fold_aucs if not np.isnan(a)]
        rows.append(
            {
                "dataset": r.dataset,
                "variant": r.variant,
                "mean_auc": float(np.mean(aucs)) if aucs else float("nan"),
                "std_auc": float(np.std(aucs)) if aucs else float("nan"),
                "n_predictions": r.n_predictions,
            }
        )
    _write_csv(path, ["dataset", "variant", "mean_auc", "std_auc", "n_predictions"], rows)


def plot_loss_curves(history: list, path) -> None:
    if not history:
        raise ReportError("empty training history")
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [row["train_loss"] for row in history], label="train loss")
    ax.plot(epochs, [row["val_loss"] for row in history], label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE per prediction")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_sweep(rows: list, path) -> None:
    if not rows:
        raise ReportError("empty sweep results")
    axis = rows[0]["axis"]
    by_value: dict = {}
    for row in rows:
        if not np.isnan(row["auc"]):
            by_value.setdefault(row["value"], []).append(row["auc"])
    values = sorted(by_value)
    means = [np.mean(by_value[v]) for v in values]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(values, means, marker="o")
    ax.set_xlabel(axis)
    ax.set_ylabel("mean test AUC")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_knowledge_heatmap(model, sequence, path) -> np.ndarray:
    """Per-concept mastery over time for one student; returns the M x (T-1) matrix."""
    trace = model.trace(sequence)
    matrix = trace.mastery[0].numpy().T  # (M, T-1)
    fig, ax = plt.subplots(figsize=(8, 4))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis", vmin=0, vmax=1)
    ax.set_xlabel("step")
    ax.set_ylabel("concept")
    fig.colorbar(im, ax=ax, label="mastery probability")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return matrix


def emit_reports(
    history: list,
    out_dir,
    sweep_rows: list = None,
    ablation_rows: list = None,
    eval_reports: list = None,
    heatmap_model=None,
    heatmap_sequence=None,
) -> dict:
    """Write all requested CSVs and figures under ``out_dir``.

    Returns a name -> path mapping of the files written.  Empty history is
    refused rather than producing empty files.
    """
    out = _check_dir(out_dir)
    written = {}
    write_history_csv(history, out / "history.csv")
    plot_loss_curves(history, out / "loss_curves.png")
    written["history_csv"] = out / "history.csv"
    written["loss_plot"] = out / "loss_curves.png"
    if sweep_rows:
        write_sweep_csv(sweep_rows, out / "sweep.csv")
        plot_sweep(sweep_rows, out / "sweep.png")
        written["sweep_csv"] = out / "sweep.csv"
        written["sweep_plot"] = out / "sweep.png"
    if ablation_rows:
        write_ablation_csv(ablation_rows, out / "ablation.csv")
        written["ablation_csv"] = out / "ablation.csv"
    if eval_reports:
        write_eval_csv(eval_reports, out / "evaluation.csv")
        written["evaluation_csv"] = out / "evaluation.csv"
    if heatmap_model is not None and heatmap_sequence is not None:
        plot_knowledge_heatmap(heatmap_model, heatmap_sequence, out / "knowledge_heatmap.png")
        written["heatmap"] = out / "knowledge_heatmap.png"
    return written
