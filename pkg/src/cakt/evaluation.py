"""AUC, test-set evaluation, hyperparameter sweeps and the ablation suite."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from cakt.config import CAKTConfig, TrainConfig
from cakt.data import SequenceDataset, split_train_test
from cakt.model import CAKT, load_checkpoint
from cakt.training import evaluate_on, train_fold

# Default grids for the three sensitivity axes.
DEFAULT_GRIDS = {
    "k": [4, 6, 8, 10, 12, 14],
    "batch_size": [8, 16, 32, 48, 64, 80, 96],
    "H": [11, 13, 15, 17, 19],
}

# The eight ablations plus the unmodified model, in report order.
ABLATION_VARIANTS = (
    "LSTM_LC",
    "FC_LC",
    "C2D_LC",
    "SA_LC",
    "NO_EXP_DECAY",
    "FC_POOLING",
    "FC_OUTPUT",
    "MEAN_FUSION",
    "ORIG_CAKT",
)


@dataclass
class EvalReport:
    dataset: str
    variant: str
    hyperparameters: dict
    fold_aucs: list
    mean_auc: float
    n_predictions: int
    runtime_seconds: float


@dataclass
class SweepGrid:
    axis: str
    values: list = field(default_factory=list)
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.axis not in DEFAULT_GRIDS:
            raise ValueError(f"axis must be one of {sorted(DEFAULT_GRIDS)}, got {self.axis!r}")
        if not self.values:
            self.values = list(DEFAULT_GRIDS[self.axis])


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC over pooled predictions; ties count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D arrays")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != len(labels):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        missing = "positive" if n_pos == 0 else "negative"
        raise ValueError(f"AUC undefined: no {missing} labels present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate(checkpoint, test_set: SequenceDataset, batch_size: int = 64) -> EvalReport:
    """Eval-mode forward over the test set, pooled AUC.

    ``checkpoint`` is a checkpoint path or an already-built model.
    """
    start = time.perf_counter()
    if isinstance(checkpoint, CAKT):
        model = checkpoint
    else:
        model, _ = load_checkpoint(checkpoint)
    if model.cfg.M != test_set.M:
        raise ValueError(f"checkpoint M={model.cfg.M} does not match dataset M={test_set.M}")
    _, value, preds, _ = evaluate_on(model, test_set.sequences, batch_size)
    return EvalReport(
        dataset=test_set.provenance,
        variant=model.cfg.variant,
        hyperparameters={"k": model.cfg.k, "H": model.cfg.H, "W": model.cfg.W},
        fold_aucs=[value],
        mean_auc=value,
        n_predictions=len(preds),
        runtime_seconds=time.perf_counter() - start,
    )


def _train_and_test(dataset, model_cfg, train_cfg, seed, folds_used, test_frac, n_folds):
    """One grid point: split, train per fold, evaluate on the held-out test set."""
    split = split_train_test(dataset, test_frac=test_frac, folds=n_folds, seed=seed)
    results = []
    for fi, (train_part, val_part) in enumerate(split["cv_folds"][:folds_used]):
        model, _ = train_fold(train_part.sequences, val_part.sequences, model_cfg, train_cfg)
        _, value, _, _ = evaluate_on(model, split["test"].sequences, train_cfg.batch_size)
        results.append((fi, value))
    return results


def sweep(
    dataset: SequenceDataset,
    grid: SweepGrid,
    base_model_cfg: CAKTConfig,
    base_train_cfg: TrainConfig,
    seeds=(0,),
    folds_used: int = 1,
    test_frac: float = 0.2,
    n_folds: int = 5,
) -> list:
    """Train and evaluate one model per grid value and seed.

    Returns rows ``{axis, value, seed, fold, auc, error}`` sorted by grid
    value; a failed point is kept with auc=nan and the error message rather
    than silently dropped.
    """
    if not grid.values:
        raise ValueError("empty sweep grid")
    rows = []
    for value in sorted(grid.values):
        mc = base_model_cfg.to_dict()
        tc = base_train_cfg.to_dict()
        if grid.axis == "k":
            mc["k"] = value
        elif grid.axis == "H":
            mc["H"] = value
            mc["W"] = value
        else:
            tc["batch_size"] = value
        for seed in seeds:
            mc["seed"] = seed
            tc["seed"] = seed
            try:
                model_cfg = CAKTConfig.from_dict(mc)
                train_cfg = TrainConfig.from_dict(tc)
                for fi, value_auc in _train_and_test(
                    dataset, model_cfg, train_cfg, seed, folds_used, test_frac, n_folds
                ):
                    rows.append(
                        {
                            "axis": grid.axis,
                            "value": value,
                            "seed": seed,
                            "fold": fi,
                            "auc": value_auc,
                            "error": "",
                        }
                    )
            except Exception as exc:  # keep the grid point visible
                rows.append(
                    {
                        "axis": grid.axis,
                        "value": value,
                        "seed": seed,
                        "fold": -1,
                        "auc": float("nan"),
                        "error": str(exc),
                    }
                )
    return rows


def ablation_suite(
    dataset: SequenceDataset,
    base_model_cfg: CAKTConfig,
    base_train_cfg: TrainConfig,
    seeds=(0,),
    folds_used: int = 1,
    test_frac: float = 0.2,
    n_folds: int = 5,
    variants=ABLATION_VARIANTS,
) -> list:
    """Run every ablation variant plus the unmodified model on shared splits.

    Returns rows ``{variant, seed, fold, auc, error}``; the unmodified model
    is reported as ORIG_CAKT.
    """
    rows = []
    for label in variants:
        variant = "CAKT" if label == "ORIG_CAKT" else label
        for seed in seeds:
            mc = base_model_cfg.to_dict()
            mc.update(variant=variant, seed=seed)
            tc = base_train_cfg.to_dict()
            tc["seed"] = seed
            try:
                model_cfg = CAKTConfig.from_dict(mc)
                train_cfg = TrainConfig.from_dict(tc)
                for fi, value_auc in _train_and_test(
                    dataset, model_cfg, train_cfg, seed, folds_used, test_frac, n_folds
                ):
                    rows.append(
                        {"variant": label, "seed": seed, "fold": fi, "auc": value_auc, "error": ""}
                    )
            except Exception as exc:
                rows.append(
                    {"variant": label, "seed": seed, "fold": -1, "auc": float("nan"), "error": str(exc)}
                )
    return rows


def mean_auc_by(rows: list, key: str) -> dict:
    """Mean AUC per distinct value of ``key``, ignoring failed rows."""
    groups: dict = {}
    for row in rows:
        if not math.isnan(row["auc"]):
            groups.setdefault(row[key], []).append(row["auc"])
    return {k: float(np.mean(v)) for k, v in groups.items()}
