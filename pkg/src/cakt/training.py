"""Batching, masked BCE loss, the optimization loop and gradient checking."""

from __future__ import annotations

import copy
import math
from typing import Optional

import numpy as np
import torch

from cakt.config import CAKTConfig, TrainConfig
from cakt.history import history_indices
from cakt.model import CAKT, decay_exempt, parameter_groups


def make_batch(sequences, M: int, k: int, cache: Optional[dict] = None, dtype=torch.float32) -> dict:
    """Pad sequences to a common length and attach history gather plans.

    Returns tensors: onehots (B,T,2M), concepts (B,T) long, responses (B,T),
    mask (B,T) bool, hist_idx (B,T-1,k) long with -1 padding, hist_gaps
    (B,T-1,k).  Masked-out positions contribute nothing downstream.
    ``cache`` memoizes per-sequence gather plans across epochs.
    """
    B = len(sequences)
    T = max(len(s) for s in sequences)
    onehots = torch.zeros(B, T, 2 * M, dtype=dtype)
    concepts = torch.zeros(B, T, dtype=torch.long)
    responses = torch.zeros(B, T, dtype=dtype)
    mask = torch.zeros(B, T, dtype=torch.bool)
    hist_idx = torch.full((B, max(T - 1, 0), k), -1, dtype=torch.long)
    hist_gaps = torch.zeros(B, max(T - 1, 0), k, dtype=dtype)
    for i, seq in enumerate(sequences):
        L = len(seq)
        onehots[i, :L] = torch.from_numpy(seq.onehots).to(dtype)
        concepts[i, :L] = torch.tensor(seq.concepts, dtype=torch.long)
        responses[i, :L] = torch.tensor(seq.responses, dtype=dtype)
        mask[i, :L] = True
        key = (id(seq), k)
        if cache is not None and key in cache:
            idx, gaps = cache[key]
        else:
            idx, gaps = history_indices(seq.concepts, k)
            if cache is not None:
                cache[key] = (idx, gaps)
        if L >= 2:
            hist_idx[i, : L - 1] = torch.from_numpy(idx)
            hist_gaps[i, : L - 1] = torch.from_numpy(gaps).to(dtype)
    return {
        "onehots": onehots,
        "concepts": concepts,
        "responses": responses,
        "mask": mask,
        "hist_idx": hist_idx,
        "hist_gaps": hist_gaps,
    }


def append_padding(batch: dict, n: int) -> dict:
    """Extend every sequence in a batch by ``n`` masked-out padding steps."""
    out = {}
    for key, t in batch.items():
        pad_shape = list(t.shape)
        pad_shape[1] = n
        if key == "hist_idx":
            pad = torch.full(pad_shape, -1, dtype=t.dtype)
        else:
            pad = torch.zeros(pad_shape, dtype=t.dtype)
        out[key] = torch.cat([t, pad], dim=1)
    return out


def bce_loss(preds: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor):
    """Masked binary cross-entropy.

    Returns (total, mean, count): the summed loss over unmasked predictions,
    the per-prediction mean used for gradient steps and logging, and the
    number of unmasked predictions.  Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the log.
    """
    if preds.shape != labels.shape or preds.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: preds {tuple(preds.shape)}, labels {tuple(labels.shape)}, "
            f"mask {tuple(mask.shape)}"
        )
    p = preds.clamp(1e-7, 1 - 1e-7)
    per = -(labels * torch.log(p) + (1 - labels) * torch.log1p(-p))
    per = torch.where(mask, per, torch.zeros_like(per))
    total = per.sum()
    count = int(mask.sum().item())
    mean = total / count if count > 0 else total * 0.0
    return total, mean, count


def _iter_batches(indices, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def _make_optimizer(model: CAKT, cfg: TrainConfig) -> torch.optim.Optimizer:
    decayed, exempt = [], []
    for name, p in model.named_parameters():
        (exempt if decay_exempt(name) else decayed).append(p)
    return torch.optim.AdamW(
        [
            {"params": decayed, "weight_decay": cfg.l2},
            {"params": exempt, "weight_decay": 0.0},
        ],
        lr=cfg.lr,
    )


def evaluate_on(model: CAKT, sequences, batch_size: int = 64, cache: Optional[dict] = None):
    """Eval-mode loss and pooled AUC over a set of sequences.

    Returns (mean_loss, auc, preds, labels); auc is nan when only one class
    is present.
    """
    from cakt.evaluation import auc as compute_auc

    model.eval()
    all_preds, all_labels = [], []
    total, count = 0.0, 0
    usable = [s for s in sequences if len(s) >= 2]
    with torch.no_grad():
        for chunk in _iter_batches(list(range(len(usable))), batch_size):
            batch = make_batch([usable[i] for i in chunk], model.cfg.M, model.cfg.k, cache)
            trace = model(batch)
            t, _, n = bce_loss(trace.preds, trace.labels, trace.mask)
            total += float(t.item())
            count += n
            m = trace.mask
            all_preds.append(trace.preds[m].numpy())
            all_labels.append(trace.labels[m].numpy())
    preds = np.concatenate(all_preds) if all_preds else np.zeros(0)
    labels = np.concatenate(all_labels) if all_labels else np.zeros(0)
    mean_loss = total / count if count else 0.0
    if len(np.unique(labels)) < 2:
        return mean_loss, float("nan"), preds, labels
    return mean_loss, compute_auc(preds, labels), preds, labels


def train_fold(train_seqs, val_seqs, model_cfg: CAKTConfig, train_cfg: TrainConfig):
    """Train one model on one (train, validation) pair.

    Returns (model, history) where the model carries the best-validation-AUC
    weights and history is a list of dict rows
    ``{epoch, train_loss, val_loss, val_auc, lr}``.
    """
    torch.manual_seed(train_cfg.seed)
    model = CAKT(model_cfg)
    optimizer = _make_optimizer(model, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    cache: dict = {}
    usable = [s for s in train_seqs if len(s) >= 2]
    if not usable:
        raise ValueError("no trainable sequences (all have length < 2)")

    history = []
    best_auc = -math.inf
    best_state = None
    stale = 0
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr_at_epoch(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(usable))
        model.train()
        total, count = 0.0, 0
        for bi, chunk in enumerate(_iter_batches(order, train_cfg.batch_size)):
            batch = make_batch([usable[i] for i in chunk], model_cfg.M, model_cfg.k, cache)
            trace = model(batch)
            t, mean, n = bce_loss(trace.preds, trace.labels, trace.mask)
            if not torch.isfinite(mean):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {bi} "
                    f"(sequences {[usable[i].student for i in chunk[:4]]}...)"
                )
            optimizer.zero_grad()
            mean.backward()
            if train_cfg.grad_clip and train_cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            optimizer.step()
            total += float(t.item())
            count += n
        train_loss = total / count if count else 0.0
        val_loss, val_auc, _, _ = evaluate_on(model, val_seqs, train_cfg.batch_size, cache)
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "val_auc": val_auc,
                "lr": lr,
            }
        )
        if not math.isnan(val_auc) and val_auc > best_auc:
            best_auc = val_auc
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if train_cfg.early_stop_patience and stale >= train_cfg.early_stop_patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


def train(folds, model_cfg: CAKTConfig, train_cfg: TrainConfig):
    """Train over cross-validation folds and keep the best checkpoint.

    ``folds`` is a list of (train_dataset_or_seqs, val_dataset_or_seqs)
    pairs.  Returns (best_model, fold_histories, best_fold_index).
    """
    if not folds:
        raise ValueError("need at least one (train, validation) fold")
    best_model = None
    best_auc = -math.inf
    best_fold = -1
    histories = []
    for fi, (train_part, val_part) in enumerate(folds):
        train_seqs = getattr(train_part, "sequences", train_part)
        val_seqs = getattr(val_part, "sequences", val_part)
        model, hist = train_fold(train_seqs, val_seqs, model_cfg, train_cfg)
        histories.append(hist)
        fold_best = max(
            (row["val_auc"] for row in hist if not math.isnan(row["val_auc"])),
            default=-math.inf,
        )
        if fold_best > best_auc:
            best_auc = fold_best
            best_model = model
            best_fold = fi
    return best_model, histories, best_fold


# -- gradient checking ------------------------------------------------------

TINY_CONFIG = dict(M=5, k=3, H=4, W=4)


def grad_check(
    model_cfg: Optional[CAKTConfig] = None,
    tolerance: float = 1e-4,
    seed: int = 0,
    samples_per_group: int = 20,
    step: float = 1e-5,
) -> dict:
    """Compare analytic gradients with central finite differences at float64.

    A tiny model and batch are built from ``model_cfg`` (default: M=5, k=3,
    H=W=4).  For every top-level parameter group at least
    ``samples_per_group`` coordinates are perturbed by +-``step``.  Returns
    ``{"groups": {name: {"max_rel_err", "worst_coord", "checked"}},
    "max_rel_err", "passed", "failures"}``.
    """
    from cakt.data import generate_synthetic

    if model_cfg is None:
        model_cfg = CAKTConfig(**TINY_CONFIG, seed=seed)
    torch.manual_seed(seed)
    model = CAKT(model_cfg).double()
    model.train()

    ds = generate_synthetic(num_students=2, M=model_cfg.M, seq_len=6, seed=seed)
    batch = make_batch(ds.sequences, model_cfg.M, model_cfg.k, dtype=torch.float64)

    def loss_value() -> torch.Tensor:
        trace = model(batch)
        _, mean, _ = bce_loss(trace.preds, trace.labels, trace.mask)
        return mean

    loss = loss_value()
    params = [p for _, p in model.named_parameters()]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grad_by_name = {
        name: g for (name, _), g in zip(model.named_parameters(), grads)
    }

    rng = np.random.default_rng(seed)
    report: dict = {"groups": {}, "max_rel_err": 0.0, "failures": []}
    for group_name, members in parameter_groups(model).items():
        worst = 0.0
        worst_coord = None
        checked = 0
        # spread the coordinate budget over the group's tensors
        budget = max(samples_per_group, len(members))
        per_tensor = max(1, budget // len(members))
        for name, p in members:
            numel = p.numel()
            n_coords = min(numel, per_tensor)
            coords = rng.choice(numel, size=n_coords, replace=False)
            flat = p.detach().view(-1)
            g = grad_by_name[name]
            g_flat = g.reshape(-1) if g is not None else torch.zeros_like(flat)
            for c in coords:
                c = int(c)
                orig = flat[c].item()
                with torch.no_grad():
                    flat[c] = orig + step
                lp = loss_value().item()
                with torch.no_grad():
                    flat[c] = orig - step
                lm = loss_value().item()
                with torch.no_grad():
                    flat[c] = orig
                fd = (lp - lm) / (2 * step)
                ana = g_flat[c].item()
                # absolute floor keeps FD roundoff on near-zero gradients
                # from registering as large relative errors
                rel = abs(ana - fd) / max(abs(ana), abs(fd), 1e-6)
                checked += 1
                if rel > worst:
                    worst = rel
                    worst_coord = (name, c, ana, fd)
        report["groups"][group_name] = {
            "max_rel_err": worst,
            "worst_coord": worst_coord,
            "checked": checked,
        }
        report["max_rel_err"] = max(report["max_rel_err"], worst)
        if worst >= tolerance:
            report["failures"].append((group_name, worst, worst_coord))
    report["passed"] = not report["failures"]
    return report
