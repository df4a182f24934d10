"""Acceptance gate: ten end-to-end criteria, one pass/fail line each.

The heavyweight directional experiments (criteria 5-7) run at desk scale on
a single CPU; criterion 9 (full-scale reproduction on ASSISTments2009) is a
documented skip because it needs the full corpus and accelerator-hours.
"""

import time

import numpy as np
import pytest
import torch

from cakt.config import CAKTConfig, TrainConfig, CHANNEL_PLAN
from cakt.data import generate_synthetic, split_train_test
from cakt.evaluation import auc
from cakt.model import CAKT, ConvStack, state_digest
from cakt.training import (
    append_padding,
    bce_loss,
    evaluate_on,
    grad_check,
    make_batch,
    train_fold,
)

pytestmark = pytest.mark.acceptance


def report(number, name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    print(f"\nACCEPTANCE {number} {name}: {status} {detail}".rstrip())
    assert passed, f"criterion {number} ({name}): {detail}"


# -- shared desk-scale corpus (criteria 6 and 7) ----------------------------

N_SEEDS = 5
EPOCHS = 2


@pytest.fixture(scope="module")
def corpus():
    ds = generate_synthetic(2000, 20, 100, seed=0)
    return split_train_test(ds, test_frac=0.2, folds=5, seed=0)


def _run_variant(split, variant, seed, epochs=EPOCHS):
    cfg = CAKTConfig(M=20, k=4, H=4, W=4, seed=seed, variant=variant)
    tc = TrainConfig(epochs=epochs, batch_size=64, seed=seed)
    train_part, val_part = split["cv_folds"][seed % 5]
    model, _ = train_fold(train_part.sequences, val_part.sequences, cfg, tc)
    _, value, _, _ = evaluate_on(model, split["test"].sequences, 64)
    return value


@pytest.fixture(scope="module")
def cakt_aucs(corpus):
    return [_run_variant(corpus, "CAKT", seed) for seed in range(N_SEEDS)]


# -- criteria ---------------------------------------------------------------


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    result = grad_check(tolerance=1e-4)
    elapsed = time.perf_counter() - start
    ok = result["passed"] and elapsed < 60
    report(
        1,
        "gradient-fidelity",
        ok,
        f"(max_rel_err={result['max_rel_err']:.2e}, {elapsed:.1f}s)",
    )


def test_criterion_2_shape_suite():
    start = time.perf_counter()
    ok = True
    for k in (3, 6):
        for H in (4, 17):
            cfg = CAKTConfig(M=3, k=k, H=H, W=H)
            stack = ConvStack(cfg)
            stack.eval()
            x = torch.randn(2, 1, k, H, H)
            out = x
            for block, (cin, _, cout) in zip(stack.blocks, CHANNEL_PLAN):
                ok = ok and out.shape == (2, cin, k, H, H)
                out = block(out)
                ok = ok and out.shape == (2, cout, k, H, H)
            ok = ok and out.shape == (2, 1, k, H, H)
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < 10
    report(2, "shape-suite", ok, f"({elapsed:.1f}s)")


def test_criterion_3_decay_law():
    ok = True
    for theta in (1.0, 6.0, 50.0):
        gaps = torch.arange(0, 51, dtype=torch.float64)
        scale = torch.exp(-gaps / theta)
        ok = ok and scale[0].item() == 1.0
        at_theta = float(torch.exp(torch.tensor(-theta / theta, dtype=torch.float64)))
        ok = ok and abs(at_theta - np.exp(-1.0)) <= 1e-12
        ok = ok and bool(torch.all(scale[1:] < scale[:-1]))
    report(3, "decay-law", ok)


def test_criterion_4_auc_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 2000))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), 2)
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        diff = pos[:, None] - neg[None, :]
        oracle = ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg))
        worst = max(worst, abs(auc(scores, labels) - oracle))
    report(4, "auc-oracle", worst <= 1e-9, f"(worst |diff|={worst:.1e})")


@pytest.mark.slow
def test_criterion_5_overfit_sanity():
    start = time.perf_counter()
    ds = generate_synthetic(8, 10, 50, seed=0)
    results = []
    for seed in (1, 2, 3):
        cfg = CAKTConfig(M=10, k=3, H=6, W=6, seed=seed)
        tc = TrainConfig(epochs=200, batch_size=8, seed=seed, lr=3e-3, lr_decay_every=0)
        model, hist = train_fold(ds.sequences, ds.sequences[:2], cfg, tc)
        _, train_auc, _, _ = evaluate_on(model, ds.sequences, 8)
        results.append((hist[-1]["train_loss"], train_auc))
    elapsed = time.perf_counter() - start
    ok = all(bce < 0.1 and a > 0.95 for bce, a in results) and elapsed < 300
    detail = ", ".join(f"bce={b:.3f}/auc={a:.3f}" for b, a in results)
    report(5, "overfit-sanity", ok, f"({detail}, {elapsed:.0f}s)")


@pytest.mark.slow
def test_criterion_6_learning_curve_advantage(corpus, cakt_aucs):
    dkt_aucs = [_run_variant(corpus, "DKT_BASELINE", seed) for seed in range(N_SEEDS)]
    cakt_mean = float(np.mean(cakt_aucs))
    dkt_mean = float(np.mean(dkt_aucs))
    ok = cakt_mean >= dkt_mean and cakt_mean > 0.55 and dkt_mean > 0.55
    report(
        6,
        "learning-curve-advantage",
        ok,
        f"(CAKT={cakt_mean:.4f}, DKT={dkt_mean:.4f}, {N_SEEDS} seeds)",
    )


@pytest.mark.slow
def test_criterion_7_ablation_ordering(corpus, cakt_aucs):
    cakt_mean = float(np.mean(cakt_aucs))
    details, ok = [], True
    # the conv-based C2D ablation costs ~50x the affine/recurrent ones per
    # run, so it gets 2 seeds where the cheap variants get the full 5
    for variant in ("LSTM_LC", "FC_LC", "C2D_LC", "SA_LC"):
        n_seeds = 2 if variant == "C2D_LC" else N_SEEDS
        mean = float(np.mean([_run_variant(corpus, variant, seed) for seed in range(n_seeds)]))
        ok = ok and cakt_mean >= mean - 0.005
        details.append(f"{variant}={mean:.4f}")
    report(
        7,
        "ablation-ordering",
        ok,
        f"(ORIG_CAKT={cakt_mean:.4f} vs {', '.join(details)})",
    )


def test_criterion_8_determinism(tmp_path):
    from cakt.evaluation import evaluate
    from cakt.reports import write_eval_csv

    ds = generate_synthetic(12, 5, 8, seed=0)
    cfg = CAKTConfig(M=5, k=3, H=4, W=4, seed=0)
    tc = TrainConfig(epochs=2, batch_size=4, seed=0)

    outs = []
    for run in range(2):
        model, hist = train_fold(ds.sequences[:9], ds.sequences[9:], cfg, tc)
        rep = evaluate(model, generate_synthetic(6, 5, 8, seed=1))
        path = tmp_path / f"eval{run}.csv"
        write_eval_csv([rep], path)
        outs.append((hist[0]["train_loss"], state_digest(model), path.read_bytes()))
    ok = (
        outs[0][0] == outs[1][0]
        and outs[0][1] == outs[1][1]
        and outs[0][2] == outs[1][2]
    )
    report(8, "determinism", ok, f"(digest {outs[0][1][:12]}...)")


def test_criterion_9_full_scale_reproduction():
    print(
        "\nACCEPTANCE 9 full-scale-reproduction: SKIP "
        "(reference result: test AUC 0.8237 +/- 0.015 on ASSISTments2009 with "
        "k=6, H=W=17, batch 32; needs the full corpus and accelerator-hours, "
        "so it is documented here rather than CI-gated)"
    )
    pytest.skip("full-scale ASSISTments2009 run is documented, not CI-gated")


def test_criterion_10_masking_invariance():
    ok = True
    for variant in ("CAKT", "DKT_BASELINE"):
        cfg = CAKTConfig(M=5, k=3, H=4, W=4, seed=0, variant=variant)
        torch.manual_seed(0)
        model = CAKT(cfg)
        model.train()
        ds = generate_synthetic(3, cfg.M, 7, seed=1)
        batch = make_batch(ds.sequences, cfg.M, cfg.k)
        padded = append_padding(batch, 4)

        def run(b):
            trace = model(b)
            _, mean, _ = bce_loss(trace.preds, trace.labels, trace.mask)
            grads = torch.autograd.grad(mean, list(model.parameters()), allow_unused=True)
            preds = trace.preds[trace.mask].detach().numpy()
            labels = trace.labels[trace.mask].detach().numpy()
            return mean.detach(), [g for g in grads if g is not None], auc(preds, labels)

        l1, g1, a1 = run(batch)
        l2, g2, a2 = run(padded)
        ok = ok and torch.equal(l1, l2) and a1 == a2
        ok = ok and len(g1) == len(g2) and all(torch.equal(a, b) for a, b in zip(g1, g2))
    report(10, "masking-invariance", ok)
