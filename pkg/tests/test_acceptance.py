"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two pipeline criteria (5 and 6) share a single benchmark run, which
takes roughly 20 minutes on one CPU core. Deselect with ``-m "not slow"``.
"""
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from test_vae import kl_by_quadrature
from waferlatent import data as wd
from waferlatent.classifier import FUSION_POINTS, NetworkConfig, TrainConfig, build_network, forward, train_supervised
from waferlatent.cli import cmd_ablate, cmd_run
from waferlatent.config import ExperimentConfig, config_from_dict
from waferlatent.metrics import evaluate
from waferlatent.vae import kl_divergence, reconstruction_accuracy, reparameterize

TESTS = Path(__file__).parent


def run_pytest(*selectors):
    """Run a subset of the unit suite in a child interpreter; return (passed, seconds, tail of output)."""
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *selectors],
                          cwd=TESTS.parent, capture_output=True, text=True)
    seconds = time.perf_counter() - start
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode == 0, seconds, tail


GRADIENT_TESTS = [
    "tests/test_tensor.py::test_unary_op_gradients",
    "tests/test_tensor.py::test_binary_op_gradients",
    "tests/test_tensor.py::test_conv2d_gradients",
    "tests/test_tensor.py::test_max_pool_gradients",
    "tests/test_tensor.py::test_mean_pool_gradients",
    "tests/test_tensor.py::test_cross_entropy_gradients",
    "tests/test_tensor.py::test_categorical_nll_gradients",
    "tests/test_tensor.py::test_conv_relu_linear_chain_gradients",
    "tests/test_vae.py::test_reparameterize_gradients",
    "tests/test_vae.py::test_tiny_vae_elbo_gradients",
    "tests/test_classifier.py::test_tiny_network_gradients",
]

ORACLE_TESTS = [
    "tests/test_tensor.py::test_conv_matches_loop_oracle_reference_case",
    "tests/test_tensor.py::test_conv_matches_loop_oracle_random_geometry",
    "tests/test_tensor.py::test_max_pool_matches_loop_oracle",
    "tests/test_tensor.py::test_mean_pool_global_matches_loop",
    "tests/test_semisup.py::test_topk_matches_brute_force",
    "tests/test_metrics.py::test_report_matches_recount_oracle",
    "tests/test_metrics.py::test_confusion_matches_tally",
]


def test_criterion_1_gradient_integrity(criterion):
    ok, seconds, tail = run_pytest(*GRADIENT_TESTS)
    passed = ok and seconds < 120
    criterion(1, passed, f"finite-difference suite: {tail}; {seconds:.1f}s of 120s budget")
    assert passed


def test_criterion_2_oracle_equivalence(criterion):
    ok, seconds, tail = run_pytest(*ORACLE_TESTS)
    criterion(2, ok, f"loop, brute-force, recount and tally oracles: {tail}")
    assert ok


def test_criterion_3_vae_analytics(criterion, pretrained_vae, vae_corpus):
    rng = np.random.default_rng(3)
    quad_err = 0.0
    for _ in range(10):
        m, lv = rng.normal(0, 1.5), rng.uniform(-2.5, 2.0)
        quad_err = max(quad_err, abs(kl_divergence([m], [lv]).item() - kl_by_quadrature(m, lv)))
    kl_at_prior = kl_divergence(np.zeros(16), np.zeros(16)).item()

    n = 10_000
    eps = np.random.default_rng(42).standard_normal((n, 16))
    var = reparameterize(np.zeros((n, 16)), np.full((n, 16), math.log(4.0)), eps).data.var(axis=0)
    var_dev = float(np.max(np.abs(var / 4.0 - 1.0)))

    model, history, seconds = pretrained_vae
    first, last = history[0]["loss"], history[-1]["loss"]
    recon = reconstruction_accuracy(model, vae_corpus)

    passed = (quad_err < 1e-6 and kl_at_prior == 0.0 and var_dev <= 0.10 and len(history) == 30
              and last < first and recon >= 0.9 and seconds < 300)
    criterion(3, passed, f"KL vs quadrature {quad_err:.1e}; KL at prior {kl_at_prior}; MC variance off by "
                         f"{var_dev:.1%}; ELBO {first:.2f} -> {last:.2f}; recon {recon:.3f}; "
                         f"pretraining {seconds:.0f}s")
    assert passed


def test_criterion_4_zero_adapter_is_bit_exact(criterion):
    rng = np.random.default_rng(4)
    x = rng.random((100, 3, 27, 27))
    lat = rng.normal(0, 2, size=(100, 16))
    base = build_network(NetworkConfig(), rng_seed=4)
    want = forward(base, x).data
    exact = {}
    for fp in FUSION_POINTS[1:]:
        fused = build_network(NetworkConfig(fusion_point=fp), rng_seed=4)
        exact[fp] = np.array_equal(forward(fused, x, lat).data, want)
    passed = all(exact.values())
    criterion(4, passed, ", ".join(f"{fp} {'exact' if ok else 'DIFFERS'}" for fp, ok in exact.items())
              + " on 100 inputs")
    assert passed


# ---------------------------------------------------------------------------
# benchmark shared by criteria 5 and 6


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    cfg = ExperimentConfig()  # defaults are the desk-scale benchmark: 900 / 4500 / 900, seeds 1-3
    start = time.perf_counter()
    cmd_ablate(cfg, out, ["none", "after_stage2"])
    seconds = time.perf_counter() - start
    summaries = {fp: json.loads((out / fp / "summary.json").read_text()) for fp in ("none", "after_stage2")}
    reports = [json.loads((out / "after_stage2" / f"report_seed{s}.json").read_text()) for s in cfg.seeds]
    return summaries, reports, seconds


@pytest.mark.slow
def test_criterion_5_fusion_does_not_hurt(criterion, benchmark):
    summaries, reports, seconds = benchmark
    sizes = reports[0]["sizes"]
    assert (sizes["labeled"], sizes["unlabeled"], sizes["test"]) == (900, 4500, 900)
    f1 = {fp: s["student"]["macro_f1"]["mean"] for fp, s in summaries.items()}
    gaps = {fp: s["student"]["accuracy"]["mean"] - s["teacher"]["accuracy"]["mean"] for fp, s in summaries.items()}
    passed = (f1["after_stage2"] >= f1["none"] - 0.005 and all(g >= -0.01 for g in gaps.values())
              and seconds < 1800)
    criterion(5, passed, f"student macro-F1 fused {f1['after_stage2']:.4f} vs none {f1['none']:.4f}; "
                         f"student-teacher accuracy fused {gaps['after_stage2']:+.4f}, none {gaps['none']:+.4f}; "
                         f"{seconds / 60:.1f} min")
    assert passed


@pytest.mark.slow
def test_criterion_6_confident_pseudo_labels(criterion, benchmark):
    _, reports, _ = benchmark
    rows = [(r["pseudo_labels"]["accuracy_selected"], r["teacher"]["accuracy"]) for r in reports]
    wins = sum(1 for pl, teacher in rows if pl is not None and pl >= teacher)
    passed = wins >= 2
    criterion(6, passed, "; ".join(f"seed {r['seed']}: pseudo-label {pl:.4f} vs teacher {t:.4f}"
                                   for r, (pl, t) in zip(reports, rows)) + f" ({wins}/3)")
    assert passed


# ---------------------------------------------------------------------------


def test_criterion_7_balancing(criterion):
    raw = wd.generate_dataset(10_000, wd.WM811K_SKEW, size=27, noise_rate=0.03, seed=7)
    balanced = wd.balance(raw, 200, rng_seed=7)
    hist = wd.class_histogram(balanced)
    uniform = len(balanced) == 1800 and all(hist.get(c, 0) == 200 for c in range(wd.NUM_CLASSES))

    test = wd.generate_dataset(900, size=27, noise_rate=0.03, seed=70)
    outcomes = []
    for seed in (1, 2, 3):
        subset = [raw[i] for i in np.random.default_rng(seed).choice(len(raw), len(balanced), replace=False)]
        recalls = []
        for train_set in (balanced, subset):
            net, _ = train_supervised(build_network(NetworkConfig(), seed), None, train_set,
                                      TrainConfig(epochs=10, seed=seed))
            recalls.append(evaluate(net, None, test).macro_recall)
        outcomes.append(recalls)
    wins = sum(1 for b, s in outcomes if b > s)
    passed = uniform and wins >= 2
    criterion(7, passed, f"balanced counts {'uniform' if uniform else 'NOT uniform'}; macro-recall balanced vs raw "
                         + ", ".join(f"{b:.3f}/{s:.3f}" for b, s in outcomes) + f" ({wins}/3)")
    assert passed


SMALL = {
    "data": {"total": 270, "image_size": 15, "split": [0.3, 0.5, 0.2], "balance_target": 8},
    "vae": {"epochs": 1, "channels": [4, 8], "latent_dim": 4},
    "network": {"stem_kernel": 3, "stem_stride": 1, "stem_channels": 4, "widths": [4, 8, 8, 8],
                "block_counts": [1, 1, 1, 1]},
    "train": {"epochs": 2},
    "semisup": {"top_k": 5, "confidence_threshold": 0.2, "fine_tune_epochs": 1},
    "seeds": [5],
}


def test_criterion_8_end_to_end_determinism(criterion, tmp_path):
    cfg = config_from_dict(SMALL)
    blobs = []
    for run in ("a", "b"):
        cmd_run(cfg, tmp_path / run)
        blobs.append(((tmp_path / run / "summary.json").read_bytes(),
                      (tmp_path / run / "report_seed5.json").read_bytes()))
    passed = blobs[0] == blobs[1]
    criterion(8, passed, f"two runs of seed 5: summary {len(blobs[0][0])} bytes, "
                         f"{'byte-identical' if passed else 'DIFFERENT'}")
    assert passed
