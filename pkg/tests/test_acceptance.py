"""Acceptance criteria 1-10, each printing one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also echoed to the terminal when output is captured.
"""

import csv
import math
import time

import numpy as np
import pytest
from scipy.stats import binom

from kernelconv.audiofeat import AudioClip, FilterbankSpec, compute_spectrogram
from kernelconv.cli import main
from kernelconv.decoder import (KernelSpec, LambdaGrid, fit_dual, fit_ml, fit_primal_ridge,
                                select_lambda_loo)
from kernelconv.errors import IllConditionedError
from kernelconv.evaluation import (enumerate_pairs, feature_score, lag_sweep, leave_two_out_cv,
                                   pair_correlation_test)
from kernelconv.lagging import build_lagged_design
from kernelconv.synth import SynthConfig, generate
from kernelconv.tensorio import load_dataset

from oracles import brute_force_loo, loop_gram

TEN_LAGS = [20, 100, 180, 260, 340, 420, 500, 580, 740, 980]


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return emit


def _rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def test_criterion_1_duality(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(50):
        n, d = int(rng.integers(10, 61)), int(rng.integers(5, 201))
        R, S = rng.standard_normal((n, d)), rng.standard_normal((n, 3))
        X = rng.standard_normal((7, d))
        for scale in (1e-3, 1.0, 1e3):
            lam = scale * n
            primal = fit_primal_ridge(R, S, lam)
            dual = fit_dual(R, S, lam)
            worst = max(worst, _rel(dual.coefficients(), primal.coefficients()),
                        _rel(dual.predict_rows(X), primal.predict_rows(X)))
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-8 and elapsed < 10,
            f"max relative gap {worst:.2e} < 1e-8, {elapsed:.1f}s < 10s")


def test_criterion_2_fast_loo(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    grid = LambdaGrid((1e-2, 1.0, 1e2))
    for i in range(20):
        n, d = int(rng.integers(5, 31)), int(rng.integers(2, 40))
        R, S = rng.standard_normal((n, d)), rng.standard_normal((n, 2))
        if i % 2:
            kernel = KernelSpec("gaussian", 1.0 / d)
            fn = lambda A, B, g=kernel.gamma: loop_gram(A, B, "gaussian", g)  # noqa: E731
        else:
            kernel, fn = KernelSpec(), loop_gram
        _, errors = select_lambda_loo(R, S, grid, kernel)
        for g, lam in enumerate(grid.values):
            brute = brute_force_loo(R, S, lam, fn)
            worst = max(worst, float(np.max(np.abs(errors[g] - brute) / np.abs(brute))))
    elapsed = time.perf_counter() - start
    verdict(2, worst < 1e-8 and elapsed < 30,
            f"max relative gap {worst:.2e} < 1e-8, {elapsed:.1f}s < 30s")


def test_criterion_3_ml_recovery(verdict):
    start = time.perf_counter()
    cfg = SynthConfig(snr=math.inf)
    ds, truth = generate(cfg)
    design, targets = build_lagged_design(ds, cfg.lag_spec, ds.stimulus_ids)
    gap = _rel(fit_ml(design.rows, targets.values).coefficients(), truth.true_G)
    cfg = SynthConfig(snr=math.inf, channel_correlation=1.0)
    ds, _ = generate(cfg)
    design, targets = build_lagged_design(ds, cfg.lag_spec, ds.stimulus_ids)
    try:
        fit_ml(design.rows, targets.values)
        raised = False
    except IllConditionedError:
        raised = True
    elapsed = time.perf_counter() - start
    verdict(3, gap < 1e-8 and raised and elapsed < 5,
            f"relative error {gap:.2e} < 1e-8, correlated channels raise: {raised}, "
            f"{elapsed:.1f}s < 5s")


def test_criterion_4_synthetic_decoding(verdict):
    start = time.perf_counter()
    ds, truth = generate(SynthConfig(snr=10.0))
    high = leave_two_out_cv(ds, truth.config.lag_spec)
    correct = trials = 0
    for seed in range(10):
        ds, truth = generate(SynthConfig(snr=1e-6, seed=seed))
        rep = leave_two_out_cv(ds, truth.config.lag_spec)
        correct += sum(r.correct for r in rep.pair_results)
        trials += rep.n_pairs
    lo, hi = binom.interval(0.95, trials, 0.5)
    elapsed = time.perf_counter() - start
    ok_high = high.n_pairs == 66 and high.accuracy >= 0.95
    ok_noise = lo <= correct <= hi
    verdict(4, ok_high and ok_noise and elapsed < 120,
            f"SNR 10 accuracy {high.accuracy:.3f} >= 0.95 over {high.n_pairs} pairs; "
            f"SNR 1e-6 {correct}/{trials} correct, 95% interval [{lo:.0f}, {hi:.0f}]; "
            f"{elapsed:.1f}s < 120s")


def test_criterion_5_lag_sweep_shape(verdict):
    start = time.perf_counter()
    gains = []
    for seed in range(5):
        cfg = SynthConfig(lag_bins_true=41, lag_support_bins=(20, 40), tail_frames=100, seed=seed)
        ds, _ = generate(cfg)
        (_, short), (_, long) = lag_sweep(ds, [20.0, 420.0])
        gains.append(long.accuracy - short.accuracy)
    gain = 100 * float(np.mean(gains))
    elapsed = time.perf_counter() - start
    verdict(5, gain >= 10 and elapsed < 180,
            f"lag 420 ms beats 20 ms by {gain:.1f} points >= 10, {elapsed:.1f}s < 180s")


def test_criterion_6_protocol_counts(verdict, tmp_path):
    start = time.perf_counter()
    data, out = tmp_path / "synth", tmp_path / "sweep"
    assert main(["synth", "--out", str(data), "--n-stimuli", "44", "--channels", "4",
                 "--freq-channels", "4", "--frames", "30", "--tail-frames", "98"]) == 0
    folds = len(enumerate_pairs(load_dataset(data).stimulus_ids))
    assert main(["sweep", "--dataset", str(data), "--out", str(out), "--pair-sample", "2",
                 "--lags-ms", ",".join(map(str, TEN_LAGS))]) == 0
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    lags = [float(r["lag_ms"]) for r in rows]
    elapsed = time.perf_counter() - start
    verdict(6, folds == 946 and lags == TEN_LAGS,
            f"{folds} folds for 44 stimuli, {len(rows)}-row sweep table, {elapsed:.1f}s")


def test_criterion_7_pair_test(verdict):
    rng = np.random.default_rng(707)
    s1, s2 = rng.standard_normal((2, 4, 12))
    perfect = pair_correlation_test(s1, s2, s1, s2).correct
    swapped = not pair_correlation_test(s1, s2, s2, s1).correct
    flips = 0
    for _ in range(1000):
        a1, a2, q1, q2 = rng.standard_normal((4, 3, int(rng.integers(2, 20))))
        q1, q2 = q1 + 0.5 * a1, q2 + 0.5 * a2
        base = pair_correlation_test(a1, a2, q1, q2).correct
        a, b = 10 ** rng.uniform(-3, 3), rng.uniform(-100, 100)
        c, e = 10 ** rng.uniform(-3, 3), rng.uniform(-100, 100)
        flips += pair_correlation_test(a1, a2, a * q1 + b, c * q2 + e).correct != base
    verdict(7, perfect and swapped and flips == 0,
            f"perfect correct: {perfect}, swapped incorrect: {swapped}, "
            f"{flips}/1000 affine flips")


def test_criterion_8_feature_score(verdict):
    rng = np.random.default_rng(808)
    orig = list(rng.standard_normal((6, 3, 8)))
    pred = list(rng.standard_normal((6, 3, 8)))
    perfect = feature_score(orig, orig)[0]
    baseline = feature_score(orig, [np.mean(orig, axis=0)] * 6)[0]
    toy = feature_score([np.array([[1.0]]), np.array([[3.0]])],
                        [np.array([[2.0]]), np.array([[2.0]])])[0][0]
    perm = rng.permutation(6)
    a = feature_score(orig, pred)
    b = feature_score([orig[i] for i in perm], [pred[i] for i in perm])
    invariant = np.allclose(a[0], b[0], rtol=1e-12) and np.allclose(a[1], b[1], rtol=1e-12)
    ok = np.all(perfect == 1.0) and np.allclose(baseline, 0.0, atol=1e-12) and toy == 0.0
    verdict(8, bool(ok and invariant),
            f"perfect {perfect.min():.3f}, baseline max |score| {np.abs(baseline).max():.1e}, "
            f"toy {toy}, reorder invariant: {invariant}")


def test_criterion_9_filterbank(verdict):
    spec = FilterbankSpec(compression="linear")
    cf = spec.center_frequencies()
    k = np.arange(128)
    spacing = len(cf) == 128 and cf[0] == 180.0 and cf[-1] == 7246.0 and \
        np.allclose(cf, 180 * (7246 / 180) ** (k / 127), rtol=1e-12)
    rate = 16000
    t = np.arange(rate) / rate
    missed = []
    for i, f in enumerate(cf):
        sg = compute_spectrogram(AudioClip("tone", np.sin(2 * np.pi * f * t), rate), spec)
        if int(np.argmax(sg.data.mean(axis=1))) != i:
            missed.append(i)
    frames = sg.n_frames
    verdict(9, spacing and not missed and frames == 100,
            f"log spacing 180-7246 Hz: {spacing}, tone dominance in {128 - len(missed)}/128 "
            f"channels (missed {missed}), {frames} frames per second")


def _pipeline(root, threads):
    data, out = root / "data", root / "out"
    assert main(["synth", "--out", str(data), "--seed", "5", "--n-stimuli", "8",
                 "--frames", "50"]) == 0
    assert main(["sweep", "--dataset", str(data), "--out", str(out), "--lags-ms", "0,40,80",
                 "--threads", str(threads), "--gnuplot"]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())
            if p.name not in ("rerun.txt", "config.json")}


def test_criterion_10_determinism(verdict, tmp_path):
    runs = [_pipeline(tmp_path / f"run{i}", threads) for i, threads in enumerate((1, 1, 4, 4))]
    same = all(r == runs[0] for r in runs[1:])
    verdict(10, same and len(runs[0]) >= 7,
            f"{len(runs[0])} report files byte-identical across 2 runs x threads {{1, 4}}: {same}")
