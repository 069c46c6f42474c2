"""Acceptance criteria 1-12. Each test prints one PASS/FAIL line; the lines
are repeated in the terminal summary. Criteria 8-10 train real models and
take several minutes in total."""

import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from eegstt import model as M
from eegstt import tensor as tn
from eegstt.cli import main
from eegstt.curriculum import (
    CurriculumConfig,
    compute_difficulty,
    sample_subset,
    schedule_params,
    selection_probabilities,
    subset_size,
)
from eegstt.gradcheck import gradient_check
from eegstt.signal import BandSpec, PreprocessConfig, RawRecording, differential_entropy, extract_features, \
    welch_psd
from eegstt.synth import SyntheticSpec, generate_synthetic
from eegstt.training import Dataset, TrainConfig, confusion_matrix, cross_trial_split, metrics_from_confusion, \
    train_run

FS = 200.0
MIXED = (0.3, 0.6, 0.9)
SEEDS = range(5)
BENEFIT_LAYERS = 2


def synthetic_dataset(**kwargs):
    recs = generate_synthetic(SyntheticSpec(**kwargs))
    return Dataset.from_segments([s for r in recs for s in extract_features(r)], 3)


# ---------------------------------------------------------------- 1-3 signal

def test_01_de_white_noise(report):
    t0 = time.perf_counter()
    x = np.random.default_rng(0).normal(size=4096)
    f, p = welch_psd(x, FS, PreprocessConfig())
    de, _ = differential_entropy(f, p, [BandSpec("full", 0.0, FS / 2)], FS)
    elapsed = time.perf_counter() - t0
    target = 0.5 * math.log(2 * math.pi * math.e)
    err = abs(de[0] - target)
    ok = err <= 0.05 and elapsed < 1.0
    report(1, ok, f"DE {de[0]:.4f} vs {target:.4f} (|err| {err:.4f} <= 0.05), {elapsed * 1e3:.1f} ms < 1 s")
    assert ok


def test_02_de_shift_law(report):
    rng = np.random.default_rng(1)
    worst = 0.0
    signals = [rng.normal(size=(4, 1800)),
               *(r.data for r in generate_synthetic(SyntheticSpec(trials_per_class=1, trial_seconds=9.0, seed=2)))]
    for x in signals:
        base = np.stack([s.features for s in extract_features(RawRecording(x, FS))]).astype(np.float64)
        for s in (1e-3, 0.25, 3.0, 40.0, 1e3):
            scaled = np.stack([q.features for q in extract_features(RawRecording(s * x, FS))]).astype(np.float64)
            worst = max(worst, float(np.abs(scaled - base - math.log(s)).max()))
    ok = worst <= 0.05
    report(2, ok, f"max |dDE - ln s| = {worst:.2e} over {len(signals)} signals x 5 scales, every band (<= 0.05)")
    assert ok


def test_03_welch_parseval(report):
    ratios = []
    for seed in range(20):
        x = np.random.default_rng(seed).normal(scale=0.1 + seed, size=4096)
        f, p = welch_psd(x, FS, PreprocessConfig())
        ratios.append(p.sum() * (f[1] - f[0]) / x.var())
    worst = float(np.max(np.abs(np.array(ratios) - 1)))
    ok = worst <= 0.05
    report(3, ok, f"integrated PSD / variance within {worst * 100:.2f}% over 20 noise draws (<= 5%)")
    assert ok


# ---------------------------------------------------------------- 4-5 model

def test_04_gradient_fidelity(report):
    cfg = M.ModelConfig(channels=2, windows=4, bands=2, spatial_dim=8, temporal_dim=8, hidden_dim=8, classes=3,
                        encoder_layers=1, attention_window=3)
    rng = np.random.default_rng(1)
    params = M.init_params(cfg, 0)
    for k, v in params.items():
        if v.ndim == 1:  # move biases and gains off their init values so every path is exercised
            params[k] = v + rng.normal(0, 0.1, v.shape).astype(np.float32)
    x = rng.normal(size=(2, 4, 2, 2))
    labels = np.array([0, 2])

    def loss_fn(t):
        return tn.scale(tn.mean_all(tn.log(tn.pick(M.forward_batch(x, t, cfg), labels))), -1.0)

    t0 = time.perf_counter()
    results = gradient_check(loss_fn, params)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    n = sum(v.size for v in params.values())
    ok = worst.max_rel_error < 1e-4 and elapsed < 30 and len(results) == len(params)
    report(4, ok, f"{len(results)} tensors / {n} scalars, max rel err {worst.max_rel_error:.2e} "
                  f"({worst.name}) < 1e-4, {elapsed:.1f} s < 30 s")
    assert ok


def test_05_attention_invariants(report):
    cfg = M.ModelConfig(channels=3, windows=5, bands=5, spatial_dim=4, temporal_dim=4, hidden_dim=8,
                        spatial_heads=2, temporal_heads=2, encoder_layers=2, attention_window=3)
    params = M.as_tensors(M.init_params(cfg, 0))
    feats = np.random.default_rng(0).normal(size=(6, 5, 3, 5)).astype(np.float32)
    spatial_w, temporal_w = [], []
    h_s = M.spatial_encoder_forward(M.reorganize_spatial(feats), params, cfg, collect=spatial_w)
    mask = M.build_window_mask(cfg.windows, cfg.attention_window)
    h_t = M.temporal_encoder_forward(M.reorganize_temporal(h_s, cfg.windows), mask, params, cfg,
                                     collect=temporal_w)
    probs = M.classify(h_t, params).data
    masked_zero = all(np.all(w.data[..., mask == 0] == 0.0) for w in temporal_w)
    row_err = max(float(np.abs(w.data.sum(axis=-1) - 1).max()) for w in spatial_w + temporal_w)
    prob_err = float(np.abs(probs.sum(axis=-1) - 1).max())
    full = M.forward_batch(feats, params, cfg, mask=M.build_window_mask(cfg.windows, 2 * cfg.windows - 1)).data
    dense = M.forward_batch(feats, params, cfg, mask=np.ones((cfg.windows, cfg.windows))).data
    bit_equal = full.tobytes() == dense.tobytes()
    ok = masked_zero and bit_equal and row_err <= 1e-6 and prob_err <= 1e-6
    report(5, ok, f"masked weights exactly 0: {masked_zero}; w=2T-1 == dense bit-for-bit: {bit_equal}; "
                  f"softmax row err {row_err:.1e}, class prob err {prob_err:.1e} (<= 1e-6)")
    assert ok


# ---------------------------------------------------------------- 6-7 curriculum

def _quantile_oracle(values, q):
    s = sorted(values)
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def test_06_curriculum_arithmetic(report):
    checks = []
    # difficulty: loss + beta * error rate
    checks.append(abs(compute_difficulty(0.7, [True, False], 0.0) - 0.7) < 1e-12)
    checks.append(abs(compute_difficulty(0.5, [True, False], 1.0, 2) - 1.0) < 1e-12)
    checks.append(abs(compute_difficulty(0.3, [True] * 5, 2.0) - 0.3) < 1e-12)
    # selection kernel
    p = selection_probabilities([0.0, 1.0, 2.0], 0.0, 0.5)
    w = [math.exp(-(d ** 2) / (2 * 0.25)) for d in (0.0, 1.0, 2.0)]
    checks.append(np.allclose(p, [v / sum(w) for v in w], rtol=0, atol=1e-15))
    checks.append(np.allclose(selection_probabilities([0.4] * 6, 0.4, 1e-8), 1 / 6, rtol=0, atol=1e-15))
    # subset sizes
    checks.append([subset_size(1.0, 100), subset_size(0.5, 11), subset_size(0.001, 100)] == [100, 5, 1])
    # schedule vs a hand-written interpolation oracle
    rng = np.random.default_rng(0)
    cfg = CurriculumConfig(total_epochs=9)
    worst_simplex = 0.0
    for _ in range(200):
        d = rng.gamma(2.0, 0.5, size=int(rng.integers(1, 60)))
        k = int(rng.integers(1, 10))
        mu, sigma, alpha = schedule_params(k, cfg, d)
        frac = (k - 1) / 8
        spread = float(d.max() - d.min()) + 1e-8
        checks.append(abs(mu - _quantile_oracle(d.tolist(), 0.2 + 0.6 * frac)) < 1e-12)
        checks.append(abs(sigma - (0.5 - 0.35 * frac) * spread) < 1e-12)
        checks.append(abs(alpha - (1.0 if k == 9 else 0.3 + 0.7 * frac)) < 1e-12)
        pk = selection_probabilities(d, mu, sigma)
        worst_simplex = max(worst_simplex, abs(pk.sum() - 1), float(-min(pk.min(), 0)))
    ok = all(checks) and worst_simplex <= 1e-9
    report(6, ok, f"{sum(checks)}/{len(checks)} oracle checks match; max simplex error {worst_simplex:.1e} (<= 1e-9)")
    assert ok


def test_07_curriculum_monotonicity(report):
    rng = np.random.default_rng(7)
    m, epochs, draws = 100, 10, 1000
    d = rng.gamma(2.0, 0.6, size=m)
    cfg = CurriculumConfig(total_epochs=epochs)
    ks, means, sizes, epoch_means = [], [], [], []
    for k in range(1, epochs + 1):
        mu, sigma, alpha = schedule_params(k, cfg, d)
        p = selection_probabilities(d, mu, sigma)
        size = subset_size(alpha, m)
        sizes.append(size)
        draw_means = [d[sample_subset(p, size, rng)].mean() for _ in range(draws)]
        ks += [k] * draws
        means += draw_means
        epoch_means.append(float(np.mean(draw_means)))
    rho, pval = spearmanr(ks, means)
    sizes_ok = all(b >= a for a, b in zip(sizes, sizes[1:])) and sizes[-1] == m
    ok = rho > 0 and pval < 0.01 and sizes_ok
    report(7, ok, f"Spearman rho {rho:.3f}, p {pval:.1e} (< 0.01); epoch means "
                  f"{epoch_means[0]:.3f} -> {epoch_means[-1]:.3f}; sizes {sizes[0]}..{sizes[-1]} "
                  f"non-decreasing, final == M: {sizes_ok}")
    assert ok


# ---------------------------------------------------------------- 8-10 training

@pytest.mark.slow
def test_08_end_to_end_learning(report):
    t0 = time.perf_counter()
    ds = synthetic_dataset()  # K=3, C=8, intensity 0.9, 10 trials per class
    res = train_run(ds, M.ModelConfig(channels=8, windows=6), TrainConfig(total_epochs=50, seed=0))
    elapsed = time.perf_counter() - t0
    agg = res.aggregate()
    trials = len(set(ds.trial_ids.tolist()))
    ok = agg["accuracy_mean"] >= 0.9 and elapsed < 300
    report(8, ok, f"{trials} trials, 5-fold mean test accuracy {agg['accuracy_mean']:.4f}±{agg['accuracy_std']:.4f} "
                  f"(>= 0.90) after 50 epochs, {elapsed:.0f} s < 300 s")
    assert ok


@pytest.fixture(scope="module")
def mixed_runs():
    """Curriculum on/off over five seeds on the mixed-intensity set."""
    out = {}
    for seed in SEEDS:
        ds = synthetic_dataset(intensities=MIXED, seed=seed)
        for cur in (True, False):
            out[seed, cur] = (ds, train_run(ds, M.ModelConfig(channels=8, windows=6, encoder_layers=BENEFIT_LAYERS),
                                            TrainConfig(total_epochs=50, curriculum_enabled=cur, seed=seed)))
    return out


@pytest.mark.slow
def test_09_curriculum_benefit(report, mixed_runs):
    on = [mixed_runs[s, True][1].aggregate()["accuracy_mean"] for s in SEEDS]
    off = [mixed_runs[s, False][1].aggregate()["accuracy_mean"] for s in SEEDS]
    gap = np.mean(on) - np.mean(off)
    ok = gap >= 0
    report(9, ok, f"mean accuracy over 5 seeds: curriculum on {np.mean(on):.4f}, off {np.mean(off):.4f}, "
                  f"gap {gap * 100:+.2f} points (>= 0); per seed on {np.round(on, 3).tolist()} "
                  f"off {np.round(off, 3).tolist()}")
    assert ok


@pytest.mark.slow
def test_10_difficulty_tracks_intensity(report, mixed_runs):
    ds, res = mixed_runs[0, True]
    total = np.zeros(len(ds))
    count = np.zeros(len(ds))
    for fold in res.folds:
        idx = np.flatnonzero(np.isin(ds.trial_ids, fold.split.train_trial_ids))
        total[idx] += fold.difficulty
        count[idx] += 1
    mean_d = total / np.maximum(count, 1)
    rho, pval = spearmanr(mean_d, 1 - ds.intensity)
    ok = rho > 0 and pval < 0.01
    report(10, ok, f"Spearman(d_i, 1 - intensity) rho {rho:.3f}, p {pval:.1e} (< 0.01) over {len(ds)} samples, "
                   f"d_i averaged over the folds that trained on it")
    assert ok


# ---------------------------------------------------------------- 11-12 protocol

def _brute_metrics(labels, preds, k):
    acc = sum(a == b for a, b in zip(labels, preds)) / len(labels)
    f1 = []
    for c in range(k):
        tp = sum(a == c and b == c for a, b in zip(labels, preds))
        fp = sum(a != c and b == c for a, b in zip(labels, preds))
        fn = sum(a == c and b != c for a, b in zip(labels, preds))
        f1.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0)
    return acc, sum(f1) / k


def test_11_protocol_integrity(report):
    rng = np.random.default_rng(11)
    leaks = 0
    for _ in range(100):
        n_trials = int(rng.integers(5, 60))
        folds = int(rng.integers(2, min(10, n_trials) + 1))
        trial_ids = rng.choice(10_000, size=n_trials, replace=False)
        seg_trials = np.repeat(trial_ids, rng.integers(1, 6, size=n_trials))
        for split in cross_trial_split(seg_trials, folds, int(rng.integers(0, 2 ** 31))):
            test = np.isin(seg_trials, split.test_trial_ids)
            train = np.isin(seg_trials, split.train_trial_ids)
            if set(split.train_trial_ids) & set(split.test_trial_ids) or np.any(test == train):
                leaks += 1
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(1, 80))
        labels, preds = rng.integers(0, k, size=n), rng.integers(0, k, size=n)
        r = metrics_from_confusion(confusion_matrix(labels, preds, k))
        acc, f1 = _brute_metrics(labels.tolist(), preds.tolist(), k)
        if abs(r.accuracy - acc) > 1e-12 or abs(r.macro_f1 - f1) > 1e-12 or r.confusion.sum() != n:
            mismatches += 1
    ok = leaks == 0 and mismatches == 0
    report(11, ok, f"leaking folds {leaks} over 100 random split configs; metric mismatches {mismatches}/1000")
    assert ok


def test_12_determinism(report, tmp_path, capsys):
    small = ["--epochs", "3", "--layers", "1", "--spatial-dim", "4", "--temporal-dim", "4", "--hidden-dim", "8"]
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert main(["synth", "--out", str(d / "raw.eegr"), "--seed", "4", "--trials-per-class", "5",
                     "--intensities", "0.3,0.9"]) == 0
        assert main(["preprocess", str(d / "raw.eegr"), "--out", str(d / "feat.segb")]) == 0
        assert main(["train", "--data", str(d / "feat.segb"), "--out", str(d / "run"), "--seed", "4",
                     *small]) == 0
        digests.append(tuple((d / name).read_bytes() for name in
                             ("feat.segb", "run/metrics.json", "run/report.txt", "run/model.sttc")))
    capsys.readouterr()
    same = [x == y for x, y in zip(*digests)]
    ok = all(same)
    report(12, ok, f"two seeded runs: SEGB identical {same[0]}, metrics.json identical {same[1]}, "
                   f"report identical {same[2]}, checkpoint identical {same[3]}")
    assert ok
