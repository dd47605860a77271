"""Acceptance suite: one PASS/FAIL line per acceptance criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` (the verdict lines are
printed even without ``-s``).  The NGSIM checks need the three I-80
trajectory files in the directory named by ``ONRAMP_NGSIM_DIR`` and are
skipped otherwise.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from onramp.carfollow import (ACCELERATION, FAMILIES, PARAM_TYPES, CfParams, FitConfig, GhrParams,
                              fit_cf)
from onramp.evaluate import ClassificationScore
from onramp.features import build_training_sets
from onramp.forest import ForestConfig, train_forest, train_tree
from onramp.ingest import Schema, ingest_file
from onramp.kinematics import VehicleState, differentiate_kinematics, savitzky_golay_smooth
from onramp.lstm import LstmNetwork, TrainConfig, make_windows, pretrain_neighbor, train
from onramp.pipeline import load_config, read_rows, run_pipeline
from onramp.rollout import RolloutConfig, forecast
from onramp.scenes import NeighborRole, SceneGeometry, TrackIndex
from onramp.synth import generate_synthetic_corpus, random_scenario

from .test_carfollow import REF, sample_params
from .test_forest import brute_force_split, traverse
from .test_lstm import gradient_errors

NGSIM_FILES = {1: "trajectories-0400-0415.txt", 2: "trajectories-0500-0515.txt",
               3: "trajectories-0515-0530.txt"}


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return report


def test_cf_formula_oracles(verdict):
    rng = np.random.default_rng(2024)
    worst = biggest = 0.0
    start = time.perf_counter()
    for k in range(1000):
        family = FAMILIES[k % 3]
        p = sample_params(family, rng)
        v, vm, gap = rng.uniform(0.5, 30), rng.uniform(0, 30), rng.uniform(1, 100)
        got = ACCELERATION[family](v, vm, gap, p)
        ref = REF[family](v, vm, gap, *p.__dict__.values())
        # absolute below 1 m/s^2; extreme exponents reach 1e9 where one ulp exceeds 1e-9
        worst = max(worst, abs(got - ref) / max(1.0, abs(ref)))
        biggest = max(biggest, abs(ref))
    elapsed = time.perf_counter() - start
    verdict("CF formula oracles", worst < 1e-9 and elapsed < 1.0,
            f"max |diff|/max(1,|a|) {worst:.2e} (< 1e-9, |a| up to {biggest:.1e}), {elapsed:.2f} s (< 1 s)")


def test_rollout_hand_trace(verdict):
    start = time.perf_counter()
    lead = np.array([[240.0, 0.0, 0.0], [240.0, 0.0, 0.0], [200.0, 14.0, 0.4]])
    adj = {NeighborRole.L1: np.array([[120.0, 30.0, 0.0], [105.0, 0.0, 0.0], [110.0, 8.0, -0.2]]),
           NeighborRole.L2: np.array([[150.0, 20.0, 0.0], [130.0, 20.0, 0.0], [150.0, 20.0, 0.0]]),
           NeighborRole.F1: np.array([[95.0, 10.0, 0.0], [90.0, 10.0, 0.0], [80.0, 10.0, 0.0]]),
           NeighborRole.F2: np.tile([-500.0, 0.0, 0.0], (3, 1))}
    fit = CfParams("ghr", GhrParams(10.0, 0.0, 1.0), 0.0, True, 0)
    res = forecast(VehicleState(x=100.0, v=10.0), lead, adj, 230.0, RolloutConfig(fit, t_max=0.6))
    # upper clamp, lower clamp, then the blended leader (155, 11)
    a3 = 10.0 * (11.0 - 10.0) / (155.0 - 104.2)
    x = [102.2, 104.2, 104.2 + (10.0 + a3 * 0.2) * 0.2]
    v = [11.0, 10.0, 10.0 + a3 * 0.2]
    a = [5.0, -5.0, a3]
    err = max(np.max(np.abs(res.x - x)), np.max(np.abs(res.v - v)), np.max(np.abs(res.a - a)))
    flags = [f.code() for f in res.flags]
    elapsed = time.perf_counter() - start
    verdict("Rollout hand trace", err < 1e-9 and flags[:2] == ["accel_upper", "accel_lower"]
            and elapsed < 1.0, f"max |diff| {err:.2e} (< 1e-9), clamps {flags[:2]}, {elapsed:.3f} s (< 1 s)")


def calibration_window(family, rng):
    v = rng.uniform(5, 20) + np.cumsum(rng.normal(0, 0.1, 20))
    vm = v + rng.uniform(-3, 3) + rng.normal(0, 0.3, 20)
    gap = rng.uniform(10, 40) + np.cumsum(rng.normal(0, 0.3, 20))
    if family == "idm":
        x = [rng.uniform(5, 15), rng.uniform(0.8, 2.5), rng.uniform(0.8, 3), rng.uniform(1, 3),
             rng.uniform(15, 33), rng.uniform(2, 6)]
    else:
        x = [rng.uniform(0.5, 3), rng.uniform(-1, 1) if family == "gipps" else rng.uniform(0, 1),
             rng.uniform(0.2, 1.5)]
    p = PARAM_TYPES[family](*x)
    return v, vm, gap, ACCELERATION[family](v, vm, gap, p)


def test_calibration_recovery(verdict):
    rng = np.random.default_rng(1)
    cfg = FitConfig()
    worst, pooled, truth_pooled = {}, {}, {}
    start = time.perf_counter()
    for family in FAMILIES:
        mses, sq, sq_truth = [], [], []
        for _ in range(50):
            v, vm, gap, a = calibration_window(family, rng)
            mses.append(fit_cf(family, v, vm, gap, a, cfg).mse)
            noisy = a + rng.normal(0, 0.05, 20)
            fit = fit_cf(family, v[:15], vm[:15], gap[:15], noisy[:15], cfg)
            pred = ACCELERATION[family](v[15:], vm[15:], gap[15:], fit.params)
            sq.extend((pred - noisy[15:]) ** 2)
            sq_truth.extend((pred - a[15:]) ** 2)
        worst[family] = max(mses)
        pooled[family] = float(np.sqrt(np.mean(sq)))
        truth_pooled[family] = float(np.sqrt(np.mean(sq_truth)))
    elapsed = time.perf_counter() - start
    ok = all(m < 1e-6 for m in worst.values()) and all(r < 0.15 for r in pooled.values()) and elapsed < 60
    detail = ", ".join(f"{f} mse {worst[f]:.1e} held-out {pooled[f]:.3f} (vs truth {truth_pooled[f]:.3f})"
                       for f in FAMILIES)
    verdict("Calibration recovery", ok, f"{detail}; {elapsed:.1f} s (< 60 s)")


def test_savitzky_golay_exactness(verdict):
    t = np.linspace(0.0, 10.0, 101)
    cubic = 3.0 - 2.0 * t + 0.7 * t ** 2 - 0.05 * t ** 3
    smooth_err = float(np.max(np.abs(savitzky_golay_smooth(cubic, 11, 3) - cubic)))
    dt = 0.2
    tq = dt * np.arange(60)
    v, a = differentiate_kinematics(4.0 + 9.0 * tq + 0.8 * tq ** 2, dt)
    deriv_err = max(float(np.max(np.abs(v[1:-1] - (9.0 + 1.6 * tq[1:-1])))), float(np.max(np.abs(a[1:-1] - 1.6))))
    verdict("Savitzky-Golay exactness", smooth_err < 1e-8 and deriv_err < 1e-9,
            f"cubic residual {smooth_err:.1e} (< 1e-8), quadratic derivative error {deriv_err:.1e} (< 1e-9)")


def test_lstm_gradient_check(verdict):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = {}
    for hidden in (1, 4):
        net = LstmNetwork.initialize(hidden, 4, seed=hidden)
        x = rng.normal(size=(3, 8))
        y = rng.normal(size=3) * 2.0
        worst[hidden] = max(gradient_errors(net, x, y))
    elapsed = time.perf_counter() - start
    verdict("LSTM gradient check", max(worst.values()) < 1e-4 and elapsed < 60,
            f"1-unit {worst[1]:.1e}, 4-unit {worst[4]:.1e} (< 1e-4), {elapsed:.1f} s (< 60 s)")


@pytest.mark.slow
def test_lstm_learnability(verdict):
    rng = np.random.default_rng(0)
    t = 0.2 * np.arange(96)
    tracks = [rng.uniform(0, 100) + rng.uniform(5, 20) * t + 0.5 * rng.uniform(-0.3, 0.3) * t ** 2
              for _ in range(24)]
    start = time.perf_counter()
    net = LstmNetwork.initialize(100, 4, seed=1)
    net, _ = train(net, make_windows(tracks, net),
                   TrainConfig(epochs=10, batch_size=32, learning_rate=1e-3, final_learning_rate=1e-5))
    rng = np.random.default_rng(99)
    e5, e15 = [], []
    tt = 0.2 * np.arange(95)
    for _ in range(20):
        x = 50.0 + rng.uniform(5, 20) * tt + 0.5 * rng.uniform(-0.3, 0.3) * tt ** 2
        pred = pretrain_neighbor(net, x[:20], 75)
        e5.append(abs(pred[24] - x[44]))
        e15.append(abs(pred[74] - x[94]))
    elapsed = time.perf_counter() - start
    m5, m15 = float(np.mean(e5)), float(np.mean(e15))
    verdict("LSTM learnability", m5 < 1.0 and m15 < 5.0 and elapsed < 600,
            f"5 s error {m5:.3f} m (< 1), 15 s error {m15:.3f} m (< 5), {elapsed:.0f} s (< 600 s)")


def merging_window(seed, tmp_path, geometry):
    corpus = generate_synthetic_corpus(random_scenario(seed, 30, 39, geometry))
    path = tmp_path / f"window{seed}.csv"
    corpus.write(path)
    return ingest_file(path, Schema.canonical())[0]


def test_rf_oracles(verdict, tmp_path):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    split_ok = 0
    for _ in range(20):
        X = np.round(rng.normal(size=(30, 2)), 1)
        y = (X[:, 0] - X[:, 1] + rng.normal(0, 0.7, 30) > 0).astype(int)
        y[:2] = [0, 1]
        tree = train_tree(X, y, max_depth=1, feature_subset_size=None, min_samples_leaf=1)
        _, f, thr = brute_force_split(X, y)
        split_ok += tree.feature[0] == f and abs(tree.threshold[0] - thr) < 1e-12

    g = SceneGeometry()
    train_tracks = [merging_window(1, tmp_path, g), merging_window(3, tmp_path, g)]
    test_tracks = merging_window(2, tmp_path, g)
    acc, traversal_ok = {}, True
    for t in range(6):
        sets = [build_training_sets(tr, TrackIndex(tr), g, "cumulative", t, seed=t) for tr in train_tracks]
        forest = train_forest(np.vstack([s.X for s in sets]), np.concatenate([s.y for s in sets]),
                              "cumulative", t, ForestConfig(seed=t))
        test = build_training_sets(test_tracks, TrackIndex(test_tracks), g, "cumulative", t, seed=100 + t)
        prob = forest.predict_proba(test.X)
        manual = [np.mean([traverse(tr, x) for tr in forest.trees]) for x in test.X[:10]]
        traversal_ok &= bool(np.allclose(prob[:10], manual, rtol=0, atol=1e-15))
        acc[t] = ClassificationScore.from_labels(test.y, prob >= 0.5).accuracy
    elapsed = time.perf_counter() - start
    ok = split_ok == 20 and traversal_ok and min(acc.values()) >= 0.95 and elapsed < 300
    accs = " ".join(f"{a:.3f}" for a in acc.values())
    verdict("RF oracles", ok, f"brute-force splits {split_ok}/20, traversal {'ok' if traversal_ok else 'MISMATCH'}, "
            f"cumulative accuracy t=0..5 [{accs}] (>= 0.95), {elapsed:.0f} s (< 300 s)")


E2E = {
    "seed": 3,
    "data": {"synthetic": {"n_ramp": 10, "n_target": 14, "noise": 0.0}},
    "lstm": {"hidden": 12, "layers": 2, "epochs": 2, "max_windows": 400},
    "forest": {"n_trees": 8, "max_depth": 8},
}


def bundle_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_end_to_end_determinism(verdict, tmp_path):
    cfg = load_config(overrides=E2E)
    run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b")
    a, b = bundle_bytes(tmp_path / "a"), bundle_bytes(tmp_path / "b")
    differ = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    n_forests = sum(k.startswith("forests/") for k in a)
    verdict("End-to-end determinism", not differ and n_forests == 32,
            f"{len(a)} files, {n_forests} forests, differing: {differ or 'none'}")


# -- data-gated -------------------------------------------------------------------

def ngsim_dir():
    d = os.environ.get("ONRAMP_NGSIM_DIR")
    if not d or not all((Path(d) / f).exists() for f in NGSIM_FILES.values()):
        return None
    return Path(d)


@pytest.fixture(scope="module")
def ngsim_bundle(tmp_path_factory):
    d = ngsim_dir()
    if d is None:
        pytest.skip("NGSIM I-80 files not found (set ONRAMP_NGSIM_DIR)")
    out = tmp_path_factory.mktemp("ngsim") / "bundle"
    cfg = load_config(overrides={"data": {"source": "files", "schema": "ngsim",
                                          "files": {w: str(d / f) for w, f in NGSIM_FILES.items()}}})
    run_pipeline(cfg, out)
    return out


@pytest.mark.slow
def test_ngsim_forecast_band(verdict, ngsim_bundle):
    vals = {}
    for fam in ("gipps", "ghr"):
        rows = read_rows(ngsim_bundle / "metrics" / f"forecast_{fam}.csv")
        vals[fam] = float(next(r for r in rows if r["horizon_s"] == "5")["within_10m"])
    verdict("NGSIM within-10m at 5 s", min(vals.values()) >= 0.85,
            ", ".join(f"{f} {v:.3f}" for f, v in vals.items()) + " (>= 0.85)")


@pytest.mark.slow
def test_ngsim_idm_fit_mse(verdict, ngsim_bundle):
    mse = [float(r["mse"]) for r in read_rows(ngsim_bundle / "fits.csv") if r["family"] == "idm"]
    mean = float(np.mean(mse))
    verdict("NGSIM IDM fit mse", 0.02 <= mean <= 0.3,
            f"mean {mean:.3f}, median {float(np.median(mse)):.3f} (mean in [0.02, 0.3])")


@pytest.mark.slow
def test_ngsim_cumulative_accuracy(verdict, ngsim_bundle):
    rows = [r for r in read_rows(ngsim_bundle / "metrics" / "classification.csv") if r["kind"] == "cumulative"]
    mean = float(np.mean([float(r["accuracy"]) for r in rows]))
    verdict("NGSIM cumulative LC accuracy", mean >= 0.85, f"mean over t {mean:.3f} (>= 0.85)")
