"""End-to-end acceptance checks; each test records one PASS/FAIL line for the run summary."""
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

import conftest
from conftest import two_regime
from helpers import grid_disagreements
from varsig.core import TimeSeries, Window, beta_pdf, two_sided_bounds
from varsig.detect import DetectorConfig, cusum_stat, detect_squares, lr_stat, optimal_partition_squares, pelt_squares
from varsig.exact import TAU_IN_MODEL, exact_p_value, selection_set
from varsig.harness import load_scenario, run_detection_accuracy, run_qq
from varsig.mc import (
    GpSurrogate,
    SamplerConfig,
    SelectionOracle,
    dense_posterior_mean,
    fit_gp,
    mc_p_value,
    naive_p_hat,
    stratified_phis,
)
from varsig.perturb import (
    PhiPath,
    cusum_phi_coeffs,
    decompose_w,
    lr_phi_coeffs,
    lr_stat_phi,
    perturb_series,
    reconstruct_squares,
)


def record(number: int, title: str, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
    assert ok, detail


def first_fitting_path(series, config, h):
    res = detect_squares(series.squares(), config.with_intervals(series.T))
    for tau in res.order:
        if tau - h >= 0 and tau + h <= series.T:
            return PhiPath(series, Window(tau, h)), res
    return None, res


@pytest.fixture(scope="module")
def null_cusum_runs():
    scenario = replace(load_scenario("fig4a"), h=(10, 20), replicates=500)
    return run_qq(scenario)


def test_01_null_calibration_exact(null_cusum_runs):
    parts, ok = [], True
    for h in (10, 20):
        g = null_cusum_runs.group(h=h)
        stat, p = g.ks()
        ok &= p > 0.01
        parts.append(f"h={h} n={g.p_values.size} KS={stat:.3f} p={p:.3f}")
    record(1, "H0 calibration, exact CUSUM engine", ok, "; ".join(parts))


def test_02_naive_p_values_fail(null_cusum_runs):
    parts, ok = [], True
    for h in (10, 20):
        stat, p = null_cusum_runs.group(h=h).ks(naive=True)
        ok &= p < 0.001
        parts.append(f"h={h} naive KS={stat:.3f} p={p:.1e}")
    record(2, "naive p-values rejected", ok, "; ".join(parts))


def test_03_detection_accuracy():
    acc = run_detection_accuracy(load_scenario("table1"))
    target = {"cusum-binseg": (0.755, 0.972, 0.012), "lr-binseg": (0.915, 0.992, 0.914)}
    ok = all(abs(r - t) <= 0.10 for m in target for r, t in zip(acc.hit_rates[m], target[m]))
    detail = "; ".join(f"{m} " + "/".join(f"{r:.3f}" for r in acc.hit_rates[m]) for m in target)
    record(3, "accuracy hit rates within 0.10", ok, detail)


def test_04_selection_set_oracle():
    checked, bad_total, points = 0, 0, 0
    for k in (1, 2):
        config = DetectorConfig("binseg", n_changepoints=k)
        seed = 0
        n = 0
        while n < 50:
            r = np.random.default_rng([404, k, seed])
            seed += 1
            tau = int(r.integers(25, 76))
            sd = np.where(np.arange(100) < tau, 1.0, r.uniform(0.5, 2.5))
            series = TimeSeries(r.standard_normal(100) * sd, 0.0)
            path, res = first_fitting_path(series, config, 10)
            if path is None:
                continue
            n += 1
            S = selection_set(path, config, TAU_IN_MODEL).S
            bad = grid_disagreements(S, path, config, TAU_IN_MODEL, res.changepoints)
            bad_total += bad.size
            points += 1000
            checked += 1
    record(4, "exact S equals detector replay on a 1000-point grid", bad_total == 0,
           f"{checked} instances (K=1,2), {bad_total} disagreements")


@pytest.fixture(scope="module")
def null_lr_runs():
    return run_qq(replace(load_scenario("fig8"), N=(50, 100), replicates=300))


def test_05_null_calibration_gp(null_lr_runs):
    g100 = null_lr_runs.group(N=100)
    g50 = null_lr_runs.group(N=50)
    _, p100 = g100.ks()
    rate50 = float(np.mean(g50.p_values <= 0.05))
    ok = p100 > 0.01 and rate50 <= 0.07
    record(5, "H0 calibration, GP-direct LR engine", ok,
           f"N=100 n={g100.p_values.size} KS p={p100:.3f}; N=50 Pr(p<=0.05)={rate50:.3f}")


def test_06_gp_direct_vs_exact():
    diffs = []
    seed = 0
    config = DetectorConfig("binseg", n_changepoints=1)
    while len(diffs) < 30:
        r = np.random.default_rng([606, seed])
        seed += 1
        sd = np.where(np.arange(200) < 100, 1.0, r.uniform(1.0, 2.0))
        series = TimeSeries(r.standard_normal(200) * sd, 0.0)
        path, _ = first_fitting_path(series, config, 20)
        if path is None:
            continue
        exact = exact_p_value(path, config).p_value
        gp = mc_p_value(path, config, sampler=SamplerConfig(N=200, seed=seed)).p_value
        diffs.append(abs(gp - exact))
    share = float(np.mean(np.array(diffs) <= 0.05))
    record(6, "GP-direct within 0.05 of exact", share >= 0.9,
           f"{share:.2f} of 30 instances, max |diff|={max(diffs):.3f}")


def test_07_stratification_variance():
    series = TimeSeries(two_regime(T=200, tau=100, sd=(1.0, 1.3), seed=27), 0.0)
    config = DetectorConfig("binseg", n_changepoints=1)
    path, _ = first_fitting_path(series, config, 20)
    oracle = SelectionOracle(path, config)
    lo, hi = two_sided_bounds(path.phi_obs, 20)
    parts, ok = [], True
    for k in (1, 5, 50):
        a = 10.0 / k
        est = {}
        for strat in (True, False):
            out = []
            for rep in range(200):
                phis = stratified_phis(200, "beta", [707, k, int(strat), rep], a=a, b=a, stratified=strat)
                w = beta_pdf(phis, 10.0, 10.0) / stats.beta.pdf(phis, a, a)
                out.append(naive_p_hat(phis, oracle.many(phis), lo, hi, weights=w))
            est[strat] = np.array(out)
        v_s, v_p = est[True].var(ddof=1), est[False].var(ddof=1)
        z = abs(est[True].mean() - est[False].mean()) / np.sqrt(v_s / 200 + v_p / 200)
        ok &= v_s <= 0.5 * v_p and z <= 2.0
        parts.append(f"k={k} var ratio={v_s / v_p:.3f} mean gap={z:.2f} SE")
    record(7, "stratified sampling halves estimator variance", ok, "; ".join(parts))


def test_08_length_scale():
    series = TimeSeries(two_regime(T=200, tau=100, sd=(1.0, 1.8), seed=1), 0.0)
    config = DetectorConfig("binseg", n_changepoints=1)
    path, _ = first_fitting_path(series, config, 20)
    phis = stratified_phis(100, "uniform01", 808)
    ind = SelectionOracle(path, config).many(phis)
    x = np.linspace(0.0, 1.0, 10_001)
    curves = [fit_gp(phis, ind, l)(x) for l in (1.0, 10.0, 100.0, 1000.0)]
    sup = max(float(np.max(np.abs(c1 - c2))) for c1 in curves for c2 in curves)
    record(8, "GP mean insensitive to l >= 1", sup <= 0.05, f"sup-norm spread {sup:.4f}")


def test_09_power_extension():
    null = run_qq(load_scenario("fig10"))
    alt = run_qq(load_scenario("fig10_alt"))
    parts, ok = [], True
    for n_w in (1, 5, 20):
        _, p = null.group(n_w=n_w).ks()
        ok &= p > 0.01
        parts.append(f"H0 N_W={n_w} KS p={p:.3f}")
    m1 = float(np.mean(alt.group(n_w=1).p_values))
    m5 = float(np.mean(alt.group(n_w=5).p_values))
    ok &= m5 < m1
    parts.append(f"H1 mean p N_W=1 {m1:.3f}, N_W=5 {m5:.3f}")
    record(9, "W-resampling valid and more powerful", ok, "; ".join(parts))


def test_10_property_suites():
    r = np.random.default_rng(1010)
    worst = {}
    # roundtrip of the window reparameterization
    err = 0.0
    for _ in range(1000):
        h = int(r.integers(2, 30))
        x = r.normal(0.5, r.uniform(0.2, 3.0), 2 * h + 4)
        series = TimeSeries(x, 0.5)
        w = Window(h + 2, h)
        sq = series.squares()[w.start:w.stop]
        # relative to the window sum of squares: a square near zero is rebuilt from 1 - W with W near 1
        err = max(err, float(np.max(np.abs(reconstruct_squares(decompose_w(series, w)) - sq)) / sq.sum()))
    worst["roundtrip rel"] = err
    # sum-of-squares conservation and coefficient agreement
    cons = coef = 0.0
    for i in range(20):
        x = r.standard_normal(60) * np.where(np.arange(60) < 30, 1.0, 2.0)
        path = PhiPath(TimeSeries(x, 0.0), Window(30, 8))
        c0 = path.base_squares[22:38].sum()
        for phi in r.uniform(0.01, 0.99, 5):
            y = perturb_series(path, phi).squares()
            cons = max(cons, abs(y[22:38].sum() / c0 - 1.0))
            s = int(r.integers(1, 50))
            e = int(r.integers(s + 2, 61))
            taus, a, b = cusum_phi_coeffs(path, s, e)
            direct = np.array([cusum_stat(y, s, e, t) for t in taus])
            coef = max(coef, float(np.max(np.abs(a + b * phi - direct) / (1.0 + np.abs(direct)))))
            lc = lr_phi_coeffs(path, s, e)
            xs = perturb_series(path, phi)
            for t in range(s + 1, e - 1):
                d = lr_stat(xs, s, e, t)
                coef = max(coef, abs(lr_stat_phi(lc, t, phi) - d) / (1.0 + abs(d)))
    worst["conservation rel"] = cons
    worst["coefficients"] = coef
    # PELT against the unpruned dynamic program
    mismatches = 0
    for n in range(4, 41):
        for penalty in (1.0, 5.0, 15.0):
            y = (r.standard_normal(n) * np.where(np.arange(n) < n // 2, 1.0, 3.0)) ** 2
            mismatches += pelt_squares(y, penalty) != optimal_partition_squares(y, penalty)
    # Markov GP mean against a dense solve
    gp_err = 0.0
    for _ in range(10):
        phis = np.sort(r.uniform(0, 1, 50))
        vals = r.integers(0, 2, 50).astype(float)
        x = r.uniform(0, 1, 200)
        gp_err = max(gp_err, float(np.max(np.abs(GpSurrogate(phis, vals, 1.0)(x)
                                                 - dense_posterior_mean(phis, vals, x, 1.0)))))
    worst["gp dense"] = gp_err
    ok = (worst["roundtrip rel"] <= 1e-10 and worst["conservation rel"] <= 1e-10 and worst["coefficients"] <= 1e-9
          and mismatches == 0 and worst["gp dense"] <= 1e-8)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", PELT mismatches {mismatches}"
    record(10, "property suites", ok, detail)
