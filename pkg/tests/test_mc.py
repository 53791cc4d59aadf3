import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from varsig.core import TimeSeries, Window, beta_pdf, two_sided_bounds, unconditional_p_value
from varsig.detect import DetectorConfig, detect_squares
from varsig.exact import FULL_MODEL, TAU_IN_MODEL, exact_p_value, selection_set
from varsig.mc import (
    AllRejectedError,
    GpSurrogate,
    IndicatorEvaluationError,
    SamplerConfig,
    SelectionOracle,
    conditioned_density,
    dense_posterior_mean,
    fit_gp,
    gp_direct_p,
    gp_is_p,
    indicator,
    inverse_cdf,
    mc_p_value,
    naive_p_hat,
    stratified_phis,
    stratified_uniforms,
)
from varsig.perturb import PhiPath

from conftest import two_regime


def cusum_instance(seed=0, T=200, tau=100, sd=(1.0, 1.8), h=20, k=1):
    series = TimeSeries(two_regime(T=T, tau=tau, sd=sd, seed=seed), 0.0)
    config = DetectorConfig("binseg", n_changepoints=k)
    res = detect_squares(series.squares(), config)
    for t in res.order:
        if t - h >= 0 and t + h <= T:
            return PhiPath(series, Window(t, h)), config
    return None, config


class AlwaysSelected:
    runs = 0

    def many(self, phis):
        return np.ones(len(phis), dtype=int)


# ---------------------------------------------------------------------------
# indicator


def test_indicator_at_observed_phi_is_one():
    for seed in range(5):
        path, config = cusum_instance(seed)
        for cond in (TAU_IN_MODEL, FULL_MODEL):
            assert indicator(path, config, cond, path.phi_obs) == 1
    lr = DetectorConfig("binseg", stat="lr", n_changepoints=2)
    path, _ = cusum_instance(3)
    res = detect_squares(path.base_squares, lr)
    lr_path = PhiPath(path.base, Window(res.order[0], 20))
    assert indicator(lr_path, lr, TAU_IN_MODEL, lr_path.phi_obs) == 1


def test_indicator_region_is_contiguous_for_strong_signal():
    path, config = cusum_instance(2, sd=(1.0, 3.0))
    grid = (np.arange(1000) + 0.5) / 1000
    ind = SelectionOracle(path, config).many(grid)
    changes = np.flatnonzero(np.diff(ind))
    assert ind[np.searchsorted(grid, path.phi_obs) - 1] == 1
    assert changes.size <= 2
    inside = grid[ind == 1]
    assert inside.min() <= path.phi_obs <= inside.max()


@pytest.mark.parametrize("algorithm", ["binseg", "wbs"])
def test_full_model_indicator_below_tau_indicator(algorithm):
    r = np.random.default_rng(4)
    sd = np.repeat([1.0, 2.0, 0.8], [60, 50, 70])
    series = TimeSeries(r.standard_normal(sd.size) * sd, 0.0)
    config = DetectorConfig(algorithm, stat="lr", threshold=8.0, n_intervals=40)
    res = detect_squares(series.squares(), config.with_intervals(series.T))
    path = PhiPath(series, Window(res.order[0], 20))
    grid = np.linspace(0.01, 0.99, 150)
    tau = SelectionOracle(path, config, TAU_IN_MODEL).many(grid)
    full = SelectionOracle(path, config, FULL_MODEL).many(grid)
    assert np.all(full <= tau)


def test_early_stop_does_not_change_indicator():
    r = np.random.default_rng(5)
    sd = np.repeat([1.0, 2.0, 0.8], [60, 50, 70])
    series = TimeSeries(r.standard_normal(sd.size) * sd, 0.0)
    for config in (DetectorConfig("binseg", stat="lr", n_changepoints=3),
                   DetectorConfig("wbs", stat="lr", threshold=6.0, n_intervals=50),
                   DetectorConfig("pelt", stat="lr", penalty=12.0)):
        res = detect_squares(series.squares(), config.with_intervals(series.T))
        path = PhiPath(series, Window(res.changepoints[0], 20))
        grid = np.linspace(0.02, 0.98, 60)
        for cond in (TAU_IN_MODEL, FULL_MODEL):
            fast = SelectionOracle(path, config, cond).many(grid)
            slow = SelectionOracle(path, config, cond, early_stop=False).many(grid)
            np.testing.assert_array_equal(fast, slow)


def test_indicator_rejects_phi_outside_unit_interval():
    path, config = cusum_instance(0)
    with pytest.raises(ValueError):
        indicator(path, config, TAU_IN_MODEL, 1.0)


def test_indicator_failure_is_wrapped():
    # the tail beyond the window is exactly zero, so a likelihood split there is degenerate
    r = np.random.default_rng(0)
    x = np.concatenate([r.standard_normal(40), np.zeros(10)])
    series = TimeSeries(x, 0.0)
    config = DetectorConfig("binseg", stat="lr", threshold=1.0)
    path = PhiPath(series, Window(20, 10))
    with pytest.raises(IndicatorEvaluationError, match="phi="):
        indicator(path, config, TAU_IN_MODEL, 0.3, observed=(20,))


# ---------------------------------------------------------------------------
# sampling


def test_inverse_cdf_midpoint():
    assert inverse_cdf([0.5])[0] == 0.5
    assert stratified_phis(1, "uniform01", 0).size == 1
    assert inverse_cdf([0.5], "beta", a=3.0, b=3.0)[0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        inverse_cdf([0.5], "beta")
    with pytest.raises(ValueError):
        inverse_cdf([0.5], "gamma")


@given(st.integers(1, 300), st.integers(0, 10_000))
def test_one_draw_per_stratum(N, seed):
    z = stratified_uniforms(N, np.random.default_rng(seed))
    np.testing.assert_array_equal(np.floor(z * N), np.arange(N))


def test_stratified_null_beta_matches_law():
    phis = stratified_phis(10_000, "null-beta", 3, a=10.0, b=10.0)
    assert stats.kstest(phis, stats.beta(10.0, 10.0).cdf).statistic < 0.01
    assert np.all(np.diff(phis) >= 0)


def test_plain_sampling_is_sorted_iid():
    phis = stratified_phis(500, "uniform01", 3, stratified=False)
    assert np.all(np.diff(phis) >= 0)
    assert stats.kstest(phis, "uniform").pvalue > 0.001


# ---------------------------------------------------------------------------
# naive estimator


def test_naive_examples():
    phis = np.array([0.05, 0.2, 0.5, 0.7, 0.95])
    # all selected: fraction of samples in the critical region
    assert naive_p_hat(phis, np.ones(5), 0.1, 0.9) == pytest.approx(0.4)
    # selected only inside the critical region
    assert naive_p_hat(phis, [1, 0, 0, 0, 1], 0.1, 0.9) == 1.0
    assert naive_p_hat(phis, [1, 1, 0, 0, 0], 0.1, 0.9, weights=[3, 1, 1, 1, 1]) == pytest.approx(0.75)
    with pytest.raises(AllRejectedError):
        naive_p_hat(phis, np.zeros(5), 0.1, 0.9)


def test_naive_close_to_exact():
    path, config = cusum_instance(1)
    exact = exact_p_value(path, config).p_value
    est = mc_p_value(path, config, sampler=SamplerConfig(N=2000, mode="naive-stratified", seed=1))
    assert est.p_value == pytest.approx(exact, abs=0.03)


# ---------------------------------------------------------------------------
# GP surrogate


def test_gp_all_ones():
    phis = stratified_phis(20, "uniform01", 0)
    gp = fit_gp(phis, np.ones(20), l=1.0)
    x = np.linspace(0.0, 1.0, 2001)
    v = gp(x)
    assert np.all(v > 0) and np.all(v <= 1.0 + 1e-12)
    np.testing.assert_allclose(gp(phis), 1.0)
    # between close design points the mean stays near 1 and decays outside the design
    assert np.min(gp(np.linspace(phis[0], phis[-1], 500))) > 0.99
    far = GpSurrogate([0.5], [1.0], l=0.1)
    assert far(0.9) < far(0.6) < 1.0


@given(st.integers(0, 10_000), st.sampled_from([0.3, 1.0, 10.0, 100.0]))
def test_gp_interpolates_and_stays_in_unit_interval(seed, l):
    r = np.random.default_rng(seed)
    phis = np.sort(r.uniform(0.001, 0.999, 30))
    vals = r.integers(0, 2, 30)
    gp = fit_gp(phis, vals, l)
    np.testing.assert_allclose(gp(phis), vals, atol=1e-12)
    x = r.uniform(0, 1, 500)
    v = gp(x)
    assert np.all(v >= -1e-12) and np.all(v <= 1.0 + 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gp_matches_dense_solve(seed):
    r = np.random.default_rng(seed)
    phis = np.sort(r.uniform(0, 1, 50))
    vals = r.integers(0, 2, 50).astype(float)
    x = r.uniform(-0.1, 1.1, 200)
    gp = GpSurrogate(phis, vals, 1.0)
    np.testing.assert_allclose(gp(x), dense_posterior_mean(phis, vals, x, 1.0), atol=1e-8)


def test_gp_matches_high_precision_dense_solve_at_default_scale():
    # the Gram matrix at l=100 is too ill-conditioned for float64, so solve with 60 digits
    r = np.random.default_rng(11)
    phis = np.sort(r.uniform(0, 1, 50))
    vals = r.integers(0, 2, 50)
    x = r.uniform(0, 1, 25)
    l = 100.0
    with mpmath.workdps(60):
        c = mpmath.mpf(1) / (2 * mpmath.mpf(l) ** 2)
        P = [mpmath.mpf(float(p)) for p in phis]
        K = mpmath.matrix([[mpmath.exp(-c * abs(a - b)) for b in P] for a in P])
        alpha = mpmath.lu_solve(K, mpmath.matrix([int(v) for v in vals]))
        ref = [float(sum(mpmath.exp(-c * abs(mpmath.mpf(float(xi)) - P[j])) * alpha[j] for j in range(50)))
               for xi in x]
    np.testing.assert_allclose(GpSurrogate(phis, vals, l)(x), ref, atol=1e-8)


def test_gp_rejects_bad_design():
    with pytest.raises(ValueError):
        GpSurrogate([0.2, 0.2], [1, 0])
    with pytest.raises(ValueError):
        GpSurrogate([0.2, 0.3], [1])
    with pytest.raises(ValueError):
        GpSurrogate([0.2, 0.3], [1, 0], l=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(N=1)
    with pytest.raises(ValueError):
        SamplerConfig(mode="bogus")


# ---------------------------------------------------------------------------
# conditioned density


class StubSurrogate:
    """Exact indicator of an interval, standing in for a GP mean."""

    def __init__(self, lo, hi):
        self.lo, self.hi = lo, hi
        self.phis = np.array([lo, hi])

    def __call__(self, phi):
        phi = np.asarray(phi, float)
        return ((phi >= self.lo) & (phi <= self.hi)).astype(float)


def test_density_of_constant_one_is_prior():
    gp = GpSurrogate(np.linspace(0.0001, 0.9999, 3000), np.ones(3000), l=100.0)
    q = conditioned_density(gp, 20)
    x = np.linspace(0.05, 0.95, 19)
    np.testing.assert_allclose(q.pdf(x), beta_pdf(x, 10.0, 10.0), rtol=1e-4)
    lo, hi = two_sided_bounds(0.35, 20)
    assert gp_direct_p(gp, (lo, hi), 20) == pytest.approx(unconditional_p_value(0.35, 20), abs=1e-5)


def test_density_of_interval_indicator_matches_quadrature():
    q = conditioned_density(StubSurrogate(0.6, 0.9), 20)
    norm, _ = integrate.quad(lambda t: stats.beta.pdf(t, 10, 10), 0.6, 0.9)
    assert q.normalizer == pytest.approx(norm, rel=1e-6)
    for x in (0.61, 0.7, 0.85):
        assert q.pdf(x) == pytest.approx(stats.beta.pdf(x, 10, 10) / norm, rel=1e-6)
    assert q.pdf(0.5) == 0.0
    num, _ = integrate.quad(lambda t: stats.beta.pdf(t, 10, 10), 0.75, 0.9)
    assert q.mass(0.75, 1.0) / q.normalizer == pytest.approx(num / norm, rel=1e-5)


@given(st.integers(0, 1000), st.sampled_from([4, 20, 50]))
def test_density_integrates_to_one(seed, h):
    r = np.random.default_rng(seed)
    phis = np.sort(r.uniform(0.01, 0.99, 40))
    vals = r.integers(0, 2, 40)
    vals[r.integers(0, 40)] = 1
    q = conditioned_density(fit_gp(phis, vals, 100.0), h)
    mids = 0.5 * (q.edges[1:] + q.edges[:-1])
    assert np.sum(q.pdf(mids) * np.diff(q.edges)) == pytest.approx(1.0, abs=1e-6)


def test_density_all_rejected():
    with pytest.raises(AllRejectedError):
        conditioned_density(fit_gp([0.2, 0.5], [0, 0], 100.0), 20)


# ---------------------------------------------------------------------------
# estimators against the exact engine


@pytest.mark.parametrize("seed", range(4))
def test_gp_direct_close_to_exact(seed):
    path, config = cusum_instance(seed)
    exact = exact_p_value(path, config).p_value
    est = mc_p_value(path, config, sampler=SamplerConfig(N=200, seed=seed))
    assert est.p_value == pytest.approx(exact, abs=0.05)
    assert est.method == "mc-gp"


@pytest.mark.parametrize("seed", range(4))
def test_dense_true_indicator_gives_exact_p(seed):
    path, config = cusum_instance(seed)
    S = selection_set(path, config).S
    phis = stratified_phis(1000, "uniform01", seed)
    gp = fit_gp(phis, S.contains(phis).astype(int), 100.0)
    w = path.window
    bounds = two_sided_bounds(path.phi_obs, w.h)
    assert gp_direct_p(gp, bounds, w.h) == pytest.approx(exact_p_value(path, config).p_value, abs=0.01)


def test_gp_is_with_unit_weights():
    # a prior-shaped proposal with every indicator 1 reduces to the critical-region share
    gp = GpSurrogate(np.linspace(0.0001, 0.9999, 5000), np.ones(5000), l=100.0)
    bounds = two_sided_bounds(0.3, 20)
    p = gp_is_p(gp, AlwaysSelected(), bounds, 20, 20_000, seed=3, pool=False)
    assert p == pytest.approx(unconditional_p_value(0.3, 20), abs=0.01)


@pytest.mark.parametrize("seed", range(3))
def test_gp_is_close_to_gp_direct(seed):
    path, config = cusum_instance(seed)
    direct = mc_p_value(path, config, sampler=SamplerConfig(N=200, seed=seed)).p_value
    is_ = mc_p_value(path, config, sampler=SamplerConfig(N=200, N_tilde=200, mode="gp-is", seed=seed))
    assert is_.p_value == pytest.approx(direct, abs=0.05)
    assert is_.method == "mc-gp-is"
    assert is_.diagnostics["n_is"] == 200


def test_permutation_invariance():
    r = np.random.default_rng(2)
    phis = r.uniform(0.01, 0.99, 60)
    vals = (phis < 0.5).astype(int)
    bounds = (0.2, 0.8)
    base = gp_direct_p(fit_gp(phis, vals, 100.0), bounds, 20)
    perm = r.permutation(60)
    assert gp_direct_p(fit_gp(phis[perm], vals[perm], 100.0), bounds, 20) == base
    assert naive_p_hat(phis[perm], vals[perm], *bounds) == naive_p_hat(phis, vals, *bounds)


def test_seeded_runs_are_reproducible():
    path, config = cusum_instance(0)
    s = SamplerConfig(N=60, N_tilde=40, mode="gp-is", seed=[4, 2])
    a = mc_p_value(path, config, sampler=s)
    b = mc_p_value(path, config, sampler=s)
    assert a.p_value == b.p_value
    assert a.diagnostics == b.diagnostics


@pytest.mark.parametrize("ls", [(1.0, 10.0, 100.0, 1000.0)])
def test_length_scale_robustness(ls):
    path, config = cusum_instance(1)
    phis = stratified_phis(100, "uniform01", 0)
    ind = SelectionOracle(path, config).many(phis)
    x = np.linspace(0.0, 1.0, 4001)
    curves = [fit_gp(phis, ind, l)(x) for l in ls]
    spread = max(np.max(np.abs(c1 - c2)) for c1 in curves for c2 in curves)
    assert spread <= 0.05
