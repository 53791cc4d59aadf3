"""Monte Carlo p-values for detectors without a closed-form selection set.

Membership of phi in the selection set is checked by re-running the detector
on X'(phi). The indicator is sampled on a stratified design, smoothed with a
Gaussian process whose exponential kernel makes the posterior mean a local
two-point interpolation, and the resulting conditioned density of phi gives
the p-value directly or serves as an importance-sampling proposal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaincinv

from .core import PValueReport, beta_pdf, derive_seed, two_sided_bounds
from .detect import DetectorConfig, detect_squares
from .exact import TAU_IN_MODEL, check_conditioning, selected
from .perturb import PhiPath

MODES = ("gp-direct", "gp-is", "naive", "naive-stratified")
_METHOD = {"gp-direct": "mc-gp", "gp-is": "mc-gp-is", "naive": "mc-naive", "naive-stratified": "mc-naive"}
_MIN_GAP = 1e-12
GRID_SIZE = 4096


class IndicatorEvaluationError(RuntimeError):
    """Re-running the detector at some phi failed."""


class AllRejectedError(ArithmeticError):
    """No sampled phi was selected, so the conditional estimate is undefined."""


@dataclass(frozen=True)
class SamplerConfig:
    N: int = 100
    N_tilde: int = 100
    l: float = 100.0
    mode: str = "gp-direct"
    seed: int | list[int] | None = 0
    early_stop: bool = True

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if not self.l > 0:
            raise ValueError("length-scale l must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}; expected one of {MODES}")


class SelectionOracle:
    """Indicator of the selection event along one phi path.

    Early stopping ends a replay as soon as the outcome is known. Best splits of
    intervals that do not overlap the window are computed once and reused.
    """

    def __init__(self, path: PhiPath, config: DetectorConfig, conditioning: str = TAU_IN_MODEL,
                 *, observed=None, early_stop: bool = True):
        self.path = path
        self.config = config.with_intervals(path.base.T)
        self.conditioning = check_conditioning(conditioning)
        self.tau_hat = path.window.tau_hat
        self.early_stop = early_stop
        self._cache: dict = {}
        self._frozen = (path.window.start, path.window.stop)
        if observed is None:
            observed = detect_squares(path.base_squares, self.config).changepoints
        self.observed = tuple(observed)
        self.runs = 0

    def _stop_rule(self):
        if not self.early_stop or self.config.algorithm == "pelt":
            return None
        if self.conditioning == TAU_IN_MODEL:
            tau = self.tau_hat
            return lambda cp: cp == tau
        obs = set(self.observed)
        return lambda cp: cp not in obs

    def __call__(self, phi: float) -> int:
        if not 0.0 < phi < 1.0:
            raise ValueError(f"phi must lie in (0, 1), got {phi}")
        self.runs += 1
        try:
            run = detect_squares(
                self.path.squares_at(phi), self.config, stop=self._stop_rule(),
                cache=self._cache, frozen=self._frozen,
            )
        except (ArithmeticError, ValueError) as exc:
            raise IndicatorEvaluationError(f"detector failed at phi={phi!r}: {exc}") from exc
        return int(selected(run.changepoints, self.tau_hat, self.observed, self.conditioning))

    def many(self, phis) -> np.ndarray:
        return np.array([self(float(p)) for p in phis], dtype=int)


def indicator(path: PhiPath, config: DetectorConfig, conditioning: str, phi: float, **kwargs) -> int:
    return SelectionOracle(path, config, conditioning, **kwargs)(phi)


# ---------------------------------------------------------------------------
# sampling


def stratified_uniforms(N: int, rng, stratified: bool = True) -> np.ndarray:
    """``z_i ~ U((i-1)/N, i/N)`` for ``i = 1..N`` (or plain sorted iid uniforms)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    u = rng.random(N)
    return (np.arange(N) + u) / N if stratified else np.sort(u)


def inverse_cdf(z, distribution: str = "uniform01", *, a: float | None = None, b: float | None = None) -> np.ndarray:
    """Map uniforms to phi: identity for ``"uniform01"``, Beta(a, b) quantiles for ``"beta"``."""
    z = np.clip(np.asarray(z, float), _MIN_GAP, 1.0 - _MIN_GAP)
    if distribution == "uniform01":
        return z
    if distribution in ("beta", "null-beta"):
        if a is None or b is None:
            raise ValueError("beta sampling needs a and b")
        return np.clip(betaincinv(a, b, z), _MIN_GAP, 1.0 - _MIN_GAP)
    raise ValueError(f"unknown distribution {distribution!r}")


def stratified_phis(
    N: int,
    distribution: str = "uniform01",
    seed=None,
    *,
    a: float | None = None,
    b: float | None = None,
    stratified: bool = True,
) -> np.ndarray:
    """Sorted phi sample through the inverse CDF, one point per ``[(i-1)/N, i/N)`` stratum.

    ``distribution`` is ``"uniform01"`` or ``"beta"`` (give ``a`` and ``b``).
    With ``stratified=False`` the uniforms are plain iid draws.
    """
    z = stratified_uniforms(N, np.random.default_rng(seed), stratified)
    return np.sort(inverse_cdf(z, distribution, a=a, b=b))


def _critical(phis, phi_lower, phi_upper):
    return (phis <= phi_lower) | (phis >= phi_upper)


def naive_p_hat(phis, indicators, phi_lower: float, phi_upper: float, weights=None) -> float:
    """Selected share of samples that fall in the critical region (optionally weighted)."""
    phis = np.asarray(phis, float)
    ind = np.asarray(indicators, float)
    w = np.ones_like(phis) if weights is None else np.asarray(weights, float)
    den = float(np.sum(ind * w))
    if den <= 0:
        raise AllRejectedError("no sampled phi was selected")
    return float(np.sum(ind * w * _critical(phis, phi_lower, phi_upper))) / den


# ---------------------------------------------------------------------------
# Gaussian-process surrogate


def exp_kernel(x1, x2, l: float) -> np.ndarray:
    """exp(-|x1 - x2| / (2 l^2))."""
    return np.exp(-np.abs(np.subtract.outer(x1, x2)) / (2.0 * l * l))


class GpSurrogate:
    """Posterior mean of a zero-mean GP with exponential kernel fitted to 0/1 indicators.

    Between neighbouring design points the posterior mean depends only on the
    two bracketing observations; outside the design range it decays towards
    the prior mean. Evaluation is O(log N) per point.
    """

    def __init__(self, phis, values, l: float = 100.0):
        phis = np.asarray(phis, float)
        values = np.asarray(values, float)
        if phis.shape != values.shape or phis.ndim != 1 or phis.size < 1:
            raise ValueError("design points and observations must be matching 1-d arrays")
        order = np.argsort(phis, kind="stable")
        phis, values = phis[order], values[order]
        if phis.size > 1 and np.min(np.diff(phis)) < _MIN_GAP:
            raise ValueError("design points must be distinct (minimum gap 1e-12)")
        if not l > 0:
            raise ValueError("length-scale must be positive")
        self.phis = phis
        self.values = values
        self.l = float(l)
        self.rate = 1.0 / (2.0 * self.l * self.l)

    def __call__(self, phi) -> np.ndarray:
        x = np.asarray(phi, float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        p, v, c = self.phis, self.values, self.rate
        out = np.empty_like(x)
        i = np.searchsorted(p, x, side="right")  # p[i-1] <= x < p[i]
        left = i == 0
        right = i == p.size
        mid = ~(left | right)
        out[left] = np.exp(-c * (p[0] - x[left])) * v[0]
        out[right] = np.exp(-c * (x[right] - p[-1])) * v[-1]
        if np.any(mid):
            j = i[mid]
            da = x[mid] - p[j - 1]
            db = p[j] - x[mid]
            den = np.expm1(-2.0 * c * (da + db))
            w1 = np.exp(-c * da) * np.expm1(-2.0 * c * db) / den
            w2 = np.exp(-c * db) * np.expm1(-2.0 * c * da) / den
            out[mid] = w1 * v[j - 1] + w2 * v[j]
        return out[0] if scalar else out


def fit_gp(phis, indicators, l: float = 100.0) -> GpSurrogate:
    return GpSurrogate(phis, indicators, l)


def dense_posterior_mean(phis, values, x, l: float) -> np.ndarray:
    """Textbook ``K(x, phi) K(phi, phi)^{-1} p`` by a dense solve."""
    K = exp_kernel(phis, phis, l)
    k = exp_kernel(np.atleast_1d(x), phis, l)
    return k @ np.linalg.solve(K, np.asarray(values, float))


@dataclass
class ConditionedDensity:
    """q(phi) proportional to p_hat(phi) * Beta(a, b) pdf, integrated by the midpoint rule.

    Cells come from a fixed uniform grid refined at the design points, where
    p_hat has kinks; tail masses split cells at the requested bounds.
    """

    surrogate: GpSurrogate
    a: float
    b: float
    grid_size: int = GRID_SIZE
    edges: np.ndarray = field(init=False, repr=False)
    cell_mass: np.ndarray = field(init=False, repr=False)
    normalizer: float = field(init=False)

    def __post_init__(self):
        edges = np.union1d(np.linspace(0.0, 1.0, self.grid_size + 1), self.surrogate.phis)
        self.edges = edges
        mids = 0.5 * (edges[1:] + edges[:-1])
        self.cell_mass = self.unnormalized(mids) * np.diff(edges)
        self.normalizer = float(self.cell_mass.sum())
        if not self.normalizer > 0:
            raise AllRejectedError("conditioned density has zero mass: every design indicator is 0")

    def unnormalized(self, phi) -> np.ndarray:
        return self.surrogate(phi) * beta_pdf(phi, self.a, self.b)

    def pdf(self, phi) -> np.ndarray:
        return self.unnormalized(phi) / self.normalizer

    def mass(self, lo: float, hi: float) -> float:
        """Unnormalized integral of ``p_hat * pi`` over ``[lo, hi]``."""
        lo, hi = max(lo, 0.0), min(hi, 1.0)
        if hi <= lo:
            return 0.0
        inner = self.edges[(self.edges > lo) & (self.edges < hi)]
        e = np.concatenate(([lo], inner, [hi]))
        mids = 0.5 * (e[1:] + e[:-1])
        return float(np.sum(self.unnormalized(mids) * np.diff(e)))

    def tail_masses(self, phi_lower: float, phi_upper: float) -> tuple[float, float]:
        numer = self.mass(0.0, phi_lower) + self.mass(phi_upper, 1.0)
        denom = self.mass(0.0, 1.0)
        return min(numer, denom), denom

    def cell_pdf(self, phi) -> np.ndarray:
        """Density of the piecewise-constant sampler actually used by :meth:`sample`."""
        k = np.clip(np.searchsorted(self.edges, phi, side="right") - 1, 0, self.cell_mass.size - 1)
        return self.cell_mass[k] / np.diff(self.edges)[k] / self.normalizer

    def sample(self, n: int, rng) -> np.ndarray:
        cdf = np.cumsum(self.cell_mass) / self.normalizer
        u = rng.random(n)
        k = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
        lo = self.edges[k]
        width = self.edges[k + 1] - lo
        return np.clip(lo + rng.random(n) * width, _MIN_GAP, 1.0 - _MIN_GAP)


def conditioned_density(surrogate: GpSurrogate, h: int, h_right: int | None = None, grid_size: int = GRID_SIZE):
    h_right = h if h_right is None else h_right
    return ConditionedDensity(surrogate, h / 2.0, h_right / 2.0, grid_size)


def gp_direct_p(surrogate: GpSurrogate, bounds: tuple[float, float], h: int, h_right: int | None = None) -> float:
    """q_hat-mass of the critical region."""
    q = conditioned_density(surrogate, h, h_right)
    numer, denom = q.tail_masses(*bounds)
    return numer / denom


def _is_sums(phis, ind, weights, bounds):
    crit = _critical(phis, *bounds)
    return float(np.sum(ind * weights * crit)), float(np.sum(ind * weights))


def gp_is_p(
    surrogate: GpSurrogate,
    oracle,
    bounds: tuple[float, float],
    h: int,
    N_tilde: int,
    seed=None,
    *,
    h_right: int | None = None,
    pool: bool = True,
) -> float:
    """Self-normalized importance sampling with q_hat as the proposal.

    Fresh indicators are evaluated at the sampled phi. With ``pool`` the GP
    design points join the estimate with their own (uniform) proposal weight.
    """
    return _gp_is(surrogate, oracle, bounds, h, N_tilde, seed, h_right=h_right, pool=pool)[0]


def _gp_is(surrogate, oracle, bounds, h, N_tilde, seed, *, h_right=None, pool=True):
    q = conditioned_density(surrogate, h, h_right)
    rng = np.random.default_rng(seed)
    phis = np.sort(q.sample(N_tilde, rng))
    ind = oracle.many(phis) if N_tilde else np.zeros(0)
    w = beta_pdf(phis, q.a, q.b) / q.cell_pdf(phis)
    numer, denom = _is_sums(phis, ind, w, bounds)
    if pool:
        dn, dd = _is_sums(surrogate.phis, surrogate.values, beta_pdf(surrogate.phis, q.a, q.b), bounds)
        numer += dn
        denom += dd
    if denom <= 0:
        raise AllRejectedError("importance sample and design pool contain no selected phi")
    return numer / denom, numer, denom, int(np.sum(ind))


def design(path: PhiPath, oracle, N: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Stratified U(0, 1) design plus phi_obs (indicator 1 by construction)."""
    phis = stratified_phis(N, "uniform01", seed)
    phi_obs = path.phi_obs
    keep = np.abs(phis - phi_obs) >= _MIN_GAP
    phis = phis[keep]
    ind = oracle.many(phis)
    phis = np.append(phis, phi_obs)
    ind = np.append(ind, 1)
    order = np.argsort(phis)
    return phis[order], ind[order]


@dataclass
class McResult:
    p_value: float
    numer: float
    denom: float
    diagnostics: dict


def mc_masses(path: PhiPath, config: DetectorConfig, conditioning: str, sampler: SamplerConfig,
              *, observed=None, oracle=None) -> McResult:
    """Selected-and-critical and selected null masses estimated by ``sampler.mode``."""
    w = path.window
    a, b = w.beta_params
    bounds = two_sided_bounds(path.phi_obs, w.h, w.h_right)
    if oracle is None:
        oracle = SelectionOracle(path, config, conditioning, observed=observed, early_stop=sampler.early_stop)
    diag: dict = {"mode": sampler.mode}
    if sampler.mode in ("naive", "naive-stratified"):
        phis = stratified_phis(sampler.N, "beta", sampler.seed, a=a, b=b,
                               stratified=sampler.mode == "naive-stratified")
        ind = oracle.many(phis)
        phis = np.append(phis, path.phi_obs)
        ind = np.append(ind, 1)
        crit = _critical(phis, *bounds)
        numer, denom = float(np.sum(ind * crit)), float(np.sum(ind))
        diag.update(n_samples=int(phis.size), n_selected=int(ind.sum()), s_measure_estimate=float(ind.mean()))
    else:
        phis, ind = design(path, oracle, sampler.N, sampler.seed)
        gp = fit_gp(phis, ind, sampler.l)
        diag.update(n_design=int(phis.size), n_design_selected=int(ind.sum()), l=sampler.l)
        if sampler.mode == "gp-direct":
            q = conditioned_density(gp, w.h, w.h_right)
            numer, denom = q.tail_masses(*bounds)
            diag["s_measure_estimate"] = float(np.sum(gp(0.5 * (q.edges[1:] + q.edges[:-1])) * np.diff(q.edges)))
        else:
            seed = derive_seed(sampler.seed, 1)
            _, numer, denom, n_sel = _gp_is(gp, oracle, bounds, w.h, sampler.N_tilde, seed, h_right=w.h_right)
            diag.update(n_is=sampler.N_tilde, n_is_selected=n_sel)
    diag["detector_runs"] = oracle.runs
    if denom <= 0:
        raise AllRejectedError("selection probability estimate is zero")
    return McResult(numer / denom, numer, denom, diag)


def mc_p_value(path: PhiPath, config: DetectorConfig, conditioning: str = TAU_IN_MODEL,
               sampler: SamplerConfig | None = None, *, observed=None) -> PValueReport:
    sampler = sampler or SamplerConfig()
    w = path.window
    lower, upper = two_sided_bounds(path.phi_obs, w.h, w.h_right)
    res = mc_masses(path, config, conditioning, sampler, observed=observed)
    return PValueReport(
        tau_hat=w.tau_hat,
        p_value=float(min(max(res.p_value, 0.0), 1.0)),
        phi_obs=path.phi_obs,
        phi_lower=lower,
        phi_upper=upper,
        method=_METHOD[sampler.mode],
        conditioning=conditioning,
        h=w.h,
        h_right=w.h_right,
        diagnostics=res.diagnostics,
    )
