"""Exact selection sets and p-values for CUSUM-based detection.

Along the path X'(phi) every CUSUM value is linear in phi, so each execution
of binary segmentation (or WBS) corresponds to an interval of phi. The
selection set is assembled by walking the phi axis: replay the detector at a
point not yet covered, solve that run's inequalities for its interval, and
repeat until (0, 1) is covered.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    IntervalUnion,
    PValueReport,
    truncated_beta_tail_prob,
    truncated_masses,
    two_sided_bounds,
)
from .detect import CUSUM, Decision, DetectionResult, DetectorConfig, _prefix, cusum_curve, detect_squares
from .perturb import PhiPath

log = logging.getLogger(__name__)

TAU_IN_MODEL = "tau-in-model"
FULL_MODEL = "full-model"
CONDITIONINGS = (TAU_IN_MODEL, FULL_MODEL)

_MIN_WIDTH = 1e-12
_CLAMP_TOL = 1e-9


def check_conditioning(conditioning: str) -> str:
    if conditioning not in CONDITIONINGS:
        raise ValueError(f"unknown conditioning {conditioning!r}; expected one of {CONDITIONINGS}")
    return conditioning


def selected(changepoints, tau_hat: int, observed, conditioning: str) -> bool:
    if conditioning == TAU_IN_MODEL:
        return tau_hat in changepoints
    return tuple(changepoints) == tuple(observed)


class _Coeffs:
    """Cached CUSUM intercepts/slopes per interval for one path."""

    def __init__(self, path: PhiPath, min_len: int):
        a, b = path.coefficients
        self.pa = _prefix(a)
        self.pb = _prefix(b)
        self.min_len = min_len
        self._memo: dict = {}

    def __call__(self, s0, e0):
        key = (s0, e0)
        if key not in self._memo:
            taus, alpha = cusum_curve(self.pa, s0, e0, self.min_len)
            _, beta = cusum_curve(self.pb, s0, e0, self.min_len)
            self._memo[key] = (taus, alpha, beta)
        return self._memo[key]


def step_inequalities(decision: Decision, coeffs, phi_run: float):
    """Linear constraints ``c0 + c1 * phi >= 0`` reproducing one decision.

    A detection at ``tau`` with sign ``d`` of its CUSUM value requires
    ``d*G(tau) >= lambda`` (threshold mode) and ``d*G(tau) >= +-G(t)`` for every
    competing split. A rejection requires ``-lambda < G(t) < lambda`` for all.
    """
    parts = [coeffs(s0, e0) for s0, e0 in decision.candidates]
    if not parts:
        return np.zeros(0), np.zeros(0)
    alpha = np.concatenate([p[1] for p in parts])
    beta = np.concatenate([p[2] for p in parts])
    lam = decision.threshold
    if decision.chosen is None:
        c0 = np.concatenate((lam - alpha, lam + alpha))
        c1 = np.concatenate((-beta, beta))
        return c0, c1
    s0, e0, tau = decision.chosen
    taus, a_iv, b_iv = coeffs(s0, e0)
    i = int(np.searchsorted(taus, tau))
    ac, bc = a_iv[i], b_iv[i]
    d = 1.0 if ac + bc * phi_run >= 0 else -1.0
    c0 = [d * ac - alpha, d * ac + alpha]
    c1 = [d * bc - beta, d * bc + beta]
    if lam is not None:
        c0.append(np.array([d * ac - lam]))
        c1.append(np.array([d * bc]))
    return np.concatenate(c0), np.concatenate(c1)


def solve_interval(c0, c1, lo: float = 0.0, hi: float = 1.0) -> IntervalUnion:
    """Intersection of the half-lines ``c0 + c1 * phi >= 0`` with ``[lo, hi]``."""
    lower, upper, feasible = _bounds(np.asarray(c0, float), np.asarray(c1, float), lo, hi)
    if not feasible or upper <= lower:
        return IntervalUnion()
    return IntervalUnion([(lower, upper)])


def _bounds(c0, c1, lo, hi):
    feasible = True
    pos = c1 > 0
    neg = c1 < 0
    flat = ~(pos | neg)
    if np.any(c0[flat] < 0):
        feasible = False
    if np.any(pos):
        lo = max(lo, float(np.max(-c0[pos] / c1[pos])))
    if np.any(neg):
        hi = min(hi, float(np.min(-c0[neg] / c1[neg])))
    return lo, hi, feasible


def event_interval(run: DetectionResult, coeffs, phi_run: float) -> tuple[float, float, bool]:
    """Interval of phi on which the detector repeats every decision of ``run``.

    Returns ``(lo, hi, ok)``; ``ok`` is False when rounding left the replay
    point outside its own constraint set beyond tolerance.
    """
    c0s, c1s = [], []
    for dec in run.decisions:
        c0, c1 = step_inequalities(dec, coeffs, phi_run)
        c0s.append(c0)
        c1s.append(c1)
    if not c0s:
        return 0.0, 1.0, True
    c0 = np.concatenate(c0s)
    c1 = np.concatenate(c1s)
    flat = c1 == 0
    scale = 1.0 + np.abs(c0)
    if np.any(c0[flat] < -_CLAMP_TOL * scale[flat]):
        return phi_run, phi_run, False
    lo, hi, _ = _bounds(c0[~flat], c1[~flat], 0.0, 1.0)
    ok = lo <= phi_run + _CLAMP_TOL and hi >= phi_run - _CLAMP_TOL
    return min(lo, phi_run), max(hi, phi_run), ok


def _check_detector(config: DetectorConfig):
    if config.stat != CUSUM or config.algorithm not in ("binseg", "wbs"):
        raise ValueError(
            "exact selection sets need CUSUM binary segmentation or WBS; "
            f"got {config.stat}-{config.algorithm}"
        )


@dataclass
class SelectionSet:
    S: IntervalUnion
    replays: int
    pieces: int
    ambiguous: int
    observed: tuple[int, ...]


def selection_set(
    path: PhiPath,
    config: DetectorConfig,
    conditioning: str = TAU_IN_MODEL,
    *,
    observed: tuple[int, ...] | None = None,
    max_replays: int = 100_000,
) -> SelectionSet:
    """Set of phi for which the detector still selects ``tau_hat`` (or the whole observed model)."""
    _check_detector(config)
    check_conditioning(conditioning)
    config = config.with_intervals(path.base.T)
    tau_hat = path.window.tau_hat
    coeffs = _Coeffs(path, config.segment_stat.min_len)

    base_run = detect_squares(path.base_squares, config, trace=True)
    if observed is None:
        observed = base_run.changepoints
    pieces: list[tuple[float, float]] = []
    replays = 1
    ambiguous = 0
    n_events = 0

    def account(run, lo, hi, region):
        nonlocal n_events
        n_events += 1
        if selected(run.changepoints, tau_hat, observed, conditioning):
            pieces.append((max(lo, region[0]), min(hi, region[1])))

    phi_obs = path.phi_obs
    lo, hi, ok = event_interval(base_run, coeffs, phi_obs)
    if not ok:
        log.warning("observed run not reproduced by its own inequalities at phi_obs=%.17g", phi_obs)
    account(base_run, lo, hi, (0.0, 1.0))
    uncovered = []
    if lo > 0.0:
        uncovered.append((0.0, lo))
    if hi < 1.0:
        uncovered.append((hi, 1.0))

    while uncovered:
        r_lo, r_hi = uncovered.pop()
        mid = 0.5 * (r_lo + r_hi)
        run = detect_squares(path.squares_at(mid), config, trace=True)
        replays += 1
        if replays > max_replays:
            raise RuntimeError(f"selection-set walk exceeded {max_replays} detector replays")
        if r_hi - r_lo < _MIN_WIDTH:
            ambiguous += 1
            account(run, r_lo, r_hi, (r_lo, r_hi))
            continue
        lo, hi, ok = event_interval(run, coeffs, mid)
        if not ok:
            # split the region at the unresolvable point and keep walking
            uncovered.extend([(r_lo, mid), (mid, r_hi)])
            continue
        account(run, lo, hi, (r_lo, r_hi))
        if lo > r_lo:
            uncovered.append((r_lo, lo))
        if hi < r_hi:
            uncovered.append((hi, r_hi))

    if ambiguous:
        log.warning("%d phi regions narrower than %.0e were assigned by midpoint replay", ambiguous, _MIN_WIDTH)
    return SelectionSet(IntervalUnion(pieces), replays, n_events, ambiguous, tuple(observed))


def exact_p_value(
    path: PhiPath,
    config: DetectorConfig,
    conditioning: str = TAU_IN_MODEL,
    *,
    observed: tuple[int, ...] | None = None,
) -> PValueReport:
    """Post-selection two-sided p-value from the exact truncated Beta law."""
    w = path.window
    phi_obs = path.phi_obs
    lower, upper = two_sided_bounds(phi_obs, w.h, w.h_right)
    sel = selection_set(path, config, conditioning, observed=observed)
    p = truncated_beta_tail_prob(sel.S, lower, upper, w.h, w.h_right)
    _, mass = truncated_masses(sel.S, lower, upper, *w.beta_params)
    return PValueReport(
        tau_hat=w.tau_hat,
        p_value=float(p),
        phi_obs=phi_obs,
        phi_lower=lower,
        phi_upper=upper,
        method="exact-cusum",
        conditioning=conditioning,
        h=w.h,
        h_right=w.h_right,
        diagnostics={
            "n_intervals": len(sel.S),
            "intervals": sel.S.to_list(),
            "detector_runs": sel.replays,
            "ambiguous_regions": sel.ambiguous,
            "s_beta_mass": mass,
            "s_measure": sel.S.measure(),
        },
    )
