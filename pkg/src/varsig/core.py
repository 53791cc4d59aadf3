"""Domain types, Beta numerics and the two-sided p-value contract.

Indices follow the usual changepoint convention: a changepoint ``tau`` is the
number of observations in the left piece, so ``tau`` lies in ``1..T-1`` and the
window around it covers positions ``tau-h+1 .. tau+h`` (1-based).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import kstest


class DegenerateInputError(ValueError):
    """Input for which the statistic or its null law is undefined."""


class DegenerateSegmentError(DegenerateInputError):
    """A segment sum of squares that must be positive is zero."""


class NumericalUnderflowError(FloatingPointError):
    """The conditioning set carries (numerically) no null probability."""


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray
    mu: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError(f"series must be one-dimensional, got shape {values.shape}")
        if values.size < 2:
            raise ValueError("series needs at least two observations")
        if not np.all(np.isfinite(values)):
            raise ValueError("series contains non-finite values")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mu", float(self.mu))

    @property
    def T(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def centered(self) -> np.ndarray:
        return self.values - self.mu

    def squares(self) -> np.ndarray:
        """Squared centered values, the only thing both detectors look at."""
        c = self.values - self.mu
        return c * c


@dataclass(frozen=True)
class Window:
    """Null-hypothesis window around a changepoint.

    ``h`` is the half-width before ``tau_hat``; ``h_right`` defaults to ``h``.
    Unequal halves are used for the whole-data window.
    """

    tau_hat: int
    h: int
    h_right: int | None = None

    def __post_init__(self):
        if self.h_right is None:
            object.__setattr__(self, "h_right", self.h)
        if self.h < 1 or self.h_right < 1:
            raise ValueError(f"window half-widths must be >= 1, got {self.h}, {self.h_right}")
        if self.tau_hat - self.h < 0:
            raise ValueError(f"window of half-width {self.h} does not fit before tau_hat={self.tau_hat}")

    @property
    def h_left(self) -> int:
        return self.h

    @property
    def start(self) -> int:
        """0-based index of the first window position."""
        return self.tau_hat - self.h

    @property
    def stop(self) -> int:
        """0-based exclusive end of the window."""
        return self.tau_hat + self.h_right

    @property
    def beta_params(self) -> tuple[float, float]:
        return self.h / 2.0, self.h_right / 2.0

    @property
    def symmetric(self) -> bool:
        return self.h == self.h_right

    def fits(self, T: int) -> bool:
        return self.start >= 0 and self.stop <= T and 1 <= self.tau_hat <= T - 1

    def check_fits(self, T: int) -> None:
        if not self.fits(T):
            raise ValueError(
                f"window (tau_hat={self.tau_hat}, h={self.h}, h_right={self.h_right}) "
                f"does not fit a series of length {T}"
            )

    @classmethod
    def whole(cls, tau_hat: int, T: int) -> "Window":
        return cls(tau_hat, tau_hat, T - tau_hat)


@dataclass(frozen=True)
class PhiFrame:
    phi_obs: float
    c0_sq: float
    w_left: np.ndarray
    w_right: np.ndarray
    window: Window


class IntervalUnion:
    """Finite union of disjoint closed subintervals of [0, 1].

    Overlapping or touching pieces are merged on construction, so the stored
    representation is canonical.
    """

    __slots__ = ("_intervals",)

    def __init__(self, intervals: Iterable[tuple[float, float]] = ()):
        pieces = sorted(
            (max(0.0, float(lo)), min(1.0, float(hi))) for lo, hi in intervals
        )
        merged: list[tuple[float, float]] = []
        for lo, hi in pieces:
            if hi <= lo:
                continue
            if merged and lo <= merged[-1][1]:
                if hi > merged[-1][1]:
                    merged[-1] = (merged[-1][0], hi)
            else:
                merged.append((lo, hi))
        self._intervals = tuple(merged)

    @classmethod
    def unit(cls) -> "IntervalUnion":
        return cls([(0.0, 1.0)])

    @property
    def intervals(self) -> tuple[tuple[float, float], ...]:
        return self._intervals

    def __iter__(self) -> Iterator[tuple[float, float]]:
        return iter(self._intervals)

    def __len__(self) -> int:
        return len(self._intervals)

    def __bool__(self) -> bool:
        return bool(self._intervals)

    def __eq__(self, other) -> bool:
        return isinstance(other, IntervalUnion) and self._intervals == other._intervals

    def __hash__(self):
        return hash(self._intervals)

    def __repr__(self) -> str:
        body = " U ".join(f"[{lo:.6g}, {hi:.6g}]" for lo, hi in self._intervals)
        return f"IntervalUnion({body or 'empty'})"

    def measure(self) -> float:
        return float(sum(hi - lo for lo, hi in self._intervals))

    def contains(self, phi) -> np.ndarray | bool:
        phi_arr = np.asarray(phi, dtype=float)
        out = np.zeros(phi_arr.shape, dtype=bool)
        for lo, hi in self._intervals:
            out |= (phi_arr >= lo) & (phi_arr <= hi)
        return bool(out) if out.ndim == 0 else out

    def endpoints(self) -> np.ndarray:
        return np.array([x for iv in self._intervals for x in iv], dtype=float)

    def intersect(self, other: "IntervalUnion") -> "IntervalUnion":
        out = []
        for lo1, hi1 in self._intervals:
            for lo2, hi2 in other._intervals:
                lo, hi = max(lo1, lo2), min(hi1, hi2)
                if hi > lo:
                    out.append((lo, hi))
        return IntervalUnion(out)

    def union(self, other: "IntervalUnion") -> "IntervalUnion":
        return IntervalUnion(self._intervals + other._intervals)

    def to_list(self) -> list[list[float]]:
        return [[lo, hi] for lo, hi in self._intervals]


def critical_region(phi_lower: float, phi_upper: float) -> IntervalUnion:
    return IntervalUnion([(0.0, phi_lower), (phi_upper, 1.0)])


@dataclass
class PValueReport:
    tau_hat: int
    p_value: float | None
    phi_obs: float | None
    phi_lower: float | None
    phi_upper: float | None
    method: str
    conditioning: str
    h: int | None = None
    h_right: int | None = None
    diagnostics: dict = field(default_factory=dict)
    skipped: str | None = None

    def to_dict(self) -> dict:
        return {
            "tau_hat": int(self.tau_hat),
            "p_value": self.p_value,
            "phi_obs": self.phi_obs,
            "phi_lower": self.phi_lower,
            "phi_upper": self.phi_upper,
            "method": self.method,
            "conditioning": self.conditioning,
            "h": self.h,
            "h_right": self.h_right,
            "diagnostics": self.diagnostics,
            "skipped": self.skipped,
        }


def derive_seed(seed, *keys):
    """Entropy for an independent child stream, or None to stay unseeded.

    ``seed`` may itself be a list produced by an earlier derivation.
    """
    if seed is None:
        return None
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return base + [int(k) for k in keys]


# ---------------------------------------------------------------------------
# statistic


def phi_statistic(series: TimeSeries, window: Window) -> float:
    """Share of the window sum of squares that falls before ``tau_hat``."""
    window.check_fits(series.T)
    sq = series.squares()
    left = float(np.sum(sq[window.start:window.tau_hat]))
    right = float(np.sum(sq[window.tau_hat:window.stop]))
    total = left + right
    if total <= 0.0:
        raise DegenerateInputError(f"zero sum of squares in window around tau_hat={window.tau_hat}")
    phi = left / total
    if phi <= 0.0 or phi >= 1.0:
        raise DegenerateInputError(
            f"phi={phi} on the boundary: one half-window has zero sum of squares"
        )
    return phi


# ---------------------------------------------------------------------------
# Beta numerics

_CF_EPS = 1e-15
_CF_TINY = 1e-300
_CF_MAXITER = 10_000


def _log_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _betacf(x: float, a: float, b: float) -> float:
    """Modified Lentz evaluation of the incomplete-beta continued fraction."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAXITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")


def _lower_tail(x: float, a: float, b: float) -> float:
    """I_x(a, b) evaluated directly; accurate when x is left of the mode-ish split."""
    log_front = a * math.log(x) + b * math.log1p(-x) - _log_beta(a, b)
    return math.exp(log_front) * _betacf(x, a, b) / a


def _beta_tails(x: float, a: float, b: float) -> tuple[float, float]:
    """Return (cdf, sf) without forming either as ``1 - other`` when it is small."""
    if a <= 0 or b <= 0:
        raise ValueError(f"Beta parameters must be positive, got a={a}, b={b}")
    if x <= 0.0:
        return 0.0, 1.0
    if x >= 1.0:
        return 1.0, 0.0
    if x < (a + 1.0) / (a + b + 2.0):
        cdf = _lower_tail(x, a, b)
        return cdf, 1.0 - cdf
    sf = _lower_tail(1.0 - x, b, a)
    return 1.0 - sf, sf


def beta_cdf(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    return _beta_tails(float(x), float(a), float(b))[0]


def beta_sf(x: float, a: float, b: float) -> float:
    return _beta_tails(float(x), float(a), float(b))[1]


def beta_pdf(x, a: float, b: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = (x > 0) & (x < 1)
    xi = x[inside]
    out[inside] = np.exp((a - 1) * np.log(xi) + (b - 1) * np.log1p(-xi) - _log_beta(a, b))
    return out


def beta_mass(lo: float, hi: float, a: float, b: float) -> float:
    """Beta(a, b) probability of [lo, hi], choosing the tail that avoids cancellation."""
    if hi <= lo:
        return 0.0
    cdf_lo, sf_lo = _beta_tails(lo, a, b)
    cdf_hi, sf_hi = _beta_tails(hi, a, b)
    if cdf_hi <= 0.5:
        return max(cdf_hi - cdf_lo, 0.0)
    if sf_lo <= 0.5:
        return max(sf_lo - sf_hi, 0.0)
    return max(1.0 - cdf_lo - sf_hi, 0.0)


def beta_ppf(q: float, a: float, b: float) -> float:
    """Quantile of Beta(a, b) by bracketing root-find on :func:`beta_cdf`."""
    if q <= 0.0:
        return 0.0
    if q >= 1.0:
        return 1.0
    return brentq(lambda x: beta_cdf(x, a, b) - q, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def two_sided_bounds(phi_obs: float, h: int, h_right: int | None = None) -> tuple[float, float]:
    """Lower and upper edges of the two-sided critical region through ``phi_obs``.

    The mirror point ``phi_*`` has null CDF equal to the observed null survival
    probability. For equal half-windows the null is symmetric and
    ``phi_* = 1 - phi_obs``.
    """
    if not 0.0 < phi_obs < 1.0:
        raise DegenerateInputError(f"phi_obs must lie in (0, 1), got {phi_obs}")
    h_right = h if h_right is None else h_right
    a, b = h / 2.0, h_right / 2.0
    if a == b:
        phi_star = 1.0 - phi_obs
    else:
        phi_star = beta_ppf(beta_sf(phi_obs, a, b), a, b)
    return min(phi_obs, phi_star), max(phi_obs, phi_star)


def unconditional_p_value(phi_obs: float, h: int, h_right: int | None = None) -> float:
    """Two-sided p-value ignoring selection (the naive, data-reusing p-value)."""
    h_right = h if h_right is None else h_right
    lower, upper = two_sided_bounds(phi_obs, h, h_right)
    a, b = h / 2.0, h_right / 2.0
    return min(1.0, beta_cdf(lower, a, b) + beta_sf(upper, a, b))


def truncated_masses(
    S: IntervalUnion, phi_lower: float, phi_upper: float, a: float, b: float
) -> tuple[float, float]:
    """Beta(a, b) mass of ``S`` restricted to the critical region, and of ``S``."""
    denom = sum(beta_mass(lo, hi, a, b) for lo, hi in S)
    numer = sum(beta_mass(lo, hi, a, b) for lo, hi in S.intersect(critical_region(phi_lower, phi_upper)))
    return min(numer, denom), denom


def truncated_beta_tail_prob(
    S: IntervalUnion, phi_lower: float, phi_upper: float, h: int, h_right: int | None = None
) -> float:
    """Pr(phi <= phi_lower or phi >= phi_upper | phi in S) under the null Beta law."""
    h_right = h if h_right is None else h_right
    numer, denom = truncated_masses(S, phi_lower, phi_upper, h / 2.0, h_right / 2.0)
    if denom < 1e-300:
        raise NumericalUnderflowError(
            f"null mass of the selection set is {denom:.3g} (< 1e-300); S={S!r}, h={h}, h_right={h_right}"
        )
    return numer / denom


def ks_uniform(p_values: Sequence[float]):
    """One-sample KS test of p-values against U(0, 1) (statistic, p-value)."""
    res = kstest(np.asarray(p_values, dtype=float), "uniform")
    return float(res.statistic), float(res.pvalue)
