"""Moving the data along phi while holding everything orthogonal to it fixed.

Rescaling the pre-change half of the window by ``sqrt(phi / phi_obs)`` and the
post-change half by ``sqrt((1 - phi) / (1 - phi_obs))`` keeps the window sum of
squares and the nested-ratio coordinates ``W`` unchanged. Every squared value
is then affine in phi, ``y_j(phi) = a_j + b_j * phi``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import (
    DegenerateInputError,
    DegenerateSegmentError,
    PhiFrame,
    TimeSeries,
    Window,
    phi_statistic,
)
from .detect import _lr_offset, _prefix, cusum_curve


@dataclass(frozen=True)
class PhiPath:
    base: TimeSeries
    window: Window

    def __post_init__(self):
        self.window.check_fits(self.base.T)

    @cached_property
    def phi_obs(self) -> float:
        return phi_statistic(self.base, self.window)

    @cached_property
    def base_squares(self) -> np.ndarray:
        return self.base.squares()

    @cached_property
    def coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """Intercepts ``a`` and slopes ``b`` of the squared data as functions of phi."""
        y = self.base_squares
        w = self.window
        po = self.phi_obs
        a = y.copy()
        b = np.zeros_like(y)
        a[w.start:w.tau_hat] = 0.0
        b[w.start:w.tau_hat] = y[w.start:w.tau_hat] / po
        a[w.tau_hat:w.stop] = y[w.tau_hat:w.stop] / (1.0 - po)
        b[w.tau_hat:w.stop] = -y[w.tau_hat:w.stop] / (1.0 - po)
        return a, b

    def scales(self, phi: float) -> tuple[float, float]:
        po = self.phi_obs
        return float(np.sqrt(phi / po)), float(np.sqrt((1.0 - phi) / (1.0 - po)))

    def squares_at(self, phi: float) -> np.ndarray:
        """Squared centered data of X'(phi); returns the observed squares at ``phi_obs``."""
        y = self.base_squares
        if phi == self.phi_obs:
            return y
        w = self.window
        po = self.phi_obs
        out = y.copy()
        out[w.start:w.tau_hat] *= phi / po
        out[w.tau_hat:w.stop] *= (1.0 - phi) / (1.0 - po)
        return out

    def with_base(self, base: TimeSeries) -> "PhiPath":
        return PhiPath(base, self.window)


def perturb_series(path: PhiPath, phi: float) -> TimeSeries:
    """X'(phi): rescale the two half-windows so the window statistic equals ``phi``."""
    if not 0.0 < phi < 1.0:
        raise ValueError(f"phi must lie in (0, 1), got {phi}")
    if phi == path.phi_obs:
        return path.base
    w = path.window
    left, right = path.scales(phi)
    mu = path.base.mu
    x = np.array(path.base.values, dtype=float)
    x[w.start:w.tau_hat] = mu + left * (x[w.start:w.tau_hat] - mu)
    x[w.tau_hat:w.stop] = mu + right * (x[w.tau_hat:w.stop] - mu)
    return TimeSeries(x, mu)


# ---------------------------------------------------------------------------
# window coordinates


def _nested_ratios(block: np.ndarray) -> np.ndarray:
    cums = np.cumsum(block)
    if np.any(cums[1:] <= 0.0):
        raise DegenerateInputError("zero nested partial sum of squares in the window")
    return cums[:-1] / cums[1:]


def decompose_w(series: TimeSeries, window: Window) -> PhiFrame:
    """Split the window into phi, the total sum of squares and the nested ratios W."""
    window.check_fits(series.T)
    y = series.squares()
    left = y[window.start:window.tau_hat]
    right = y[window.tau_hat:window.stop]
    w_left = _nested_ratios(left)
    w_right = _nested_ratios(right)
    phi = phi_statistic(series, window)
    return PhiFrame(phi, float(left.sum() + right.sum()), w_left, w_right, window)


def _cascade(w: np.ndarray, total: float) -> np.ndarray:
    # block of length n = len(w) + 1; value i (1-based) = (1 - W_{i-1}) prod_{k>=i} W_k * total
    n = w.size + 1
    tail = np.ones(n)
    for i in range(n - 2, -1, -1):
        tail[i] = tail[i + 1] * w[i]
    w_prev = np.concatenate(([0.0], w))
    return (1.0 - w_prev) * tail * total


def reconstruct_squares(frame: PhiFrame) -> np.ndarray:
    """The window's squared values rebuilt from ``(phi, C0^2, W)``."""
    left = _cascade(np.asarray(frame.w_left, float), frame.c0_sq * frame.phi_obs)
    right = _cascade(np.asarray(frame.w_right, float), frame.c0_sq * (1.0 - frame.phi_obs))
    return np.concatenate((left, right))


def rebuild_series(series: TimeSeries, frame: PhiFrame) -> TimeSeries:
    """Replace the window of ``series`` by the values implied by ``frame``.

    Only squares are determined; signs are copied from ``series``. An observed
    zero keeps a positive sign.
    """
    w = frame.window
    sq = reconstruct_squares(frame)
    x = np.array(series.values, dtype=float)
    sign = np.where(x[w.start:w.stop] - series.mu < 0, -1.0, 1.0)
    x[w.start:w.stop] = series.mu + sign * np.sqrt(sq)
    return TimeSeries(x, series.mu)


# ---------------------------------------------------------------------------
# statistic coefficients along the path


def cusum_phi_coeffs(path: PhiPath, s: int, e: int):
    """Intercept and slope of G_{s,e}(phi, t) for every split of ``(s, e)`` (1-based).

    Returns ``(taus, alpha, beta)`` with ``G = alpha + beta * phi``.
    """
    if not 1 <= s < e <= path.base.T:
        raise ValueError(f"need 1 <= s < e <= {path.base.T}, got ({s}, {e})")
    a, b = path.coefficients
    taus, alpha = cusum_curve(_prefix(a), s - 1, e)
    _, beta = cusum_curve(_prefix(b), s - 1, e)
    return taus, alpha, beta


@dataclass(frozen=True)
class LrPhiCoeffs:
    """Affine sums of squares ``A phi + B`` over ``(s, e)`` and its left pieces."""

    path: PhiPath
    s: int
    e: int
    A: float
    B: float

    def split(self, tau: int) -> tuple[float, float]:
        return lr_affine(self.path, self.s, tau)


class _Sums:
    def __init__(self, y):
        self.p = _prefix(y)

    def __call__(self, i, j):
        """Sum of y over 1-based inclusive ``i..j``; empty ranges give 0."""
        if j < i:
            return 0.0
        return float(self.p[j] - self.p[i - 1])


def lr_affine(path: PhiPath, s: int, e: int) -> tuple[float, float]:
    """Piecewise closed form of ``(A_{s,e}, B_{s,e})`` by position of ``(s, e)`` relative to the window."""
    w = path.window
    L = w.tau_hat - w.h          # last index before the window
    tau = w.tau_hat
    R = w.tau_hat + w.h_right    # last index inside the window
    po = path.phi_obs
    Q = _Sums(path.base_squares)
    ql = 1.0 / po
    qr = 1.0 / (1.0 - po)

    if e <= L:
        A = 0.0
    elif s <= L and e <= tau:
        A = ql * Q(L + 1, e)
    elif s <= L and e <= R:
        A = ql * Q(L + 1, tau) - qr * Q(tau + 1, e)
    elif s <= L:
        A = ql * Q(L + 1, tau) - qr * Q(tau + 1, R)
    elif e <= tau:
        A = ql * Q(s, e)
    elif s <= tau:
        A = ql * Q(s, tau) - qr * Q(tau + 1, min(R, e))
    elif s <= R:
        A = -qr * Q(s, min(R, e))
    else:
        A = 0.0

    if s <= L and e <= tau:
        B = Q(s, min(e, L))
    elif s <= L and e <= R:
        B = Q(s, L) + qr * Q(tau + 1, e)
    elif s <= L:
        B = Q(s, L) + qr * Q(tau + 1, R) + Q(R + 1, e)
    elif s <= tau and e <= tau:
        B = 0.0
    elif s <= tau and e <= R:
        B = qr * Q(tau + 1, e)
    elif s <= tau:
        B = qr * Q(tau + 1, R) + Q(R + 1, e)
    elif s <= R and e <= R:
        B = qr * Q(s, e)
    elif s <= R:
        B = qr * Q(s, R) + Q(R + 1, e)
    else:
        B = Q(s, e)
    return A, B


def lr_phi_coeffs(path: PhiPath, s: int, e: int) -> LrPhiCoeffs:
    if not 1 <= s < e <= path.base.T:
        raise ValueError(f"need 1 <= s < e <= {path.base.T}, got ({s}, {e})")
    A, B = lr_affine(path, s, e)
    return LrPhiCoeffs(path, s, e, A, B)


def lr_stat_phi(coeffs: LrPhiCoeffs, tau: int, phi: float, normalized: bool = True) -> float:
    """Likelihood-ratio statistic of X'(phi) at split ``tau`` of ``(s, e)``."""
    s, e = coeffs.s, coeffs.e
    if not s <= tau < e:
        raise ValueError(f"need {s} <= tau < {e}, got {tau}")
    A1, B1 = coeffs.split(tau)
    total = coeffs.A * phi + coeffs.B
    left = A1 * phi + B1
    right = (coeffs.A - A1) * phi + (coeffs.B - B1)
    if total <= 0.0 or left <= 0.0 or right <= 0.0:
        raise DegenerateSegmentError(f"nonpositive sum of squares at phi={phi} for split {tau} of ({s}, {e})")
    lam = (e - s + 1) * np.log(total) - (tau - s + 1) * np.log(left) - (e - tau) * np.log(right)
    if normalized:
        lam -= float(_lr_offset(e - s + 1, tau - s + 1))
    return float(lam)
