"""scikit-learn style wrappers around detection and post-selection testing.

Both estimators treat ``X`` as one univariate series, given as a 1-d array or
a single-column 2-d array.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .core import TimeSeries
from .detect import DetectionResult, detect
from .harness import holm_adjusted, holm_bonferroni
from .inference import InferenceSettings, detect_and_test, detector_config
from .mc import SamplerConfig


def check_series(X, mu: float | None = 0.0, center: bool = False) -> TimeSeries:
    """Validate ``X`` as a finite univariate series and wrap it with its mean.

    ``center=True`` uses the sample mean; otherwise ``mu`` is the known mean.
    """
    x = check_array(X, ensure_2d=False, dtype=np.float64, input_name="X")
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise ValueError(f"X must be a single series; got {x.shape[1]} columns")
        x = x[:, 0]
    if x.shape[0] < 2:
        raise ValueError("X needs at least 2 observations")
    if center:
        mu = float(np.mean(x))
    elif mu is None:
        raise ValueError("give mu or set center=True")
    return TimeSeries(x, float(mu))


def segment_labels(changepoints, T: int) -> np.ndarray:
    """Segment index of every time point; changepoint ``tau`` starts a new segment at position ``tau``."""
    labels = np.zeros(T, dtype=int)
    for c in sorted(changepoints):
        labels[c:] += 1
    return labels


class VarianceChangeDetector(BaseEstimator):
    """Changepoints in variance of a series with known (or sample) mean.

    Parameters
    ----------
    method : {"cusum-binseg", "cusum-wbs", "lr-binseg", "lr-wbs", "lr-pelt"}
    threshold, n_changepoints, penalty : float, int, float
        Stopping rule. Give exactly one; ``penalty`` is for ``lr-pelt``.
    n_intervals : int
        Number of random intervals for WBS.
    mu : float
        Known mean. Ignored when ``center`` is True.
    center : bool
        Subtract the sample mean instead of ``mu``.
    random_state : int
        Seed for the WBS intervals.

    Attributes
    ----------
    changepoints_ : ndarray of int
        Sorted changepoints; ``tau`` means the change happens after ``tau`` observations.
    result_ : DetectionResult
    series_ : TimeSeries
    """

    def __init__(self, method="cusum-binseg", threshold=None, n_changepoints=None, penalty=None,
                 n_intervals=100, mu=0.0, center=False, random_state=0):
        self.method = method
        self.threshold = threshold
        self.n_changepoints = n_changepoints
        self.penalty = penalty
        self.n_intervals = n_intervals
        self.mu = mu
        self.center = center
        self.random_state = random_state

    def detector_config(self):
        return detector_config(self.method, threshold=self.threshold, n_changepoints=self.n_changepoints,
                               penalty=self.penalty, n_intervals=self.n_intervals, seed=self.random_state)

    def _detect(self, X) -> tuple[TimeSeries, DetectionResult]:
        series = check_series(X, self.mu, self.center)
        return series, detect(series, self.detector_config())

    def fit(self, X, y=None):
        self.series_, self.result_ = self._detect(X)
        self.changepoints_ = np.array(self.result_.changepoints, dtype=int)
        self.n_samples_fit_ = self.series_.T
        return self

    def predict(self, X):
        """Segment labels of a series, detected with the fitted settings."""
        check_is_fitted(self, "result_")
        series, result = self._detect(X)
        return segment_labels(result.changepoints, series.T)

    def fit_predict(self, X, y=None):
        self.fit(X)
        return segment_labels(self.changepoints_, self.n_samples_fit_)


class PostSelectionVarianceTest(BaseEstimator):
    """Detect variance changes and attach selection-adjusted p-values.

    Parameters
    ----------
    detector : VarianceChangeDetector, optional
        Cloned before fitting; defaults to CUSUM binary segmentation with one changepoint.
    h : int or "whole"
        Half-width of the null window around each changepoint.
    conditioning : {"tau-in-model", "full-model"}
    engine : {"auto", "exact", "mc"}
    N, N_tilde, l, mode : Monte Carlo settings (GP design size, importance samples,
        kernel length-scale and estimator).
    n_w : int
        Number of nuisance resamples; 1 conditions on the observed ones.
    alpha : float
        Holm-Bonferroni family-wise level for ``significant_``.
    random_state : int

    Attributes
    ----------
    changepoints_ : ndarray of int
        Detected changepoints in detection order.
    reports_ : list of PValueReport
    p_values_ : ndarray
        NaN where a changepoint was skipped.
    adjusted_p_values_, significant_ : ndarray
        Holm-Bonferroni over the tested changepoints.
    """

    def __init__(self, detector=None, h=20, conditioning="tau-in-model", engine="auto", N=100, N_tilde=100,
                 l=100.0, mode="gp-direct", n_w=1, alpha=0.05, random_state=0):
        self.detector = detector
        self.h = h
        self.conditioning = conditioning
        self.engine = engine
        self.N = N
        self.N_tilde = N_tilde
        self.l = l
        self.mode = mode
        self.n_w = n_w
        self.alpha = alpha
        self.random_state = random_state

    def _settings(self) -> InferenceSettings:
        sampler = SamplerConfig(N=self.N, N_tilde=self.N_tilde, l=self.l, mode=self.mode, seed=self.random_state)
        return InferenceSettings(self.h, self.conditioning, self.engine, sampler, self.n_w)

    def fit(self, X, y=None):
        det = clone(self.detector) if self.detector is not None else VarianceChangeDetector(n_changepoints=1)
        settings = self._settings()
        series = check_series(X, det.mu, det.center)
        self.detection_, self.reports_ = detect_and_test(series, det.detector_config(), settings)
        self.detector_ = det
        self.changepoints_ = np.array([r.tau_hat for r in self.reports_], dtype=int)
        p = np.array([np.nan if r.p_value is None else r.p_value for r in self.reports_], dtype=float)
        tested = ~np.isnan(p)
        self.p_values_ = p
        self.adjusted_p_values_ = np.full(p.size, np.nan)
        self.significant_ = np.zeros(p.size, dtype=bool)
        if tested.any():
            self.adjusted_p_values_[tested] = holm_adjusted(p[tested])
            self.significant_[tested] = holm_bonferroni(p[tested], self.alpha)
        return self

    def transform(self, X=None):
        """Rows of ``(changepoint, p_value, adjusted_p_value, significant)`` for the fitted series."""
        check_is_fitted(self, "reports_")
        return np.column_stack([self.changepoints_, self.p_values_, self.adjusted_p_values_,
                                self.significant_.astype(float)])
