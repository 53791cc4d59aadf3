"""Glue between detection and testing: method names, engine choice and window handling."""
from __future__ import annotations

from dataclasses import dataclass

from .core import (
    DegenerateInputError,
    NumericalUnderflowError,
    PValueReport,
    TimeSeries,
    Window,
    derive_seed,
    phi_statistic,
    unconditional_p_value,
)
from .detect import CUSUM, DetectionResult, DetectorConfig, detect
from .exact import TAU_IN_MODEL, check_conditioning, exact_p_value
from .mc import AllRejectedError, IndicatorEvaluationError, SamplerConfig, mc_p_value
from .perturb import PhiPath
from .power import power_p_value, sample_w

METHODS = ("cusum-binseg", "cusum-wbs", "lr-binseg", "lr-wbs", "lr-pelt")
ENGINES = ("auto", "exact", "mc")
WHOLE = "whole"

# failures that make one p-value unavailable without invalidating the rest of a run
INFERENCE_ERRORS = (DegenerateInputError, NumericalUnderflowError, AllRejectedError,
                    IndicatorEvaluationError, FloatingPointError)


def parse_method(method: str) -> tuple[str, str]:
    """``"lr-binseg"`` -> ``("lr", "binseg")``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    stat, algorithm = method.split("-")
    return stat, algorithm


def detector_config(method: str, *, threshold=None, n_changepoints=None, penalty=None,
                    n_intervals: int = 100, seed: int | None = 0) -> DetectorConfig:
    stat, algorithm = parse_method(method)
    return DetectorConfig(algorithm, stat, threshold=threshold, n_changepoints=n_changepoints,
                          penalty=penalty, n_intervals=n_intervals, seed=seed)


def resolve_engine(engine: str, config: DetectorConfig) -> str:
    """``auto`` means exact for CUSUM segmentation and Monte Carlo otherwise."""
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")
    exact_ok = config.stat == CUSUM and config.algorithm in ("binseg", "wbs")
    if engine == "auto":
        return "exact" if exact_ok else "mc"
    if engine == "exact" and not exact_ok:
        raise ValueError(f"the exact engine needs a CUSUM segmentation method, got {config.stat}-{config.algorithm}")
    return engine


def make_window(tau_hat: int, h, T: int) -> Window | None:
    """Window around ``tau_hat``, or None when it would be clipped by the series ends."""
    if h == WHOLE:
        return Window.whole(tau_hat, T)
    h = int(h)
    if tau_hat - h < 0 or tau_hat + h > T:
        return None
    return Window(tau_hat, h)


@dataclass(frozen=True)
class InferenceSettings:
    """How to turn a detected changepoint into a p-value."""

    h: int | str = 20
    conditioning: str = TAU_IN_MODEL
    engine: str = "auto"
    sampler: SamplerConfig = SamplerConfig()
    n_w: int = 1

    def __post_init__(self):
        check_conditioning(self.conditioning)
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; expected one of {ENGINES}")
        if self.n_w < 1:
            raise ValueError("n_w must be >= 1")
        if self.h != WHOLE and int(self.h) < 1:
            raise ValueError("h must be a positive integer or 'whole'")


def skipped_report(tau_hat: int, settings: InferenceSettings, reason: str) -> PValueReport:
    h = None if settings.h == WHOLE else int(settings.h)
    return PValueReport(tau_hat, None, None, None, None, "skipped", settings.conditioning, h=h, h_right=h,
                        skipped=reason)


def changepoint_p_value(series: TimeSeries, config: DetectorConfig, tau_hat: int, settings: InferenceSettings,
                        *, observed=None) -> PValueReport:
    """Post-selection p-value of one detected changepoint.

    A changepoint whose window does not fit inside the series gets a skipped
    report instead of an error. The unconditional p-value is added to the
    diagnostics for comparison.
    """
    window = make_window(tau_hat, settings.h, series.T)
    if window is None:
        return skipped_report(tau_hat, settings,
                              f"clipped window: tau_hat={tau_hat} needs h={settings.h} points on both sides of T={series.T}")
    config = config.with_intervals(series.T)
    engine = resolve_engine(settings.engine, config)
    path = PhiPath(series, window)
    if settings.n_w > 1:
        ws = sample_w(window.h, settings.n_w, derive_seed(settings.sampler.seed, 7), h_right=window.h_right)
        report = power_p_value(path, config, ws, conditioning=settings.conditioning, engine=engine,
                               sampler=settings.sampler)
    elif engine == "exact":
        report = exact_p_value(path, config, settings.conditioning, observed=observed)
    else:
        report = mc_p_value(path, config, settings.conditioning, settings.sampler, observed=observed)
    report.diagnostics["naive_p_value"] = unconditional_p_value(report.phi_obs, window.h, window.h_right)
    return report


def detect_and_test(series: TimeSeries, config: DetectorConfig, settings: InferenceSettings,
                    result: DetectionResult | None = None) -> tuple[DetectionResult, list[PValueReport]]:
    """Detect, then test every detected changepoint in detection order."""
    config = config.with_intervals(series.T)
    result = detect(series, config) if result is None else result
    reports = []
    for tau in result.order:
        try:
            reports.append(changepoint_p_value(series, config, tau, settings, observed=result.changepoints))
        except INFERENCE_ERRORS as exc:
            reports.append(skipped_report(tau, settings, f"{type(exc).__name__}: {exc}"))
    return result, reports


def naive_p_value(series: TimeSeries, tau_hat: int, h) -> float | None:
    window = make_window(tau_hat, h, series.T)
    if window is None:
        return None
    return unconditional_p_value(phi_statistic(series, window), window.h, window.h_right)
