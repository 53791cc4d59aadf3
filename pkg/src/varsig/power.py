"""P-values that average over the nuisance ratios W instead of conditioning on them.

Under the null the nested ratios are independent Beta(i/2, 1/2) variables and
independent of phi. For each resampled W the window is rebuilt, the selection
probability and its critical part are computed, and the p-value is the ratio
of the summed masses. The observed W is always the first sample.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PhiFrame, PValueReport, derive_seed, truncated_masses, two_sided_bounds
from .detect import DetectorConfig, detect_squares
from .exact import TAU_IN_MODEL, selection_set
from .mc import SamplerConfig, mc_masses
from .perturb import PhiPath, decompose_w, rebuild_series

OBSERVED = "observed"
SAMPLED = "sampled"


@dataclass(frozen=True)
class WSample:
    w_left: np.ndarray
    w_right: np.ndarray
    provenance: str = SAMPLED


def sample_w(h: int, n_w: int, seed=None, *, observed: WSample | None = None,
             h_right: int | None = None) -> list[WSample]:
    """The observed W followed by ``n_w - 1`` null draws ``W_i ~ Beta(i/2, 1/2)``.

    Without ``observed`` the first entry is a placeholder to be replaced by the
    caller; :func:`power_p_value` does this from the data.
    """
    if n_w < 1:
        raise ValueError("n_w must be >= 1")
    h_right = h if h_right is None else h_right
    rng = np.random.default_rng(seed)
    il = np.arange(1, h)
    ir = np.arange(1, h_right)
    if observed is None:
        observed = WSample(np.full(h - 1, np.nan), np.full(h_right - 1, np.nan), OBSERVED)
    out = [WSample(observed.w_left, observed.w_right, OBSERVED)]
    for _ in range(n_w - 1):
        wl = rng.beta(il / 2.0, 0.5) if il.size else np.zeros(0)
        wr = rng.beta(ir / 2.0, 0.5) if ir.size else np.zeros(0)
        out.append(WSample(wl, wr, SAMPLED))
    return out


def _engine_masses(path, config, conditioning, bounds, engine, sampler, observed):
    w = path.window
    if engine == "exact":
        sel = selection_set(path, config, conditioning, observed=observed)
        numer, denom = truncated_masses(sel.S, bounds[0], bounds[1], *w.beta_params)
        return numer, denom, sel.replays
    res = mc_masses(path, config, conditioning, sampler, observed=observed)
    return res.numer, res.denom, res.diagnostics["detector_runs"]


def power_p_value(
    path: PhiPath,
    config: DetectorConfig,
    w_samples: list[WSample],
    *,
    conditioning: str = TAU_IN_MODEL,
    engine: str = "exact",
    sampler: SamplerConfig | None = None,
    n_phi: int | None = None,
) -> PValueReport:
    """Weighted-average p-value over W samples; the first sample must be the observed W.

    With the ``mc`` engine each W sample gets its own GP fit with ``n_phi``
    design points (default ``sampler.N`` for a single sample, ``sampler.N // 2``
    otherwise) and its own derived seed.
    """
    if engine not in ("exact", "mc"):
        raise ValueError(f"unknown engine {engine!r}")
    if not w_samples or w_samples[0].provenance != OBSERVED:
        raise ValueError("the first W sample must be the observed one")
    win = path.window
    bounds = two_sided_bounds(path.phi_obs, win.h, win.h_right)
    frame = decompose_w(path.base, win)
    observed = None
    if conditioning != TAU_IN_MODEL:
        # every W sample is judged against the model found on the actual data
        observed = detect_squares(path.base_squares, config.with_intervals(path.base.T)).changepoints
    sampler = sampler or SamplerConfig()
    if engine == "mc":
        n_phi = n_phi or (sampler.N if len(w_samples) == 1 else max(2, sampler.N // 2))
    numers, denoms, runs = [], [], 0
    for j, ws in enumerate(w_samples):
        if j == 0:
            pj = path
        else:
            fj = PhiFrame(frame.phi_obs, frame.c0_sq, ws.w_left, ws.w_right, win)
            pj = path.with_base(rebuild_series(path.base, fj))
        sj = sampler
        if engine == "mc":
            seed = sampler.seed if j == 0 else derive_seed(sampler.seed, 1000 + j)
            sj = SamplerConfig(n_phi, sampler.N_tilde, sampler.l, sampler.mode, seed, sampler.early_stop)
        nj, dj, rj = _engine_masses(pj, config, conditioning, bounds, engine, sj, observed)
        numers.append(nj)
        denoms.append(dj)
        runs += rj
    numer = sum(numers)
    denom = sum(denoms)
    return PValueReport(
        tau_hat=win.tau_hat,
        p_value=float(numer / denom),
        phi_obs=path.phi_obs,
        phi_lower=bounds[0],
        phi_upper=bounds[1],
        method="exact-cusum" if engine == "exact" else ("mc-gp" if sampler.mode == "gp-direct" else "mc-gp-is"),
        conditioning=conditioning,
        h=win.h,
        h_right=win.h_right,
        diagnostics={
            "n_w": len(w_samples),
            "per_sample_numerator": numers,
            "per_sample_denominator": denoms,
            "detector_runs": runs,
        },
    )
