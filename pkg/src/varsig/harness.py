"""Simulation scenarios: data generation, replicate drivers and calibration summaries.

A scenario is a flat ``key = value`` file. Every replicate draws its data from
``SeedSequence([seed, replicate_index])`` so any replicate can be regenerated
on its own, and results do not depend on the number of worker processes.
"""
from __future__ import annotations

import configparser
import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .core import TimeSeries, ks_uniform
from .detect import DetectorConfig, detect
from .exact import CONDITIONINGS, TAU_IN_MODEL
from .inference import (
    ENGINES,
    INFERENCE_ERRORS,
    METHODS,
    WHOLE,
    InferenceSettings,
    changepoint_p_value,
    detector_config,
    make_window,
)
from .mc import MODES, SamplerConfig

log = logging.getLogger(__name__)

TASKS = ("qq", "accuracy")
AUTO = "auto"
_PILOT_STREAM = 1_000_003


class ScenarioError(ValueError):
    """Invalid scenario; ``problems`` lists one message per offending field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Scenario:
    """A simulation design.

    Changepoints are either fixed (``changepoints``) or drawn per replicate
    (``n_random_changepoints``) uniformly subject to a minimum gap, which also
    applies to the distance from either end of the series. The gap defaults to
    the largest integer ``h``.

    ``methods``, ``h``, ``N`` and ``n_w`` may hold several values; QQ runs
    sweep their product.
    """

    name: str = "scenario"
    T: int = 200
    changepoints: tuple[int, ...] = ()
    n_random_changepoints: int = 0
    min_gap: int | None = None
    segment_variances: tuple[float, ...] = (1.0,)
    mu: float = 0.0
    methods: tuple[str, ...] = ("cusum-binseg",)
    threshold: float | str | None = AUTO
    n_changepoints: int | None = None
    penalty: float | None = None
    n_intervals: int = 100
    h: tuple = (20,)
    conditioning: str = TAU_IN_MODEL
    engine: str = "auto"
    N: tuple[int, ...] = (100,)
    l: float = 100.0
    mode: str = "gp-direct"
    N_tilde: int = 100
    n_w: tuple[int, ...] = (1,)
    test: str = "all"
    replicates: int = 500
    pilot: int = 200
    radius: int = 10
    seed: int = 0
    tasks: tuple[str, ...] = ("qq",)

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ScenarioError(problems)

    def problems(self) -> list[str]:
        out = []
        if self.T < 4:
            out.append("T: must be >= 4")
        k = len(self.changepoints) if self.changepoints else self.n_random_changepoints
        if self.changepoints and self.n_random_changepoints:
            out.append("changepoints: give fixed changepoints or n_random_changepoints, not both")
        if len(self.segment_variances) != k + 1:
            out.append(f"segment_variances: need {k + 1} values for {k} changepoints, got {len(self.segment_variances)}")
        if any(not v > 0 for v in self.segment_variances):
            out.append("segment_variances: must be positive")
        cps = list(self.changepoints)
        if cps and (cps != sorted(set(cps)) or cps[0] < 1 or cps[-1] > self.T - 1):
            out.append(f"changepoints: must be strictly increasing within 1..{self.T - 1}")
        if self.n_random_changepoints:
            gap = self.gap
            if (self.n_random_changepoints + 1) * gap > self.T:
                out.append(f"n_random_changepoints: {self.n_random_changepoints} changes with gap {gap} do not fit T={self.T}")
        for m in self.methods:
            if m not in METHODS:
                out.append(f"methods: unknown method {m!r}")
        if not self.methods:
            out.append("methods: at least one method is required")
        segmenting = [m for m in self.methods if m in METHODS and not m.endswith("pelt")]
        if segmenting and (self.threshold is None) == (self.n_changepoints is None):
            out.append("threshold/n_changepoints: give exactly one for binseg/wbs methods")
        if isinstance(self.threshold, str) and self.threshold != AUTO:
            out.append("threshold: must be a number or 'auto'")
        if any(m.endswith("pelt") for m in self.methods) and not (self.penalty and self.penalty > 0):
            out.append("penalty: lr-pelt needs a positive penalty")
        for h in self.h:
            if h != WHOLE and (not isinstance(h, (int, np.integer)) or h < 1):
                out.append(f"h: {h!r} is neither a positive integer nor 'whole'")
        if self.conditioning not in CONDITIONINGS:
            out.append(f"conditioning: expected one of {CONDITIONINGS}")
        if self.engine not in ENGINES:
            out.append(f"engine: expected one of {ENGINES}")
        if self.engine == "exact" and any(m.startswith("lr") for m in self.methods):
            out.append("engine: exact needs cusum methods")
        if self.mode not in MODES:
            out.append(f"mode: expected one of {MODES}")
        if any(n < 2 for n in self.N):
            out.append("N: must be >= 2")
        if not self.l > 0:
            out.append("l: must be positive")
        if any(n < 1 for n in self.n_w):
            out.append("n_w: must be >= 1")
        if self.test not in ("all", "first"):
            out.append("test: expected 'all' or 'first'")
        if self.replicates < 1:
            out.append("replicates: must be >= 1")
        if self.pilot < 2:
            out.append("pilot: must be >= 2")
        for t in self.tasks:
            if t not in TASKS:
                out.append(f"tasks: unknown task {t!r}")
        return out

    @property
    def gap(self) -> int:
        if self.min_gap is not None:
            return self.min_gap
        ints = [h for h in self.h if h != WHOLE]
        return max(ints) if ints else 1

    @property
    def n_true(self) -> int:
        return len(self.changepoints) or self.n_random_changepoints

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# scenario files

_TUPLE_FIELDS = {"changepoints": int, "segment_variances": float, "methods": str, "N": int,
                 "n_w": int, "tasks": str}
_SCALARS = {"name": str, "T": int, "n_random_changepoints": int, "min_gap": int, "mu": float,
            "n_changepoints": int, "penalty": float, "n_intervals": int, "conditioning": str,
            "engine": str, "l": float, "mode": str, "N_tilde": int, "test": str, "replicates": int,
            "pilot": int, "radius": int, "seed": int}


def _parse_h(tok: str):
    return WHOLE if tok == WHOLE else int(tok)


def scenario_from_mapping(raw: dict[str, str]) -> Scenario:
    """Build a scenario from string values, collecting every field error."""
    known = {f.name for f in fields(Scenario)}
    kwargs: dict = {}
    problems = []
    for key, text in raw.items():
        if key not in known:
            problems.append(f"{key}: unknown field")
            continue
        text = text.strip()
        try:
            if key in _TUPLE_FIELDS:
                conv = _TUPLE_FIELDS[key]
                kwargs[key] = tuple(conv(t.strip()) for t in text.split(",") if t.strip())
            elif key == "h":
                kwargs[key] = tuple(_parse_h(t.strip()) for t in text.split(",") if t.strip())
            elif key == "threshold":
                kwargs[key] = None if text in ("", "none") else (AUTO if text == AUTO else float(text))
            elif text in ("", "none") and key in ("min_gap", "n_changepoints", "penalty"):
                kwargs[key] = None
            else:
                kwargs[key] = _SCALARS[key](text)
        except ValueError as exc:
            problems.append(f"{key}: cannot parse {text!r} ({exc})")
    if "n_changepoints" in kwargs and kwargs["n_changepoints"] is not None and "threshold" not in kwargs:
        kwargs["threshold"] = None
    if problems:
        raise ScenarioError(problems)
    return Scenario(**kwargs)


def parse_scenario(text: str) -> Scenario:
    """Parse ``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str  # keys are case sensitive (T, N)
    try:
        parser.read_string("[scenario]\n" + text)
    except configparser.Error as exc:
        raise ScenarioError([f"syntax: {exc}"]) from exc
    return scenario_from_mapping(dict(parser["scenario"]))


def load_scenario(path) -> Scenario:
    """Read a scenario file, or a bundled scenario by name (``fig4a``, ``table1``, ...)."""
    p = Path(path)
    if not p.exists():
        bundled = resources.files("varsig") / "scenarios" / f"{path}.txt"
        if not bundled.is_file():
            raise FileNotFoundError(f"no scenario file or bundled scenario named {path!r}")
        return parse_scenario(bundled.read_text())
    return parse_scenario(p.read_text())


def bundled_scenarios() -> list[str]:
    root = resources.files("varsig") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".txt"))


def dump_scenario(scenario: Scenario) -> str:
    lines = []
    for f in fields(Scenario):
        v = getattr(scenario, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data generation


def random_changepoints(T: int, k: int, gap: int, rng) -> tuple[int, ...]:
    """``k`` changepoints uniform over configurations with all gaps (boundaries included) >= ``gap``.

    Uses the stars-and-bars bijection: removing ``gap - 1`` points after each
    change (and before the first) maps valid configurations one-to-one onto
    plain ``k``-subsets of a shorter range.
    """
    if k == 0:
        return ()
    slack = T - (k + 1) * gap  # free positions once the mandatory gaps are reserved
    if slack < 0:
        raise ValueError(f"{k} changepoints with gap {gap} do not fit T={T}")
    chosen = np.sort(rng.choice(slack + k, size=k, replace=False))
    return tuple(int(c) + gap + i * (gap - 1) for i, c in enumerate(chosen))


def replicate_truth(scenario: Scenario, replicate_index: int) -> tuple[int, ...]:
    return _draw(scenario, replicate_index)[0]


def _draw(scenario: Scenario, replicate_index: int):
    rng = np.random.default_rng([scenario.seed, replicate_index])
    if scenario.n_random_changepoints:
        cps = random_changepoints(scenario.T, scenario.n_random_changepoints, scenario.gap, rng)
    else:
        cps = tuple(scenario.changepoints)
    bounds = (0,) + cps + (scenario.T,)
    sd = np.concatenate([np.full(bounds[i + 1] - bounds[i], np.sqrt(v))
                         for i, v in enumerate(scenario.segment_variances)])
    x = scenario.mu + sd * rng.standard_normal(scenario.T)
    return cps, TimeSeries(x, scenario.mu)


def generate(scenario: Scenario, replicate_index: int) -> TimeSeries:
    """The replicate's series; identical for identical ``(scenario.seed, replicate_index)``."""
    return _draw(scenario, replicate_index)[1]


# ---------------------------------------------------------------------------
# threshold calibration


def root_score(series: TimeSeries, config: DetectorConfig) -> float:
    """Largest statistic over the first segmentation step (the whole series and its WBS intervals)."""
    probe = replace(config, threshold=np.inf, n_changepoints=None).with_intervals(series.T)
    step = detect(series, probe).steps[0]
    return float(abs(step.value)) if step.value is not None else 0.0


def calibrate_threshold(scenario: Scenario, method: str, *, n_pilot: int | None = None) -> float:
    """Median root score over no-change pilot series, so about half the null runs detect something."""
    n_pilot = scenario.pilot if n_pilot is None else n_pilot
    null = replace(scenario, changepoints=(), n_random_changepoints=0,
                   segment_variances=(scenario.segment_variances[0],), seed=scenario.seed)
    cfg = detector_config(method, threshold=np.inf, n_intervals=scenario.n_intervals, seed=scenario.seed)
    scores = [root_score(generate(null, _PILOT_STREAM + i), cfg) for i in range(n_pilot)]
    return float(np.median(scores))


def resolve_config(scenario: Scenario, method: str, thresholds: dict | None = None) -> DetectorConfig:
    if method.endswith("pelt"):
        return detector_config(method, penalty=scenario.penalty)
    if scenario.n_changepoints is not None:
        return detector_config(method, n_changepoints=scenario.n_changepoints,
                               n_intervals=scenario.n_intervals, seed=scenario.seed)
    lam = scenario.threshold
    if lam == AUTO:
        lam = (thresholds or {}).get(method)
        if lam is None:
            lam = calibrate_threshold(scenario, method)
    return detector_config(method, threshold=float(lam), n_intervals=scenario.n_intervals, seed=scenario.seed)


def calibrate_all(scenario: Scenario) -> dict[str, float]:
    if scenario.threshold != AUTO or scenario.n_changepoints is not None:
        return {}
    return {m: calibrate_threshold(scenario, m) for m in scenario.methods if not m.endswith("pelt")}


# ---------------------------------------------------------------------------
# replicate drivers


def _settings_grid(scenario: Scenario, method: str):
    for h in scenario.h:
        for N in scenario.N:
            for n_w in scenario.n_w:
                sampler = SamplerConfig(N=N, N_tilde=scenario.N_tilde, l=scenario.l, mode=scenario.mode, seed=0)
                yield (method, str(h), N, n_w), h, sampler, n_w


def _qq_replicate(args):
    scenario, configs, idx = args
    truth, series = _draw(scenario, idx)
    rows = []
    for method, config in configs.items():
        config = config.with_intervals(series.T)
        result = detect(series, config)
        taus = result.order[:1] if scenario.test == "first" else result.order
        for key, h, sampler, n_w in _settings_grid(scenario, method):
            sampler = replace(sampler, seed=[scenario.seed, idx, 17])
            settings = InferenceSettings(h, scenario.conditioning, scenario.engine, sampler, n_w)
            for tau in taus:
                row = {"key": key, "replicate": idx, "tau": tau, "p": None, "naive": None, "status": "ok"}
                if make_window(tau, h, series.T) is None:
                    row["status"] = "skipped"
                else:
                    try:
                        rep = changepoint_p_value(series, config, tau, settings, observed=result.changepoints)
                        row["p"] = rep.p_value
                        row["naive"] = rep.diagnostics["naive_p_value"]
                    except INFERENCE_ERRORS as exc:
                        row["status"] = f"failed: {type(exc).__name__}: {exc}"
                rows.append(row)
        rows.append({"key": (method,), "replicate": idx, "n_detected": len(result.changepoints),
                     "truth": list(truth), "status": "detection"})
    return rows


def _map(fn, jobs, workers: int):
    if workers is None or workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("VARSIG_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass
class QQGroup:
    method: str
    h: str
    N: int
    n_w: int
    p_values: np.ndarray
    naive_p_values: np.ndarray
    n_tested: int
    n_skipped: int
    n_failed: int

    @property
    def uniform_quantiles(self) -> np.ndarray:
        n = self.p_values.size
        return (np.arange(1, n + 1) - 0.5) / n

    def ks(self, naive: bool = False) -> tuple[float, float] | None:
        p = self.naive_p_values if naive else self.p_values
        return ks_uniform(p) if p.size else None

    def summary(self) -> dict:
        ks = self.ks()
        ks_naive = self.ks(naive=True)
        return {
            "method": self.method, "h": self.h, "N": self.N, "n_w": self.n_w,
            "n_p_values": int(self.p_values.size), "n_tested": self.n_tested,
            "n_skipped": self.n_skipped, "n_failed": self.n_failed,
            "ks_statistic": None if ks is None else ks[0], "ks_p_value": None if ks is None else ks[1],
            "naive_ks_statistic": None if ks_naive is None else ks_naive[0],
            "naive_ks_p_value": None if ks_naive is None else ks_naive[1],
            "share_p_below_0.05": float(np.mean(self.p_values <= 0.05)) if self.p_values.size else None,
        }


@dataclass
class QQResult:
    scenario: Scenario
    thresholds: dict
    groups: list[QQGroup]
    detections: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def group(self, method=None, h=None, N=None, n_w=None) -> QQGroup:
        for g in self.groups:
            if ((method is None or g.method == method) and (h is None or g.h == str(h))
                    and (N is None or g.N == N) and (n_w is None or g.n_w == n_w)):
                return g
        raise KeyError((method, h, N, n_w))

    def csv_rows(self):
        yield ["method", "h", "N", "n_w", "rank", "p_value", "uniform_quantile", "naive_p_value"]
        for g in self.groups:
            q = g.uniform_quantiles
            for i in range(g.p_values.size):
                yield [g.method, g.h, g.N, g.n_w, i + 1, repr(float(g.p_values[i])), repr(float(q[i])),
                       repr(float(g.naive_p_values[i]))]


def run_qq(scenario: Scenario, *, workers: int | None = None, thresholds: dict | None = None) -> QQResult:
    """Detect and test on every replicate; gather sorted p-values per (method, h, N, n_w).

    Inference failures are logged, excluded and counted.
    """
    workers = default_workers() if workers is None else workers
    thresholds = calibrate_all(scenario) if thresholds is None else thresholds
    configs = {m: resolve_config(scenario, m, thresholds) for m in scenario.methods}
    jobs = [(scenario, configs, i) for i in range(scenario.replicates)]
    rows = [r for chunk in _map(_qq_replicate, jobs, workers) for r in chunk]
    buckets: dict = {}
    detections: dict = {m: 0 for m in scenario.methods}
    failures = []
    for r in rows:
        if r["status"] == "detection":
            detections[r["key"][0]] += r["n_detected"]
            continue
        b = buckets.setdefault(r["key"], {"p": [], "naive": [], "skipped": 0, "failed": 0, "tested": 0})
        b["tested"] += 1
        if r["status"] == "ok":
            b["p"].append(r["p"])
            b["naive"].append(r["naive"])
        elif r["status"] == "skipped":
            b["skipped"] += 1
        else:
            b["failed"] += 1
            failures.append({"key": list(r["key"]), "replicate": r["replicate"], "tau": r["tau"], "error": r["status"]})
            log.warning("replicate %d tau=%d %s", r["replicate"], r["tau"], r["status"])
    groups = []
    for m in scenario.methods:
        for key, *_ in _settings_grid(scenario, m):
            b = buckets.get(key, {"p": [], "naive": [], "skipped": 0, "failed": 0, "tested": 0})
            groups.append(QQGroup(key[0], key[1], key[2], key[3], np.sort(np.array(b["p"], float)),
                                  np.sort(np.array(b["naive"], float)), b["tested"], b["skipped"], b["failed"]))
    return QQResult(scenario, thresholds, groups, detections, failures)


def hit_flags(estimated, truth, radius: int) -> list[bool]:
    """For each true changepoint, whether some estimate lies within ``radius`` of it."""
    est = np.asarray(estimated, dtype=int)
    return [bool(est.size and np.min(np.abs(est - t)) <= radius) for t in truth]


def _accuracy_replicate(args):
    scenario, configs, idx, radius = args
    truth, series = _draw(scenario, idx)
    return {m: hit_flags(detect(series, c).changepoints, truth, radius) for m, c in configs.items()}


@dataclass
class AccuracyResult:
    scenario: Scenario
    radius: int
    hit_rates: dict

    def csv_rows(self):
        k = self.scenario.n_true
        yield ["method"] + [f"change_{i + 1}" for i in range(k)]
        for m, rates in self.hit_rates.items():
            yield [m] + [repr(float(r)) for r in rates]


def run_detection_accuracy(scenario: Scenario, radius: int | None = None, *, workers: int | None = None,
                           thresholds: dict | None = None) -> AccuracyResult:
    """Share of replicates with an estimate within ``radius`` of each true changepoint.

    With random changepoints the i-th hit rate refers to the i-th change in
    time order.
    """
    if scenario.n_true == 0:
        raise ScenarioError(["changepoints: detection accuracy needs true changepoints"])
    radius = scenario.radius if radius is None else radius
    workers = default_workers() if workers is None else workers
    thresholds = calibrate_all(scenario) if thresholds is None else thresholds
    configs = {m: resolve_config(scenario, m, thresholds) for m in scenario.methods}
    jobs = [(scenario, configs, i, radius) for i in range(scenario.replicates)]
    per = _map(_accuracy_replicate, jobs, workers)
    rates = {m: tuple(float(x) for x in np.mean([r[m] for r in per], axis=0)) for m in scenario.methods}
    return AccuracyResult(scenario, radius, rates)


# ---------------------------------------------------------------------------
# multiple testing


def holm_bonferroni(p_values, alpha: float = 0.05) -> np.ndarray:
    """Holm's step-down decisions: reject the k-th smallest while ``p_(k) <= alpha / (m - k + 1)``."""
    p = np.asarray(p_values, dtype=float)
    m = p.size
    reject = np.zeros(m, dtype=bool)
    for k, i in enumerate(np.argsort(p, kind="stable")):
        if p[i] > alpha / (m - k):
            break
        reject[i] = True
    return reject


def holm_adjusted(p_values) -> np.ndarray:
    """Holm-adjusted p-values; ``adjusted <= alpha`` iff :func:`holm_bonferroni` rejects."""
    p = np.asarray(p_values, dtype=float)
    m = p.size
    order = np.argsort(p, kind="stable")
    adj = np.minimum(1.0, np.maximum.accumulate((m - np.arange(m)) * p[order]))
    out = np.empty(m)
    out[order] = adj
    return out


# ---------------------------------------------------------------------------
# artifacts


def _write_csv(path: Path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def run_scenario(scenario: Scenario, out_dir, *, workers: int | None = None) -> dict:
    """Run every task of ``scenario`` and write CSV files plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    thresholds = calibrate_all(scenario)
    manifest: dict = {
        "schema": 1,
        "scenario": scenario.to_dict(),
        "master_seed": scenario.seed,
        "replicate_seeds": f"SeedSequence([{scenario.seed}, i]) for i in 0..{scenario.replicates - 1}",
        "pilot_seeds": (f"SeedSequence([{scenario.seed}, {_PILOT_STREAM} + i]) for i in 0..{scenario.pilot - 1}"
                        if thresholds else None),
        "thresholds": thresholds,
        "outputs": {},
    }
    if "qq" in scenario.tasks:
        qq = run_qq(scenario, workers=workers, thresholds=thresholds)
        _write_csv(out / "qq.csv", qq.csv_rows())
        manifest["outputs"]["qq"] = {
            "file": "qq.csv",
            "groups": [g.summary() for g in qq.groups],
            "detections": qq.detections,
            "failures": qq.failures,
        }
    if "accuracy" in scenario.tasks:
        acc = run_detection_accuracy(scenario, workers=workers, thresholds=thresholds)
        _write_csv(out / "accuracy.csv", acc.csv_rows())
        manifest["outputs"]["accuracy"] = {"file": "accuracy.csv", "radius": acc.radius,
                                           "hit_rates": {m: list(r) for m, r in acc.hit_rates.items()}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
