"""Change-in-variance statistics and segmentation drivers.

All drivers operate on squared centered data ``y = (x - mu)**2``: both the
CUSUM-of-squares and the likelihood-ratio statistic see the data only through
``y``, and the post-selection machinery perturbs ``y`` linearly in ``phi``.

Internally segments are half-open 0-based ``[s0, e0)``; a split ``tau`` is an
absolute left count, so the pieces are ``[s0, tau)`` and ``[tau, e0)``. Public
records use 1-based inclusive ``(s, e) = (s0 + 1, e0)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import DegenerateSegmentError, TimeSeries

CUSUM = "cusum"
LR = "lr"
STATS = (CUSUM, LR)
ALGORITHMS = ("binseg", "wbs", "pelt")


# ---------------------------------------------------------------------------
# statistics


def _prefix(y: np.ndarray) -> np.ndarray:
    out = np.empty(y.size + 1)
    out[0] = 0.0
    np.cumsum(y, out=out[1:])
    return out


def cusum_curve(prefix: np.ndarray, s0: int, e0: int, min_len: int = 1):
    """CUSUM values on ``[s0, e0)`` for every admissible split.

    Returns ``(taus, G)``. ``G`` is linear in the data, so calling this on the
    prefix sums of two coefficient vectors gives the intercept and slope of
    the statistic along a linear data path.
    """
    taus = np.arange(s0 + min_len, e0 - min_len + 1)
    n = e0 - s0
    n1 = taus - s0
    n2 = e0 - taus
    left = prefix[taus] - prefix[s0]
    right = prefix[e0] - prefix[taus]
    g = np.sqrt(n1 * n2 / n) * (left / n1 - right / n2)
    return taus, g


def _lr_offset(n, n1):
    # turns sums of squares into per-segment variance estimates: n log n - n1 log n1 - n2 log n2
    n2 = n - n1
    return n * np.log(n) - n1 * np.log(n1) - n2 * np.log(n2)


def lr_curve(prefix: np.ndarray, s0: int, e0: int, min_len: int = 2, normalized: bool = True):
    """Likelihood-ratio values on ``[s0, e0)`` for every admissible split."""
    taus = np.arange(s0 + min_len, e0 - min_len + 1)
    total = prefix[e0] - prefix[s0]
    left = prefix[taus] - prefix[s0]
    right = total - left
    if taus.size and (total <= 0.0 or np.any(left <= 0.0) or np.any(right <= 0.0)):
        raise DegenerateSegmentError(f"zero partial sum of squares inside segment ({s0 + 1}, {e0})")
    n = e0 - s0
    lam = n * math.log(total) - (taus - s0) * np.log(left) - (e0 - taus) * np.log(right)
    if normalized and taus.size:
        lam = lam - _lr_offset(n, taus - s0)
    return taus, lam


def cusum_stat(y: Sequence[float], s: int, e: int, t: int) -> float:
    """CUSUM statistic G_{s,e}(t) on ``y`` with 1-based inclusive indices."""
    y = np.asarray(y, dtype=float)
    if not 1 <= s <= t < e <= y.size:
        raise ValueError(f"need 1 <= s <= t < e <= {y.size}, got s={s}, t={t}, e={e}")
    n1, n2 = t - s + 1, e - t
    scale = math.sqrt(n1 * n2 / (e - s + 1))
    return scale * (float(np.mean(y[s - 1:t])) - float(np.mean(y[t:e])))


def lr_stat(x: TimeSeries, s: int, e: int, tau: int, normalized: bool = True) -> float:
    """Likelihood-ratio statistic for a variance change at ``tau`` within ``(s, e)``.

    With ``n = e-s+1``, ``n1 = tau-s+1``, ``n2 = e-tau`` and ``C`` the sum of
    squared centered values, the Gaussian log-likelihood ratio is
    ``n log(C_{s:e}/n) - n1 log(C_{s:tau}/n1) - n2 log(C_{tau+1:e}/n2)``.
    ``normalized=False`` drops the segment lengths inside the logarithms,
    which favours splits near the middle of the segment.
    """
    y = x.squares()
    if not 1 <= s <= tau < e <= y.size:
        raise ValueError(f"need 1 <= s <= tau < e <= {y.size}, got s={s}, tau={tau}, e={e}")
    left = float(np.sum(y[s - 1:tau]))
    right = float(np.sum(y[tau:e]))
    total = left + right
    if left <= 0.0 or right <= 0.0:
        raise DegenerateSegmentError(f"zero partial sum of squares for split {tau} of ({s}, {e})")
    lam = (e - s + 1) * math.log(total) - (tau - s + 1) * math.log(left) - (e - tau) * math.log(right)
    if normalized:
        lam -= float(_lr_offset(e - s + 1, tau - s + 1))
    return lam


@dataclass(frozen=True)
class SegmentStat:
    """A segment statistic with its scan and argmax rule.

    CUSUM is maximized in absolute value, LR as is. ``min_len`` is the
    smallest piece allowed on either side of a split.
    """

    kind: str = CUSUM
    min_len: int | None = None

    def __post_init__(self):
        if self.kind not in STATS:
            raise ValueError(f"unknown statistic {self.kind!r}; expected one of {STATS}")
        if self.min_len is None:
            object.__setattr__(self, "min_len", 1 if self.kind == CUSUM else 2)

    def curve(self, prefix, s0, e0):
        if self.kind == CUSUM:
            return cusum_curve(prefix, s0, e0, self.min_len)
        return lr_curve(prefix, s0, e0, self.min_len)

    def score(self, values):
        return np.abs(values) if self.kind == CUSUM else values

    def fits(self, s0, e0) -> bool:
        return e0 - s0 >= 2 * self.min_len

    def direction(self, prefix, s0, tau, e0, value) -> int:
        """+1 for an increase in variance at ``tau``, -1 for a decrease."""
        if self.kind == CUSUM:
            return 1 if value <= 0 else -1
        left = (prefix[tau] - prefix[s0]) / (tau - s0)
        right = (prefix[e0] - prefix[tau]) / (e0 - tau)
        return 1 if right >= left else -1


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class Step:
    """One segment examination: where the statistic was maximized and whether it was kept."""

    segment: tuple[int, int]
    tau: int | None
    value: float | None
    direction: int
    accepted: bool
    interval: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        return {
            "segment": list(self.segment),
            "interval": None if self.interval is None else list(self.interval),
            "tau": self.tau,
            "value": self.value,
            "direction": self.direction,
            "accepted": self.accepted,
        }


@dataclass(frozen=True)
class Decision:
    """Comparison made by a driver: candidate intervals (0-based half-open) and the winner.

    ``chosen`` is ``(s0, e0, tau)`` or ``None`` when every candidate fell
    below ``threshold``. Fixed-count decisions carry ``threshold=None``.
    """

    candidates: tuple[tuple[int, int], ...]
    chosen: tuple[int, int, int] | None
    threshold: float | None


@dataclass(frozen=True)
class DetectionResult:
    changepoints: tuple[int, ...]
    steps: tuple[Step, ...]
    algorithm: str
    stat: str
    threshold: float | None = None
    n_changepoints: int | None = None
    penalty: float | None = None
    intervals: tuple[tuple[int, int], ...] | None = None
    seed: int | None = None
    stopped_early: bool = False
    decisions: tuple[Decision, ...] = field(default=(), repr=False, compare=False)

    @property
    def order(self) -> tuple[int, ...]:
        """Changepoints in the order they were accepted."""
        return tuple(s.tau for s in self.steps if s.accepted)

    def to_dict(self) -> dict:
        return {
            "changepoints": [int(c) for c in self.changepoints],
            "algorithm": self.algorithm,
            "stat": self.stat,
            "threshold": self.threshold,
            "n_changepoints": self.n_changepoints,
            "penalty": self.penalty,
            "seed": self.seed,
            "intervals": None if self.intervals is None else [list(iv) for iv in self.intervals],
            "steps": [s.to_dict() for s in self.steps],
        }


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DetectorConfig:
    """Everything needed to replay a detector identically on perturbed data.

    Exactly one stopping rule applies: ``threshold`` or ``n_changepoints`` for
    the segmentation drivers, ``penalty`` for PELT. WBS intervals are drawn
    once by :meth:`with_intervals` and then reused verbatim.
    """

    algorithm: str = "binseg"
    stat: str = CUSUM
    threshold: float | None = None
    n_changepoints: int | None = None
    penalty: float | None = None
    n_intervals: int = 100
    seed: int | None = 0
    intervals: tuple[tuple[int, int], ...] | None = None
    min_len: int | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.stat not in STATS:
            raise ValueError(f"unknown statistic {self.stat!r}; expected one of {STATS}")
        if self.algorithm == "pelt":
            if self.stat != LR:
                raise ValueError("PELT is only defined for the likelihood (lr) cost")
            if self.penalty is None or not self.penalty > 0:
                raise ValueError("PELT needs a positive penalty")
            if self.threshold is not None or self.n_changepoints is not None:
                raise ValueError("PELT takes a penalty, not a threshold or changepoint count")
        else:
            if (self.threshold is None) == (self.n_changepoints is None):
                raise ValueError("give exactly one of threshold or n_changepoints")
            if self.penalty is not None:
                raise ValueError("penalty only applies to PELT")
            if self.n_changepoints is not None and self.n_changepoints < 0:
                raise ValueError("n_changepoints must be non-negative")
        if self.algorithm == "wbs" and self.n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")

    @property
    def segment_stat(self) -> SegmentStat:
        return SegmentStat(self.stat, self.min_len)

    def with_intervals(self, T: int) -> "DetectorConfig":
        """Fix the WBS random intervals for a series of length ``T``."""
        if self.algorithm != "wbs" or self.intervals is not None:
            return self
        return replace(self, intervals=draw_intervals(T, self.n_intervals, self.seed))


def draw_intervals(T: int, n_intervals: int, seed: int | None, min_len: int = 4):
    """Uniform draw of 1-based inclusive intervals ``(s, e)`` with ``e - s + 1 >= min_len``."""
    if T < min_len:
        return ()
    rng = np.random.default_rng(seed)
    out: list[tuple[int, int]] = []
    while len(out) < n_intervals:
        u, v = rng.integers(1, T + 1, size=2)
        s, e = (int(u), int(v)) if u <= v else (int(v), int(u))
        if e - s + 1 >= min_len:
            out.append((s, e))
    return tuple(out)


# ---------------------------------------------------------------------------
# drivers

StopRule = Callable[[int], bool]


class _Scanner:
    """Best split per candidate interval, with an optional cache for intervals whose data never moves."""

    def __init__(self, prefix, stat: SegmentStat, cache=None, frozen=None, keep_curves=False):
        self.prefix = prefix
        self.stat = stat
        self.cache = cache
        self.frozen = frozen
        self.keep_curves = keep_curves

    def best(self, s0, e0):
        """Return ``(score, tau, value)`` for the interval or ``None`` if it is too short."""
        if not self.stat.fits(s0, e0):
            return None
        cacheable = self.cache is not None and self.frozen is not None and (
            e0 <= self.frozen[0] or s0 >= self.frozen[1]
        )
        if cacheable and (s0, e0) in self.cache:
            return self.cache[(s0, e0)]
        taus, vals = self.stat.curve(self.prefix, s0, e0)
        score = self.stat.score(vals)
        i = int(np.argmax(score))
        out = (float(score[i]), int(taus[i]), float(vals[i]))
        if cacheable:
            self.cache[(s0, e0)] = out
        return out


def _candidates(seg, intervals, stat):
    s0, e0 = seg
    out = [seg]
    if intervals is not None:
        seen = {seg}
        for s, e in intervals:
            iv = (s - 1, e)
            if s0 <= iv[0] and iv[1] <= e0 and iv not in seen:
                seen.add(iv)
                out.append(iv)
    return [iv for iv in out if stat.fits(*iv)]


def _best_of(scanner, cands):
    best = None
    best_iv = None
    for iv in cands:
        r = scanner.best(*iv)
        if r is None:
            continue
        # ties: smallest tau, then earliest candidate
        if best is None or r[0] > best[0] or (r[0] == best[0] and r[1] < best[1]):
            best, best_iv = r, iv
    return best, best_iv


def _segmentation(y, config: DetectorConfig, stop=None, cache=None, frozen=None, trace=False):
    stat = config.segment_stat
    prefix = _prefix(y)
    scanner = _Scanner(prefix, stat, cache=cache, frozen=frozen)
    intervals = config.intervals if config.algorithm == "wbs" else None
    if config.algorithm == "wbs" and intervals is None:
        intervals = draw_intervals(y.size, config.n_intervals, config.seed)
    T = y.size
    steps: list[Step] = []
    decisions: list[Decision] = []
    found: list[int] = []
    stopped = False

    def record(seg, iv, best, accepted):
        s0, e0 = seg
        if best is None:
            steps.append(Step((s0 + 1, e0), None, None, 0, False))
            return
        _, tau, val = best
        d = stat.direction(prefix, iv[0], tau, iv[1], val)
        steps.append(Step((s0 + 1, e0), tau, val, d, accepted, (iv[0] + 1, iv[1])))

    if config.threshold is not None:
        lam = float(config.threshold)
        stack = [(0, T)]
        while stack:
            seg = stack.pop()
            cands = _candidates(seg, intervals, stat)
            if not cands:
                continue
            best, iv = _best_of(scanner, cands)
            accepted = best[0] >= lam
            record(seg, iv, best, accepted)
            if trace:
                decisions.append(Decision(tuple(cands), (iv[0], iv[1], best[1]) if accepted else None, lam))
            if accepted:
                tau = best[1]
                found.append(tau)
                if stop is not None and stop(tau):
                    stopped = True
                    break
                # right pushed first so the left child is examined next
                stack.append((tau, seg[1]))
                stack.append((seg[0], tau))
    else:
        active = [(0, T)]
        seg_best: dict = {}
        while len(found) < config.n_changepoints:
            all_cands = []
            best = best_iv = best_seg = None
            for seg in active:
                cands = _candidates(seg, intervals, stat)
                if not cands:
                    continue
                all_cands.extend(cands)
                if seg not in seg_best:
                    seg_best[seg] = _best_of(scanner, cands)
                r, iv = seg_best[seg]
                if best is None or r[0] > best[0] or (r[0] == best[0] and r[1] < best[1]):
                    best, best_iv, best_seg = r, iv, seg
            if best is None:
                break
            record(best_seg, best_iv, best, True)
            tau = best[1]
            if trace:
                decisions.append(Decision(tuple(all_cands), (best_iv[0], best_iv[1], tau), None))
            found.append(tau)
            i = active.index(best_seg)
            active[i:i + 1] = [(best_seg[0], tau), (tau, best_seg[1])]
            if stop is not None and stop(tau):
                stopped = True
                break

    return DetectionResult(
        changepoints=tuple(sorted(found)),
        steps=tuple(steps),
        algorithm=config.algorithm,
        stat=config.stat,
        threshold=config.threshold,
        n_changepoints=config.n_changepoints,
        intervals=tuple(intervals) if intervals is not None else None,
        seed=config.seed,
        stopped_early=stopped,
        decisions=tuple(decisions),
    )


def _segment_cost(prefix, r, t):
    n = t - r
    total = prefix[t] - prefix[r]
    if np.any(total <= 0):
        raise DegenerateSegmentError("zero sum of squares in a candidate PELT segment")
    return n * np.log(total / n)


def pelt_squares(y, penalty: float, min_len: int = 2) -> tuple[int, ...]:
    """Exact penalized-likelihood segmentation of squared data with pruning.

    Minimizes ``sum_segments n log(C/n) + penalty * (#segments)``. A candidate
    last changepoint ``r`` is pruned at time ``t`` once it can no longer win;
    with a minimum segment length the pruning only takes effect ``min_len``
    steps later, which keeps the result identical to unpruned DP.
    """
    T = y.size
    if not math.isfinite(penalty) or T < 2 * min_len:
        return ()
    prefix = _prefix(y)
    F = np.full(T + 1, np.inf)
    F[0] = -penalty
    last = np.zeros(T + 1, dtype=int)
    cands = np.array([0])
    expiry = np.array([T + 1])  # time from which each candidate is pruned
    for t in range(min_len, T + 1):
        usable = (t - cands >= min_len) & (expiry > t)
        r = cands[usable]
        if r.size:
            vals = F[r] + _segment_cost(prefix, r, t) + penalty
            i = int(np.argmin(vals))
            F[t] = vals[i]
            last[t] = r[i]
            prune = vals - penalty > F[t]
            ex = expiry[usable]
            ex[prune] = np.minimum(ex[prune], t + min_len)
            expiry[usable] = ex
        keep = expiry > t
        cands, expiry = cands[keep], expiry[keep]
        if t + min_len <= T and F[t] < np.inf:
            cands = np.append(cands, t)
            expiry = np.append(expiry, T + 1)
    cps = []
    t = T
    while t > 0:
        t = int(last[t])
        if t > 0:
            cps.append(t)
    return tuple(sorted(cps))


def optimal_partition_squares(y, penalty: float, min_len: int = 2) -> tuple[int, ...]:
    """Unpruned O(T^2) dynamic program for the same objective as :func:`pelt_squares`."""
    T = y.size
    if not math.isfinite(penalty) or T < 2 * min_len:
        return ()
    prefix = _prefix(y)
    F = np.full(T + 1, np.inf)
    F[0] = -penalty
    last = np.zeros(T + 1, dtype=int)
    for t in range(min_len, T + 1):
        best, arg = np.inf, 0
        for r in range(0, t - min_len + 1):
            if not np.isfinite(F[r]):
                continue
            v = F[r] + _segment_cost(prefix, r, t) + penalty
            if v < best:
                best, arg = v, r
        F[t], last[t] = best, arg
    cps = []
    t = T
    while t > 0:
        t = int(last[t])
        if t > 0:
            cps.append(t)
    return tuple(sorted(cps))


def detect_squares(
    y,
    config: DetectorConfig,
    *,
    stop: StopRule | None = None,
    cache: dict | None = None,
    frozen: tuple[int, int] | None = None,
    trace: bool = False,
) -> DetectionResult:
    """Run a detector on squared centered data.

    ``stop`` is called with each newly accepted changepoint and ends the run
    early when it returns True. ``cache`` with ``frozen=(start, stop)`` reuses
    best splits of intervals that do not overlap ``[start, stop)``.
    """
    y = np.asarray(y, dtype=float)
    if config.algorithm == "pelt":
        cps = pelt_squares(y, config.penalty, config.segment_stat.min_len)
        return DetectionResult(
            changepoints=cps,
            steps=tuple(Step((1, y.size), c, None, 0, True) for c in cps),
            algorithm="pelt",
            stat=config.stat,
            penalty=config.penalty,
            seed=config.seed,
        )
    return _segmentation(y, config, stop=stop, cache=cache, frozen=frozen, trace=trace)


def detect(series: TimeSeries, config: DetectorConfig, **kwargs) -> DetectionResult:
    return detect_squares(series.squares(), config.with_intervals(series.T), **kwargs)


def binary_segmentation(series: TimeSeries, stat: SegmentStat | str = CUSUM, *, threshold=None, n_changepoints=None):
    stat = stat if isinstance(stat, SegmentStat) else SegmentStat(stat)
    cfg = DetectorConfig("binseg", stat.kind, threshold=threshold, n_changepoints=n_changepoints, min_len=stat.min_len)
    return detect(series, cfg)


def wild_binary_segmentation(
    series: TimeSeries,
    stat: SegmentStat | str = CUSUM,
    *,
    threshold=None,
    n_changepoints=None,
    n_intervals: int = 100,
    seed: int | None = 0,
    intervals=None,
):
    stat = stat if isinstance(stat, SegmentStat) else SegmentStat(stat)
    cfg = DetectorConfig(
        "wbs", stat.kind, threshold=threshold, n_changepoints=n_changepoints,
        n_intervals=n_intervals, seed=seed,
        intervals=None if intervals is None else tuple(tuple(iv) for iv in intervals),
        min_len=stat.min_len,
    )
    return detect(series, cfg)


def pelt(series: TimeSeries, penalty: float, min_len: int = 2) -> DetectionResult:
    if not penalty > 0:
        raise ValueError("penalty must be positive")
    if math.isinf(penalty):
        return DetectionResult((), (), "pelt", LR, penalty=penalty)
    return detect(series, DetectorConfig("pelt", LR, penalty=penalty, min_len=min_len))
