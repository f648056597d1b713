"""Descriptive statistics and t-based confidence intervals.

Quartile convention: for sorted samples ``x[0..n-1]`` the p-quantile is
found at position ``h = (n - 1) * p`` and linearly interpolated between
``x[floor(h)]`` and ``x[floor(h) + 1]``.  This is the same rule as
numpy's default ("linear") and R's type 7.

CV is a fraction (stddev / mean); reports render it as a percentage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

log = logging.getLogger(__name__)


class StatsError(ValueError):
    pass


class EmptySample(StatsError):
    pass


class DomainError(StatsError):
    pass


class InsufficientRuns(StatsError):
    pass


@dataclass(frozen=True)
class SummaryStats:
    n: int
    mean: float
    stddev: float
    median: float
    q1: float
    q3: float
    iqr: float
    cv: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def quantile_sorted(xs: Sequence[float], p: float) -> float:
    """p-quantile of already-sorted ``xs`` using the (n-1)p linear rule."""
    if not xs:
        raise EmptySample("quantile of an empty sample")
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"p must lie in [0, 1], got {p}")
    h = (len(xs) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def _mean_sd(xs: Sequence[float]) -> tuple[float, float]:
    n = len(xs)
    mean = math.fsum(xs) / n
    if n < 2:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / (n - 1))


def summarize(samples: Sequence[float], confidence: float = 0.95) -> SummaryStats:
    """Summary of ``samples``; the CI is mean ± t·s/√n and is ``None``
    when n < 2 (no spread estimate)."""
    xs = sorted(float(x) for x in samples)
    n = len(xs)
    if n == 0:
        raise EmptySample("cannot summarize an empty sample")
    mean, sd = _mean_sd(xs)
    q1, med, q3 = (quantile_sorted(xs, p) for p in (0.25, 0.5, 0.75))
    if n >= 2:
        half = t_quantile((1 + confidence) / 2, n - 1) * sd / math.sqrt(n)
        ci_low, ci_high = mean - half, mean + half
    else:
        log.warning("confidence interval undefined for a single sample")
        ci_low = ci_high = None
    cv = sd / mean if mean != 0 else None
    return SummaryStats(n, mean, sd, med, q1, q3, q3 - q1, cv, ci_low, ci_high)


# --- Student's t -------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _upper_tail(t: float, df: float) -> float:
    """P(T > t) for t >= 0."""
    return 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    tail = _upper_tail(abs(t), df)
    return 1.0 - tail if t > 0 else tail


def t_quantile(p: float, df: int, tol: float = 1e-8) -> float:
    """Inverse CDF of Student's t, bisecting the upper-tail probability."""
    if not (0.0 < p < 1.0) or math.isnan(p):
        raise DomainError(f"p must lie strictly between 0 and 1, got {p}")
    if df < 1 or int(df) != df:
        raise DomainError(f"df must be a positive integer, got {df}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, df, tol)
    # bisect on the upper tail, which keeps precision far out in the tail
    q = 1.0 - p
    lo, hi = 0.0, 1.0
    while _upper_tail(hi, df) > q:
        lo, hi = hi, hi * 2.0
        if hi > 1e300:
            raise DomainError(f"quantile for p={p} is out of range")
    while hi - lo > tol / 4:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if _upper_tail(mid, df) > q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def ci_over_run_medians(per_run_medians: Sequence[float], confidence: float = 0.95) -> tuple[float, float]:
    """Student-t interval for the mean of per-repetition medians."""
    r = len(per_run_medians)
    if r < 2:
        raise InsufficientRuns(f"need at least 2 runs for a confidence interval, got {r}")
    if not 0.0 < confidence < 1.0:
        raise DomainError(f"confidence must lie in (0, 1), got {confidence}")
    mean, sd = _mean_sd([float(m) for m in per_run_medians])
    half = t_quantile((1 + confidence) / 2, r - 1) * sd / math.sqrt(r)
    return mean - half, mean + half
