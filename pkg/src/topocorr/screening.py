"""Normalization, outlier screening and diagnostic plot data."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .model import SampleStats, ValidationError
from .numerics import normal_quantile


def normalize_to_area_averages(records, include_reference_in_area_mean: bool = False):
    """Deviation of every non-reference record from its area mean.

    Groups are (measurand, area). Reference (CI) records only take part in
    the mean when ``include_reference_in_area_mean`` is set and are never
    returned.
    """
    groups = defaultdict(list)
    for r in records:
        groups[(r.measurand, r.area)].append(r)
    out = []
    for key, recs in groups.items():
        opt = [r for r in recs if not r.is_reference]
        pool = recs if include_reference_in_area_mean else opt
        if len(pool) < 2:
            raise ValidationError(f"area {key[1]} ({key[0].value}) has fewer than 2 values to average")
        m = math.fsum(r.value for r in pool) / len(pool)
        out.extend(replace(r, value=r.value - m) for r in opt)
    return out


@dataclass
class ChauvenetResult:
    """Outcome of iterated Chauvenet screening.

    ``iteration_limits`` are the limits applied in each pass; ``limits`` are
    recomputed on the finally kept values, which is what a diagnostic plot of
    the cleaned data displays.
    """

    kept: np.ndarray
    excluded: list
    iteration_limits: list
    limits: tuple
    iterations_run: int
    kept_mask: np.ndarray = field(repr=False, default=None)


def chauvenet_limits(values, n: int | None = None, ddof: int = 1):
    v = np.asarray(values, dtype=float)
    n = len(v) if n is None else n
    z = normal_quantile(1.0 - 1.0 / (4.0 * n))
    m, s = v.mean(), v.std(ddof=ddof)
    return m - z * s, m + z * s


def chauvenet(values, max_iterations: int | None = 2, ddof: int = 1) -> ChauvenetResult:
    """Remove values whose expected count under the fitted normal is below 1/2."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or len(v) < 4:
        raise ValidationError("Chauvenet criterion needs at least 4 values")
    keep = np.ones(len(v), dtype=bool)
    excluded, lims = [], []
    it = 0
    while max_iterations is None or it < max_iterations:
        if keep.sum() < 4:
            break
        lo, hi = chauvenet_limits(v[keep], ddof=ddof)
        lims.append((lo, hi))
        it += 1
        out = keep & ((v < lo) | (v > hi))
        if not out.any():
            break
        excluded.extend((float(x), it) for x in v[out])
        keep &= ~out
    final = chauvenet_limits(v[keep], ddof=ddof) if keep.sum() >= 2 else lims[-1]
    return ChauvenetResult(v[keep], excluded, lims, final, it, keep)


@dataclass
class MedianReplaceResult:
    values: np.ndarray
    replaced: list
    limits: tuple
    iteration_limits: list
    iterations_run: int


def chauvenet_replace_median(values, max_iterations: int | None = None, ddof: int = 1):
    """Replace out-of-limit values by the median of the values never flagged.

    Passes repeat on the cleaned series until nothing is flagged; the series
    length, and hence the criterion threshold, stays constant.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or len(v) < 4:
        raise ValidationError("Chauvenet criterion needs at least 4 values")
    cur = v.copy()
    flagged = np.zeros(len(v), dtype=bool)
    replaced, lims = [], []
    it = 0
    while max_iterations is None or it < max_iterations:
        lo, hi = chauvenet_limits(cur, ddof=ddof)
        lims.append((lo, hi))
        it += 1
        out = (cur < lo) | (cur > hi)
        if not out.any():
            break
        flagged |= out
        if flagged.all():
            raise ValidationError("every value flagged; median undefined")
        med = float(np.median(v[~flagged]))
        for i in np.flatnonzero(out):
            replaced.append((int(i), float(cur[i]), it))
        cur[flagged] = med
        if it > len(v):
            break
    return MedianReplaceResult(cur, replaced, lims[-1], lims, it)


@dataclass
class HistogramSpec:
    bin_count: int
    bin_edges: np.ndarray
    counts: np.ndarray
    comparable_normal: tuple

    def __post_init__(self):
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValidationError("bin edges must be strictly increasing")

    @property
    def width(self) -> float:
        return float(np.min(np.diff(self.bin_edges)))


def bin_count(values, rule="sturges") -> int:
    v = np.asarray(values, dtype=float)
    n = len(v)
    if isinstance(rule, (int, np.integer)):
        return int(rule)
    rule = rule.lower()
    if rule == "sturges":
        return int(math.ceil(1 + math.log2(n)))
    rng = float(v.max() - v.min())
    if rule == "fd":
        q75, q25 = np.percentile(v, [75, 25])
        h = 2 * (q75 - q25) / n ** (1 / 3)
    elif rule == "scott":
        h = 3.49 * v.std(ddof=1) / n ** (1 / 3)
    else:
        raise ValidationError(f"unknown bin rule {rule!r}")
    return max(1, int(math.ceil(rng / h))) if h > 0 else 1


def histogram(values, bin_rule="sturges") -> HistogramSpec:
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        raise ValidationError("histogram needs at least 2 values")
    m, s = float(v.mean()), float(v.std(ddof=1))
    if v.max() == v.min():
        warnings.warn("zero-variance data: single degenerate bin", stacklevel=2)
        edges = np.array([v[0] - 0.5, v[0] + 0.5])
        return HistogramSpec(1, edges, np.array([len(v)]), (m, s))
    k = bin_count(v, bin_rule)
    edges = np.linspace(v.min(), v.max(), k + 1)
    counts, _ = np.histogram(v, edges)
    return HistogramSpec(k, edges, counts, (m, s))


def npp_points(values):
    """(theoretical normal quantile, ordered value) pairs, plotting position (i-0.5)/n."""
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    if n < 3:
        raise ValidationError("normal probability plot needs at least 3 values")
    q = np.array([normal_quantile((i - 0.5) / n) for i in range(1, n + 1)])
    return np.column_stack([q, v])


def boxplot_stats(values) -> SampleStats:
    """Quartiles by linear interpolation; whiskers are the extrema."""
    v = np.asarray(values, dtype=float)
    if len(v) < 4:
        raise ValidationError("box statistics need at least 4 values")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return SampleStats(
        n=len(v), mean=float(v.mean()), sd=float(v.std(ddof=1)), median=float(med),
        q1=float(q1), q3=float(q3), iqr=float(q3 - q1), min=float(v.min()), max=float(v.max()),
    )
