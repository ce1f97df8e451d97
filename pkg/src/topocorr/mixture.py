"""Kernel density envelope and decomposition into normal kernels by chi-square minimization.

The mixture is fitted to a histogram: for bin ``b`` with observed count
``O_b`` the expected count is ``E_b = n * (F(e_{b+1}) - F(e_b))`` where ``F`` is
the mixture CDF. The outermost edges are taken as -inf and +inf so the
expected counts sum to ``n``. Bins whose expected count under the comparable
normal is below one are pooled with a neighbour before the search starts;
the layout is then held fixed so the optimizer cannot change the number of
cells it is scored on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .model import Kernel, MixtureModel, ValidationError
from .screening import HistogramSpec, histogram as make_histogram

UNIDENTIFIED = "unidentified"


class MixtureFitError(RuntimeError):
    """Optimizer did not converge; ``best`` holds the best model found."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class KernelDistribution:
    eval_grid: np.ndarray
    density: np.ndarray
    bandwidth: float


def _bandwidth(v, rule):
    n = len(v)
    sd = float(v.std(ddof=1))
    if isinstance(rule, (int, float)) and not isinstance(rule, bool):
        return float(rule)
    rule = rule.lower()
    if rule == "silverman":
        iqr = float(np.subtract(*np.percentile(v, [75, 25])))
        spread = min(sd, iqr / 1.349) if iqr > 0 else sd
        return 0.9 * spread * n ** (-0.2)
    if rule == "scott":
        return 1.06 * sd * n ** (-0.2)
    raise ValidationError(f"unknown bandwidth rule {rule!r}")


def kernel_distribution(values, bandwidth_rule="silverman", grid_points: int = 512) -> KernelDistribution:
    """Gaussian KDE on a grid over [min - 3h, max + 3h], renormalized on the grid."""
    v = np.asarray(values, dtype=float)
    if len(v) < 5:
        raise ValidationError("kernel distribution needs at least 5 values")
    if v.max() == v.min():
        raise ValidationError("zero-variance data")
    h = _bandwidth(v, bandwidth_rule)
    if not h > 0:
        raise ValidationError("bandwidth must be positive")
    grid = np.linspace(v.min() - 3 * h, v.max() + 3 * h, grid_points)
    z = (grid[:, None] - v[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (len(v) * h * math.sqrt(2 * math.pi))
    # the tails beyond 3h hold ~0.3 % of the mass; put it back
    dens /= np.trapezoid(dens, grid)
    return KernelDistribution(grid, dens, h)


def mixture_cdf(model_or_kernels, x) -> np.ndarray:
    ks = model_or_kernels.kernels if isinstance(model_or_kernels, MixtureModel) else model_or_kernels
    x = np.asarray(x, dtype=float)
    return sum(k.weight * special.ndtr((x - k.mean) / k.sd) for k in ks)


def mixture_pdf(model_or_kernels, x) -> np.ndarray:
    ks = model_or_kernels.kernels if isinstance(model_or_kernels, MixtureModel) else model_or_kernels
    x = np.asarray(x, dtype=float)
    return sum(k.weight * np.exp(-0.5 * ((x - k.mean) / k.sd) ** 2) / (k.sd * math.sqrt(2 * math.pi)) for k in ks)


def open_edges(edges) -> np.ndarray:
    e = np.array(edges, dtype=float)
    e[0], e[-1] = -np.inf, np.inf
    return e


def expected_counts(model_or_kernels, edges, n) -> np.ndarray:
    """E_b on the histogram bins with open outer edges."""
    return n * np.diff(mixture_cdf(model_or_kernels, open_edges(edges)))


def pool_layout(expected, min_expected: float = 1.0) -> list:
    """Groups of adjacent bin indices so every group expects >= ``min_expected``.

    The smallest cell is merged into its smaller neighbour until none is left.
    """
    groups = [[i] for i in range(len(expected))]
    e = [float(x) for x in expected]
    while len(e) > 1 and min(e) < min_expected:
        i = int(np.argmin(e))
        if i == 0:
            j = 1
        elif i == len(e) - 1:
            j = i - 1
        else:
            j = i - 1 if e[i - 1] <= e[i + 1] else i + 1
        a, b = min(i, j), max(i, j)
        groups[a:b + 1] = [groups[a] + groups[b]]
        e[a:b + 1] = [e[a] + e[b]]
    return groups


def _pool(x, groups):
    return np.array([x[g].sum() for g in groups])


def chi2_statistic(observed, expected, groups=None) -> float:
    O = np.asarray(observed, dtype=float)
    E = np.asarray(expected, dtype=float)
    if groups is not None:
        O, E = _pool(O, groups), _pool(E, groups)
    return float(np.sum((O - E) ** 2 / np.maximum(E, 1e-300)))


class _Objective:
    """Unconstrained parametrization of the search.

    Means and log sds are taken relative to the data mean and sd, so a shift
    or rescaling of the data moves the optimizer path with it; weights are a
    softmax with the last logit fixed at 0.
    """

    def __init__(self, values, counts, edges, k, floor, groups):
        v = np.asarray(values, dtype=float)
        self.O = _pool(np.asarray(counts, dtype=float), groups)
        self.edges = open_edges(edges)
        self.n = float(np.sum(counts))
        self.k, self.floor, self.groups = k, floor, groups
        self.lo, self.hi = float(v.min()), float(v.max())
        self.sd_max = self.hi - self.lo
        self.center = float(v.mean())
        self.scale = float(v.std(ddof=1))

    def pack(self, mu, sd, logits):
        return np.concatenate([(np.asarray(mu) - self.center) / self.scale,
                               np.log(np.asarray(sd) / self.scale), logits])

    def unpack(self, p):
        k = self.k
        mu = self.center + self.scale * p[:k]
        sd = self.scale * np.exp(p[k:2 * k])
        z = np.append(p[2 * k:], 0.0)
        w = np.exp(z - z.max())
        return mu, sd, w / w.sum()

    def expected(self, mu, sd, w):
        cdf = (w[:, None] * special.ndtr((self.edges[None, :] - mu[:, None]) / sd[:, None])).sum(axis=0)
        return self.n * np.diff(cdf)

    def __call__(self, p):
        mu, sd, w = self.unpack(p)
        # feasible box: means inside the data range, floor <= sd <= range
        viol = (np.sum(np.maximum(self.lo - mu, 0) + np.maximum(mu - self.hi, 0))
                + np.sum(np.maximum(self.floor - sd, 0) + np.maximum(sd - self.sd_max, 0))) / self.scale
        if viol > 0:
            return 1e6 * (1.0 + viol)
        E = _pool(self.expected(mu, sd, w), self.groups)
        return float(np.sum((self.O - E) ** 2 / np.maximum(E, 1e-300)))


def default_histogram(values, k: int) -> HistogramSpec:
    """Sturges bins, raised to 3k so the bins outnumber the 3k-1 free parameters."""
    v = np.asarray(values, dtype=float)
    h = make_histogram(v, "sturges")
    if h.bin_count < 3 * k:
        h = make_histogram(v, 3 * k)
    return h


def _setup(values, k, histogram, min_expected):
    v = np.asarray(values, dtype=float)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(v) < 2 or v.max() == v.min():
        raise ValidationError("zero-variance data")
    if histogram is None:
        histogram = default_histogram(v, k)
    counts = np.asarray(histogram.counts)
    edges = np.asarray(histogram.bin_edges, dtype=float)
    if int(np.sum(counts)) != len(v):
        raise ValidationError("histogram counts do not match the values")
    occupied = int(np.sum(counts > 0))
    if k > occupied:
        raise ValidationError(f"k = {k} exceeds the {occupied} occupied bins")
    floor = float(np.min(np.diff(edges))) / 4.0
    groups = pooled_groups(v, histogram, min_expected)
    return v, histogram, _Objective(v, counts, edges, k, floor, groups)


def _starts(obj, v, k, restarts, seed):
    rng = np.random.default_rng(seed)
    sd0 = obj.scale
    sd_start = max(sd0 / k, obj.floor * 1.01)
    out = [obj.pack(np.quantile(v, (np.arange(k) + 0.5) / k), np.full(k, sd_start), np.zeros(k - 1))]
    for _ in range(restarts - 1):
        mu = obj.lo + (obj.hi - obj.lo) * rng.uniform(size=k)
        sd = np.exp(rng.uniform(math.log(obj.floor * 1.01), math.log(max(sd0, obj.floor * 1.02)), size=k))
        out.append(obj.pack(mu, sd, rng.normal(size=k - 1)))
    return out


def fit_mixture(values, k: int, histogram: HistogramSpec | None = None, restarts: int = 32, seed: int = 0,
                polish: int = 3, max_evals: int = 20000, min_expected: float = 1.0) -> MixtureModel:
    """Multi-start Nelder-Mead minimization of the binned chi-square.

    Start 0 uses k-quantile means, the pooled sd over k and equal weights;
    the other ``restarts - 1`` draw means uniformly in the data range. All
    starts get a short run, the best ``polish`` are refined to tight
    tolerance. Kernels are returned in descending weight.
    """
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    v, histogram, obj = _setup(values, k, histogram, min_expected)
    coarse = [optimize.minimize(obj, p0, method="Nelder-Mead",
                                options=dict(maxfev=min(max_evals, 900 * k), adaptive=True))
              for p0 in _starts(obj, v, k, restarts, seed)]
    order = sorted(range(len(coarse)), key=lambda i: (coarse[i].fun, i))
    fine = [optimize.minimize(obj, coarse[i].x, method="Nelder-Mead",
                              options=dict(maxfev=max_evals, xatol=1e-9, fatol=1e-12, adaptive=True))
            for i in order[:max(1, polish)]]
    best = min(fine, key=lambda r: r.fun)
    mu, sd, w = obj.unpack(best.x)
    idx = sorted(range(k), key=lambda i: (-w[i], mu[i]))
    kernels = tuple(Kernel(float(mu[i]), float(sd[i]), float(w[i])) for i in idx)
    model = MixtureModel(kernels, float(best.fun), bins=histogram)
    if not best.success or best.fun >= 1e6:
        raise MixtureFitError(f"chi-square minimization did not converge: {best.message}", model)
    return model


def start_chi2(values, k, histogram=None, restarts=32, seed=0, min_expected=1.0) -> np.ndarray:
    """Objective at each start point of ``fit_mixture`` with the same arguments."""
    v, _, obj = _setup(values, k, histogram, min_expected)
    return np.array([obj(p) for p in _starts(obj, v, k, restarts, seed)])


def pooled_groups(values, histogram, min_expected=1.0) -> list:
    v = np.asarray(values, dtype=float)
    ref = expected_counts([Kernel(float(v.mean()), float(v.std(ddof=1)), 1.0)], histogram.bin_edges, len(v))
    return pool_layout(ref, min_expected)


def model_chi2(model: MixtureModel, values, min_expected=1.0) -> float:
    """Recompute the objective for ``model`` on its own histogram."""
    h = model.bins
    E = expected_counts(model, h.bin_edges, int(np.sum(h.counts)))
    return chi2_statistic(h.counts, E, pooled_groups(values, h, min_expected))


def kernel_standard_errors(model: MixtureModel, n: int | None = None) -> np.ndarray:
    """Standard errors of (means, sds) from the binned Fisher information.

    Minimum chi-square and binned maximum likelihood share this asymptotic
    covariance. Returns an array of shape (k, 2).
    """
    ks = model.kernels
    k = len(ks)
    n = int(np.sum(model.bins.counts)) if n is None else n
    e = open_edges(model.bins.bin_edges)
    mu = np.array([x.mean for x in ks])
    sd = np.array([x.sd for x in ks])
    w = np.array([x.weight for x in ks])
    with np.errstate(invalid="ignore"):
        z = (e[None, :] - mu[:, None]) / sd[:, None]
        phi = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        zphi = np.where(np.isfinite(z), z * phi, 0.0)
    Phi = special.ndtr(z)
    # derivatives of the CDF at each edge, then of the bin probabilities
    rows = [-w[i] * phi[i] / sd[i] for i in range(k)]
    rows += [-w[i] * zphi[i] / sd[i] for i in range(k)]
    rows += [Phi[i] - Phi[k - 1] for i in range(k - 1)]
    J = np.diff(np.array(rows), axis=1)
    p = np.diff((w[:, None] * Phi).sum(axis=0))
    m = p > 1e-300
    info = n * (J[:, m] / p[m]) @ J[:, m].T
    cov = np.linalg.pinv(info)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return np.column_stack([se[:k], se[k:2 * k]])


@dataclass(frozen=True)
class KernelAssignment:
    kernel: int
    level: str
    distance: float
    tied_with: tuple = ()


def assign_kernels_to_factors(model: MixtureModel, records, factor) -> list:
    """Match each kernel to the factor level whose sub-group mean is nearest.

    ``factor`` may be one name or several; levels are compared across all of
    them. Each level is used at most once, nearest pairs first; leftover
    kernels are ``"unidentified"``. Equidistant candidates are reported in
    ``tied_with`` rather than broken silently.
    """
    factors = [factor] if isinstance(factor, str) else list(factor)
    means = {}
    for f in factors:
        sub = {}
        for r in records:
            sub.setdefault(r.level(f), []).append(r.value)
        for lev, vals in sub.items():
            means[f"{f}:{lev}" if len(factors) > 1 else lev] = float(np.mean(vals))
    pairs = sorted((abs(kern.mean - m), i, lev) for i, kern in enumerate(model.kernels) for lev, m in means.items())
    tol = 1e-12
    out = {}
    used = set()
    for d, i, lev in pairs:
        if i in out or lev in used:
            continue
        ties = tuple(sorted(l for dd, ii, l in pairs if ii == i and l != lev and abs(dd - d) <= tol))
        ties += tuple(f"kernel {j}" for dd, j, l in pairs if l == lev and j != i and abs(dd - d) <= tol)
        out[i] = KernelAssignment(i, lev, d, ties)
        used.add(lev)
    return [out.get(i, KernelAssignment(i, UNIDENTIFIED, math.nan)) for i in range(len(model.kernels))]
