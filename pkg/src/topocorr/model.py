"""Domain types shared by the analysis modules.

All lengths are micrometres unless a field says otherwise.
"""

from __future__ import annotations

import enum
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when a value object would violate its invariants."""


class Instrument(str, enum.Enum):
    FV = "FV"
    LSC = "LSC"
    CSI = "CSI"
    CI = "CI"


class Measurand(str, enum.Enum):
    StepHeightH = "StepHeightH"
    RmsSq = "RmsSq"
    Sa = "Sa"


class FitKind(str, enum.Enum):
    ThroughOrigin = "ThroughOrigin"
    Poly1 = "Poly1"
    Poly2 = "Poly2"


class Distribution(str, enum.Enum):
    Normal = "Normal"
    Uniform = "Uniform"


class SSKind(str, enum.Enum):
    Sequential = "Sequential"
    Adjusted = "Adjusted"


UNKNOWN = "unknown"


def _parse_enum(cls, value):
    if isinstance(value, cls):
        return value
    try:
        return cls(str(value).strip())
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ValidationError(f"unknown {cls.__name__} {value!r} (allowed: {allowed})") from None


def _finite(name, x):
    if x is None or not math.isfinite(float(x)):
        raise ValidationError(f"{name} must be finite, got {x!r}")


@dataclass(frozen=True)
class MeasurementRecord:
    """One extracted scalar measurand value with its factor labels.

    ``magnification``, ``day`` and ``seq`` may be None, which stands for the explicit level
    ``"unknown"``. ``surface`` groups sub-areas of one specimen surface and
    ``excluded`` carries a published outlier flag; both are optional.
    """

    value: float
    instrument: Instrument
    magnification: float | None
    area: str
    measurand: Measurand
    day: int | None = None
    seq: int | None = None
    surface: str | None = None
    excluded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "instrument", _parse_enum(Instrument, self.instrument))
        object.__setattr__(self, "measurand", _parse_enum(Measurand, self.measurand))
        _finite("value", self.value)
        object.__setattr__(self, "value", float(self.value))
        if self.magnification is not None:
            _finite("magnification", self.magnification)
            if float(self.magnification) <= 0:
                raise ValidationError(f"magnification must be positive, got {self.magnification}")
            object.__setattr__(self, "magnification", float(self.magnification))
        if not str(self.area):
            raise ValidationError("area label must be non-empty")
        if self.day is not None and int(self.day) < 1:
            raise ValidationError(f"day must be >= 1, got {self.day}")
        if self.seq is not None and int(self.seq) < 1:
            raise ValidationError(f"seq must be >= 1, got {self.seq}")

    @property
    def is_reference(self) -> bool:
        return self.instrument is Instrument.CI

    def level(self, factor: str) -> str:
        """Factor level as a label; missing levels map to ``"unknown"``."""
        factor = factor.lower()
        if factor == "instrument":
            return self.instrument.value
        if factor == "magnification":
            return UNKNOWN if self.magnification is None else f"{self.magnification:g}x"
        if factor == "area":
            return self.area
        if factor == "day":
            return UNKNOWN if self.day is None else f"Day{self.day}"
        if factor == "surface":
            return UNKNOWN if self.surface is None else self.surface
        raise ValidationError(f"unknown factor {factor!r}")


@dataclass(frozen=True)
class PairedObservation:
    x_ref: float
    y_opt: float
    area: str = ""

    def __post_init__(self):
        _finite("x_ref", self.x_ref)
        _finite("y_opt", self.y_opt)


@dataclass(frozen=True)
class SampleStats:
    n: int
    mean: float
    sd: float
    median: float
    q1: float
    q3: float
    iqr: float
    min: float
    max: float

    def __post_init__(self):
        tol = 1e-12 * max(1.0, abs(self.q3), abs(self.q1))
        if not (self.q1 <= self.median + tol and self.median <= self.q3 + tol):
            raise ValidationError("quartiles out of order")
        if self.iqr < -tol or self.sd < 0:
            raise ValidationError("negative spread")


@dataclass(frozen=True)
class RegressionFit:
    """Least-squares fit.

    Polynomial coefficients refer to the centred regressor ``t - t_center``;
    the through-origin slope uses ``t_center = 0``.
    """

    kind: FitKind
    coeffs: tuple
    coeff_sd: tuple
    residuals: tuple
    eps_rep: float
    dof: int
    r2: float
    x: tuple = ()
    t_center: float = 0.0

    def __post_init__(self):
        ncoef = {FitKind.ThroughOrigin: 1, FitKind.Poly1: 2, FitKind.Poly2: 3}[FitKind(self.kind)]
        if len(self.coeffs) != ncoef or len(self.coeff_sd) != ncoef:
            raise ValidationError(f"{self.kind} needs {ncoef} coefficients")
        if self.dof != len(self.residuals) - ncoef or self.dof <= 0:
            raise ValidationError("dof must equal n_points - n_coeffs and be positive")
        if self.eps_rep < 0 or self.r2 > 1 + 1e-12:
            raise ValidationError("invalid eps_rep or r2")

    @property
    def n(self) -> int:
        return len(self.residuals)

    def predict(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind is FitKind.ThroughOrigin:
            return self.coeffs[0] * t
        tc = t - self.t_center
        return sum(c * tc**i for i, c in enumerate(self.coeffs))


@dataclass(frozen=True)
class UncertaintyContributor:
    """Standard uncertainty ``u`` of one input with its sensitivity ``c``."""

    name: str
    u: float
    sensitivity: float = 1.0
    dof: float = math.inf
    distribution: Distribution = Distribution.Normal

    def __post_init__(self):
        object.__setattr__(self, "distribution", _parse_enum(Distribution, self.distribution))
        if not (self.u >= 0) or not math.isfinite(self.u):
            raise ValidationError(f"{self.name}: u must be finite and >= 0")
        _finite("sensitivity", self.sensitivity)
        if not (self.dof >= 1):
            raise ValidationError(f"{self.name}: dof must be >= 1 or inf")

    @classmethod
    def uniform(cls, name: str, halfwidth: float, sensitivity: float = 1.0):
        return cls(name, abs(halfwidth) / math.sqrt(3.0), sensitivity, math.inf, Distribution.Uniform)

    @property
    def contribution(self) -> float:
        return abs(self.sensitivity) * self.u


@dataclass(frozen=True)
class UncertaintyBudget:
    contributors: tuple
    u_combined: float
    dof_eff: float
    k: float
    U: float
    value: float | None = None

    def __post_init__(self):
        s = math.sqrt(sum(c.contribution**2 for c in self.contributors))
        if not math.isclose(s, self.u_combined, rel_tol=1e-9, abs_tol=1e-15):
            raise ValidationError("u_combined inconsistent with contributors")
        if not math.isclose(self.U, self.k * self.u_combined, rel_tol=1e-12, abs_tol=1e-15):
            raise ValidationError("U must equal k * u_combined")
        if self.k < 1.959 or self.dof_eff < 1:
            raise ValidationError("coverage factor below the normal limit")


@dataclass(frozen=True)
class Kernel:
    mean: float
    sd: float
    weight: float


@dataclass(frozen=True)
class MixtureModel:
    kernels: tuple
    chi2: float
    bins: object = None

    def __post_init__(self):
        w = sum(k.weight for k in self.kernels)
        if abs(w - 1.0) > 1e-9:
            raise ValidationError(f"weights sum to {w}, not 1")
        if any(k.sd <= 0 for k in self.kernels) or self.chi2 < 0:
            raise ValidationError("kernel sd must be > 0 and chi2 >= 0")


@dataclass(frozen=True)
class AnovaRow:
    factor: str
    ss: float
    dof: int
    ms: float
    f: float | None
    p: float | None


@dataclass(frozen=True)
class AnovaTable:
    rows: tuple
    ss_kind: SSKind
    r2: float
    aliased: tuple = ()

    def __post_init__(self):
        if not self.rows or self.rows[-1].factor != "Residual":
            raise ValidationError("residual row must be last")
        for r in self.rows:
            if r.dof < 1:
                raise ValidationError(f"non-positive dof in row {r.factor}")
            if r.p is not None and not (0.0 <= r.p <= 1.0):
                raise ValidationError("p-value outside [0, 1]")

    def row(self, factor: str) -> AnovaRow:
        for r in self.rows:
            if r.factor.lower() == factor.lower():
                return r
        raise KeyError(factor)


@dataclass(frozen=True, eq=False)
class Micrograph:
    """Height map on a regular grid. ``heights`` has shape (ny, nx)."""

    heights: np.ndarray
    pixel_dx: float
    pixel_dy: float
    mask: np.ndarray | None = None
    filled: np.ndarray | None = None

    def __post_init__(self):
        h = np.array(self.heights, dtype=float)
        if h.ndim != 2 or h.size == 0:
            raise ValidationError("heights must be a non-empty 2-D grid")
        mask = np.isfinite(h) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != h.shape:
            raise ValidationError("mask shape differs from heights")
        mask &= np.isfinite(h)
        if not (self.pixel_dx > 0 and self.pixel_dy > 0):
            raise ValidationError("pixel pitches must be positive")
        h.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "mask", mask)
        if self.filled is not None:
            f = np.array(self.filled, dtype=bool)
            f.setflags(write=False)
            object.__setattr__(self, "filled", f)

    @property
    def ny(self) -> int:
        return self.heights.shape[0]

    @property
    def nx(self) -> int:
        return self.heights.shape[1]

    def valid(self) -> np.ndarray:
        return self.heights[self.mask]


@dataclass(frozen=True)
class MaterialMeasureCalibration:
    x_ref_cal: float
    U_ref_cal: float
    k_cal: float | None = None
    n_input: int = 1

    def __post_init__(self):
        if not self.U_ref_cal > 0:
            raise ValidationError("U_ref_cal must be > 0")
        if self.k_cal is not None and not self.k_cal > 0:
            raise ValidationError("k_cal must be > 0")
        if self.n_input < 1:
            raise ValidationError("n_input must be >= 1")


@dataclass
class SessionReport:
    replicate_counts: dict = field(default_factory=dict)
    tcl_warnings: list = field(default_factory=list)
    unbalanced: list = field(default_factory=list)

    @property
    def is_unbalanced(self) -> bool:
        return bool(self.unbalanced)


MIN_REPLICATES = 10


def validate_session(records, factors=("instrument", "magnification", "day")) -> SessionReport:
    """Replicate counts per (measurand, area) and balance of each factor."""
    if not records:
        raise ValidationError("empty session")
    rep = SessionReport()
    groups = defaultdict(list)
    for r in records:
        groups[(r.measurand.value, r.area)].append(r)
    for key, recs in sorted(groups.items()):
        rep.replicate_counts[key] = len(recs)
        if len(recs) < MIN_REPLICATES:
            rep.tcl_warnings.append(key)
    for f in factors:
        counts = Counter(r.level(f) for r in records)
        if len(counts) > 1 and len(set(counts.values())) > 1:
            rep.unbalanced.append(f)
    return rep
