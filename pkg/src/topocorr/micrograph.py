"""Height-map conditioning and scalar extraction.

Masked (non-measured) pixels never enter any statistic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .model import Micrograph, ValidationError

MAGIC = "#topocorr-heightmap v1"
UNITS = {"um": 1.0, "nm": 1e-3, "mm": 1e3}


def _valid(m: Micrograph, need: int = 1) -> np.ndarray:
    v = m.valid()
    if v.size < need:
        raise ValidationError(f"need at least {need} valid pixels, got {v.size}")
    return v


def _pixel_coords(m: Micrograph):
    yy, xx = np.mgrid[0:m.ny, 0:m.nx]
    return xx * m.pixel_dx, yy * m.pixel_dy


def level_plane(m: Micrograph) -> Micrograph:
    """Subtract the least-squares plane a + b x + c y fitted over valid pixels."""
    x, y = _pixel_coords(m)
    mk = m.mask
    if mk.sum() < 3:
        raise ValidationError("plane fit needs at least 3 valid pixels")
    # centring keeps the normal matrix well conditioned
    xv, yv, zv = x[mk], y[mk], m.heights[mk]
    xc, yc = xv.mean(), yv.mean()
    A = np.column_stack([np.ones(xv.size), xv - xc, yv - yc])
    coef, _, rank, _ = np.linalg.lstsq(A, zv, rcond=None)
    if rank < 3:
        raise ValidationError("valid pixels are collinear; plane undefined")
    plane = coef[0] + coef[1] * (x - xc) + coef[2] * (y - yc)
    h = np.where(mk, m.heights - plane, np.nan)
    h[mk] -= h[mk].mean()
    return Micrograph(h, m.pixel_dx, m.pixel_dy, mk, m.filled)


def sq(m: Micrograph) -> float:
    """Root mean square of valid heights about their mean."""
    v = _valid(m, 2)
    d = v - v.mean()
    return math.sqrt(float(np.mean(d * d)))


def sa(m: Micrograph) -> float:
    """Mean absolute deviation of valid heights about their mean."""
    v = _valid(m, 2)
    return float(np.mean(np.abs(v - v.mean())))


def _fd_width(v):
    q75, q25 = np.percentile(v, [75, 25])
    return 2.0 * (q75 - q25) / v.size ** (1.0 / 3.0)


def _parabolic_peak(edges, counts, i):
    centres = 0.5 * (edges[:-1] + edges[1:])
    if i == 0 or i == len(counts) - 1:
        return float(centres[i])
    y0, y1, y2 = (float(c) for c in counts[i - 1:i + 2])
    den = y0 - 2.0 * y1 + y2
    off = 0.0 if den == 0 else 0.5 * (y0 - y2) / den
    return float(centres[i] + np.clip(off, -0.5, 0.5) * (edges[1] - edges[0]))


def _local_maxima(counts):
    c = np.concatenate([[-1], counts, [-1]])
    idx = [i - 1 for i in range(1, len(c) - 1) if c[i] > 0 and c[i] >= c[i - 1] and c[i] > c[i + 1]]
    return idx


@dataclass(frozen=True)
class StepResult:
    height: float
    peaks: tuple
    bin_width: float


def step_height_histogram(m: Micrograph, bin_width="fd", dead_band: float = 0.1) -> StepResult:
    """Step height as the distance between the two dominant height-histogram modes.

    A coarse histogram (``bin_width`` = "fd" for Freedman-Diaconis or a number
    in micrometres) locates the two tallest local maxima at least
    ``dead_band`` times the height range apart. Each peak is then refined on a
    Freedman-Diaconis histogram of the pixels within one coarse bin of it,
    with parabolic sub-bin interpolation.
    """
    v = _valid(m, 4)
    span = float(v.max() - v.min())
    if span == 0:
        raise ValidationError("no step detected: flat surface")
    w = _fd_width(v) if bin_width == "fd" else float(bin_width)
    if not w > 0:
        w = span / 100.0
    nb = max(3, int(math.ceil(span / w)))
    edges = np.linspace(v.min(), v.max(), nb + 1)
    counts, _ = np.histogram(v, edges)
    maxima = sorted(_local_maxima(counts), key=lambda i: -counts[i])
    centres = 0.5 * (edges[:-1] + edges[1:])
    sep = dead_band * span
    chosen = []
    for i in maxima:
        if all(abs(centres[i] - centres[j]) >= sep for j in chosen):
            chosen.append(i)
    if len(chosen) < 2:
        raise ValidationError("no step detected: histogram is unimodal")
    if len(chosen) > 2:
        warnings.warn(f"{len(chosen)} separated modes; using the two tallest", stacklevel=2)
    bw = edges[1] - edges[0]
    peaks = []
    for i in chosen[:2]:
        sel = v[np.abs(v - centres[i]) <= 1.5 * bw]
        fw = _fd_width(sel) if sel.size > 8 else 0.0
        if fw > 0 and np.ptp(sel) > 3 * fw:
            fe = np.arange(sel.min(), sel.max() + fw, fw)
            fc, _ = np.histogram(sel, fe)
            peaks.append(_parabolic_peak(fe, fc, int(np.argmax(fc))))
        else:
            peaks.append(_parabolic_peak(edges, counts, i))
    return StepResult(abs(peaks[1] - peaks[0]), tuple(sorted(peaks)), float(bw))


def equalize(m: Micrograph, target_nx: int, target_ny: int, target_dx: float, target_dy: float) -> Micrograph:
    """Bilinear resampling onto another grid sharing the origin of ``m``.

    A target pixel is invalid when any source pixel with nonzero weight in its
    interpolation stencil is invalid.
    """
    if target_nx < 1 or target_ny < 1 or not (target_dx > 0 and target_dy > 0):
        raise ValidationError("invalid target grid")
    ex, ey = (m.nx - 1) * m.pixel_dx, (m.ny - 1) * m.pixel_dy
    tx, ty = (target_nx - 1) * target_dx, (target_ny - 1) * target_dy
    tol = 1e-9
    if tx > ex * (1 + tol) + tol or ty > ey * (1 + tol) + tol:
        raise ValidationError("target grid exceeds the source physical extent")
    fx = np.minimum(np.arange(target_nx) * target_dx / m.pixel_dx, m.nx - 1)
    fy = np.minimum(np.arange(target_ny) * target_dy / m.pixel_dy, m.ny - 1)
    # snap coordinates that land on source pixels to kill rounding noise
    fx = np.where(np.abs(fx - np.rint(fx)) < 1e-9, np.rint(fx), fx)
    fy = np.where(np.abs(fy - np.rint(fy)) < 1e-9, np.rint(fy), fy)
    x0 = np.floor(fx).astype(int)
    y0 = np.floor(fy).astype(int)
    ax = fx - x0
    ay = fy - y0
    x1 = np.minimum(x0 + 1, m.nx - 1)
    y1 = np.minimum(y0 + 1, m.ny - 1)
    h = np.where(m.mask, m.heights, 0.0)
    ok = m.mask
    out = np.zeros((target_ny, target_nx))
    valid = np.ones((target_ny, target_nx), dtype=bool)
    AX, AY = np.meshgrid(ax, ay)
    for yi, wy in ((y0, 1.0 - AY), (y1, AY)):
        for xi, wx in ((x0, 1.0 - AX), (x1, AX)):
            w = wy * wx
            out += w * h[np.ix_(yi, xi)]
            valid &= (w == 0) | ok[np.ix_(yi, xi)]
    out[~valid] = np.nan
    return Micrograph(out, target_dx, target_dy, valid)


@dataclass(frozen=True)
class CorrelationResult:
    matrix: np.ndarray
    columns: np.ndarray
    masked: np.ndarray


def _pearson(obs):
    """Pearson correlation of the columns of ``obs`` (rows are observations)."""
    d = obs - obs.mean(axis=0)
    ss = np.sqrt(np.einsum("ij,ij->j", d, d))
    zero = ss == 0
    safe = np.where(zero, 1.0, ss)
    c = (d.T @ d) / np.outer(safe, safe)
    c = np.clip(0.5 * (c + c.T), -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    c[zero, :] = np.nan
    c[:, zero] = np.nan
    return c, zero


def _central_window(n, window):
    if window is None or window >= n:
        return np.arange(n)
    start = (n - window) // 2
    return np.arange(start, start + window)


def pixel_correlation(m, rows_window: int | None = None, mode: str = "rows") -> CorrelationResult:
    """Pearson correlation between pixel columns inside a central window.

    ``mode="rows"`` treats each grid row of one micrograph as an observation;
    ``mode="stack"`` takes a sequence of micrographs and uses the central row of
    each as one observation. Observations with masked pixels in the window are
    dropped; zero-variance columns come out as NaN and are flagged in ``masked``.
    """
    if mode == "rows":
        cols = _central_window(m.nx, rows_window)
        obs = m.heights[:, cols]
        good = m.mask[:, cols].all(axis=1)
    elif mode == "stack":
        stack = list(m)
        if not stack:
            raise ValidationError("empty micrograph stack")
        nx, ny = stack[0].nx, stack[0].ny
        if any(s.nx != nx or s.ny != ny for s in stack):
            raise ValidationError("stack micrographs differ in size")
        cols = _central_window(nx, rows_window)
        r = ny // 2
        obs = np.array([s.heights[r, cols] for s in stack])
        good = np.array([s.mask[r, cols].all() for s in stack])
    else:
        raise ValidationError(f"unknown correlation mode {mode!r}")
    obs = obs[good]
    if obs.shape[0] < 2:
        raise ValidationError("need at least 2 complete observations")
    c, zero = _pearson(obs)
    return CorrelationResult(c, cols, zero)


def interpolate_nonmeasured(m: Micrograph, policy: str = "mask-only") -> Micrograph:
    """Leave holes masked, or fill them from the nearest valid pixel and record provenance."""
    if not m.mask.any():
        raise ValidationError("no valid pixel to fill from")
    if policy == "mask-only":
        return m
    if policy != "nearest-fill":
        raise ValidationError(f"unknown fill policy {policy!r}")
    holes = ~m.mask
    if not holes.any():
        return Micrograph(m.heights, m.pixel_dx, m.pixel_dy, m.mask, np.zeros_like(m.mask))
    _, (iy, ix) = ndimage.distance_transform_edt(holes, sampling=(m.pixel_dy, m.pixel_dx), return_indices=True)
    h = m.heights[iy, ix]
    return Micrograph(h, m.pixel_dx, m.pixel_dy, np.ones_like(m.mask), holes)


def read_heightmap(path) -> Micrograph:
    """Read the text-header + float32 little-endian height-map format or a CSV grid."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC.encode()):
        return read_csv_grid(path)
    head, sep, body = raw.partition(b"\nend_header\n")
    if not sep:
        raise ValidationError(f"{path}: missing end_header line")
    meta = {}
    for line in head.decode("ascii").splitlines()[1:]:
        if line.strip():
            k, _, v = line.partition(":")
            meta[k.strip()] = v.strip()
    try:
        nx, ny = int(meta["nx"]), int(meta["ny"])
        dx, dy = float(meta["pixel_dx_um"]), float(meta["pixel_dy_um"])
    except (KeyError, ValueError) as e:
        raise ValidationError(f"{path}: bad header ({e})") from None
    unit = meta.get("unit", "um")
    scale = UNITS.get(unit)
    if scale is None:
        raise ValidationError(f"{path}: unknown unit {unit!r}")
    enc = meta.get("mask_encoding", "nan")
    if enc != "nan":
        raise ValidationError(f"{path}: unsupported mask_encoding {enc!r}")
    data = np.frombuffer(body, dtype="<f4")
    if data.size != nx * ny:
        raise ValidationError(f"{path}: expected {nx * ny} values, found {data.size}")
    h = data.reshape(ny, nx).astype(float) * scale
    return Micrograph(h, dx, dy)


def write_heightmap(m: Micrograph, path, unit: str = "um") -> None:
    if unit not in UNITS:
        raise ValidationError(f"unknown unit {unit!r}")
    h = (np.where(m.mask, m.heights, np.nan) / UNITS[unit]).astype("<f4")
    header = (f"{MAGIC}\nnx: {m.nx}\nny: {m.ny}\npixel_dx_um: {m.pixel_dx!r}\npixel_dy_um: {m.pixel_dy!r}\n"
              f"unit: {unit}\nmask_encoding: nan\nend_header\n")
    Path(path).write_bytes(header.encode("ascii") + h.tobytes())


def read_csv_grid(path, pixel_dx: float = 1.0, pixel_dy: float = 1.0) -> Micrograph:
    """CSV grid, one grid row per line; empty cells or NaN mark non-measured pixels."""
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                rows.append([float(c) if c.strip() else np.nan for c in line.split(",")])
            except ValueError:
                raise ValidationError(f"{path}:{ln}: non-numeric cell") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValidationError(f"{path}: empty or ragged grid")
    return Micrograph(np.array(rows), pixel_dx, pixel_dy)
