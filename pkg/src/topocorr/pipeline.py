"""Config-driven analysis pipelines for the four case studies.

A run goes screening -> (anova, mixture) -> regression -> uncertainty and
writes CSV (or JSON lines) tables plus a ``summary.json``. Outputs depend only
on the config and its seed.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from . import glm_anova, mixture, regression, screening, uncertainty
from .io import fixture_path, ingest_csv, write_summary, write_table
from .model import MaterialMeasureCalibration, Measurand, PairedObservation, ValidationError

CASES = ("Comparison", "TimeSequence", "Substitution", "Characterization")
BUNDLED_CONFIGS = {
    "comparison": "config_comparison.json",
    "time-sequence-height": "config_time_sequence_height.json",
    "time-sequence-sq": "config_time_sequence_sq.json",
    "time-sequence-sq-equalized": "config_time_sequence_sq_equalized.json",
    "substitution": "config_substitution.json",
    "characterization": "config_characterization.json",
}


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    case: str
    inputs: dict
    output: str = "out"
    factors: list = field(default_factory=list)
    ss_kind: str = "Adjusted"
    chauvenet: dict = field(default_factory=lambda: {"mode": "exclude", "max_iterations": 2})
    mixture: dict = field(default_factory=dict)
    order: int = 1
    reference: dict = field(default_factory=dict)
    subgroups: list = field(default_factory=list)
    seed: int = 0
    format: str = "csv"
    options: dict = field(default_factory=dict)
    base_dir: str = "."

    def __post_init__(self):
        if self.case not in CASES:
            raise ValidationError(f"unknown case {self.case!r} (allowed: {', '.join(CASES)})")
        need = {
            "Comparison": ("datasets",),
            "TimeSequence": ("records",),
            "Substitution": ("session",),
            "Characterization": ("records", "reference_records"),
        }[self.case]
        missing = [k for k in need if k not in self.inputs]
        if missing:
            raise ValidationError(f"{self.case} config lacks input(s): {', '.join(missing)}")
        ref_need = {"TimeSequence": ("x_ci", "U"), "Substitution": ("x_ref_cal", "U"),
                    "Characterization": ("U",)}.get(self.case, ())
        missing = [k for k in ref_need if k not in self.reference]
        if missing:
            raise ValidationError(f"{self.case} config lacks reference field(s): {', '.join(missing)}")
        mode = self.chauvenet.get("mode", "exclude")
        if mode not in ("exclude", "median-replace", "published"):
            raise ValidationError(f"unknown chauvenet mode {mode!r}")
        if self.format not in ("csv", "json-lines"):
            raise ValidationError(f"unknown format {self.format!r}")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ValidationError(f"unknown config key(s): {', '.join(extra)}")
        return cls(**{**d, "base_dir": str(base_dir)})

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON: {e}") from None
        return cls.from_dict(d, path.parent)

    def resolve(self, p) -> Path:
        p = str(p)
        if p.startswith("fixture:"):
            return fixture_path(p.split(":", 1)[1])
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q


def bundled_config(name: str) -> PipelineConfig:
    if name not in BUNDLED_CONFIGS:
        raise ValidationError(f"unknown bundled case {name!r} (allowed: {', '.join(BUNDLED_CONFIGS)})")
    return PipelineConfig.load(fixture_path(BUNDLED_CONFIGS[name]))


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, e, tb):
        if e is not None and not isinstance(e, StageError):
            raise StageError(self.name, e) from e
        return False


class _Writer:
    def __init__(self, out, fmt):
        self.out = Path(out)
        self.fmt = fmt
        self.files = []
        self.out.mkdir(parents=True, exist_ok=True)

    def table(self, name, header, rows):
        p = write_table(self.out / name, header, rows, self.fmt)
        self.files.append(p.name)
        return p


# shared stages

def _plot_data(w, prefix, values, bin_rule="sturges"):
    h = screening.histogram(values, bin_rule)
    m, s = h.comparable_normal
    rows = []
    for i in range(h.bin_count):
        a, b = float(h.bin_edges[i]), float(h.bin_edges[i + 1])
        # comparable normal as expected count per bin
        e = len(values) * (0.5 * math.erfc(-(b - m) / (s * math.sqrt(2))) - 0.5 * math.erfc(-(a - m) / (s * math.sqrt(2))))
        rows.append((a, b, int(h.counts[i]), e))
    w.table(f"{prefix}_histogram", ["lower", "upper", "count", "normal_expected"], rows)
    w.table(f"{prefix}_npp", ["normal_quantile", "value"], [tuple(r) for r in screening.npp_points(values)])
    st = screening.boxplot_stats(values)
    w.table(f"{prefix}_box", ["n", "mean", "sd", "min", "q1", "median", "q3", "max", "iqr"],
            [(st.n, st.mean, st.sd, st.min, st.q1, st.median, st.q3, st.max, st.iqr)])
    return h


def _anova_stage(w, prefix, records, factors, ss_kind):
    design = glm_anova.encode_design(records, factors)
    table = glm_anova.anova(design, ss_kind)
    w.table(f"{prefix}_anova", ["factor", "ss", "dof", "ms", "f", "p", "significant_95"],
            [(r.factor, r.ss, r.dof, r.ms, r.f, r.p, None if r.p is None else int(r.p < 0.05)) for r in table.rows])
    return {
        "ss_kind": table.ss_kind.value, "r2": table.r2, "aliased": list(table.aliased),
        "p": {r.factor: r.p for r in table.rows if r.p is not None},
    }


def _mixture_stage(w, prefix, values, cfg, records=None, assign=None):
    mcfg = cfg.mixture
    k = int(mcfg.get("k", 0))
    if k < 1:
        return None
    model = mixture.fit_mixture(values, k, restarts=int(mcfg.get("restarts", 32)), seed=int(cfg.seed))
    se = mixture.kernel_standard_errors(model)
    w.table(f"{prefix}_mixture", ["kernel", "mean", "sd", "weight_percent", "se_mean", "se_sd"],
            [(i + 1, kk.mean, kk.sd, 100 * kk.weight, se[i, 0], se[i, 1]) for i, kk in enumerate(model.kernels)])
    kd = mixture.kernel_distribution(values, mcfg.get("bandwidth", "silverman"))
    w.table(f"{prefix}_kernel_density", ["x", "density", "mixture_density"],
            [(float(x), float(d), float(mixture.mixture_pdf(model, x))) for x, d in zip(kd.eval_grid, kd.density)])
    out = {"chi2": model.chi2, "bins": int(model.bins.bin_count),
           "kernels": [{"mean": kk.mean, "sd": kk.sd, "weight": kk.weight} for kk in model.kernels]}
    if records is not None and assign:
        a = mixture.assign_kernels_to_factors(model, records, assign)
        w.table(f"{prefix}_kernel_assignment", ["kernel", "kernel_mean", "level", "distance", "ties"],
                [(x.kernel + 1, model.kernels[x.kernel].mean, x.level, x.distance, ";".join(x.tied_with)) for x in a])
        out["assignment"] = [x.level for x in a]
    return out


def _fit_rows(fit):
    names = {"ThroughOrigin": ["q"], "Poly1": ["a", "b"], "Poly2": ["a", "b", "c"]}[fit.kind.value]
    rows = [(n, c, s) for n, c, s in zip(names, fit.coeffs, fit.coeff_sd)]
    rows += [("eps_rep", fit.eps_rep, None), ("dof", fit.dof, None), ("r2", fit.r2, None),
             ("t_center", fit.t_center, None)]
    return rows


def _fit_summary(fit):
    return {"kind": fit.kind.value, "coeffs": list(fit.coeffs), "coeff_sd": list(fit.coeff_sd),
            "eps_rep": fit.eps_rep, "dof": fit.dof, "r2": fit.r2}


def _budget_table(w, name, labelled):
    """``labelled`` is a list of (label, budget); one block of rows per label."""
    rows = []
    for label, b in labelled:
        for r in uncertainty.budget_rows(b):
            rows.append((label,) + tuple(r))
        rows.append((label, "value", b.value, None, None, None))
    w.table(name, ["group", "term", "u", "sensitivity", "contribution", "dof"], rows)


def _residual_rows(w, prefix, fit, index):
    w.table(f"{prefix}_residuals", ["sequence", "residual"], [(float(t), float(r)) for t, r in zip(index, fit.residuals)])
    d = uncertainty.residual_randomization_report(fit, index)
    return {"mean": d.mean, "sd": d.sd, "trend_slope": d.trend_slope, "lag1_autocorr": d.lag1_autocorr,
            "flagged": d.flagged}


# cases

def _published_screen(recs, deviations):
    """Carry kept/excluded flags of a published deviation table over to the optical records."""
    opt = [r for r in recs if not r.is_reference]
    if len(opt) != len(deviations):
        raise ValidationError(f"{len(deviations)} deviations for {len(opt)} optical records")
    for r, d in zip(opt, deviations):
        if (r.area, r.instrument, r.magnification) != (d.area, d.instrument, d.magnification):
            raise ValidationError(f"deviation row for {d.area}/{d.instrument.value} does not match the records")
    return opt


def _run_comparison(cfg, w):
    summary = {"datasets": {}}
    for ds in cfg.inputs["datasets"]:
        name = ds["name"]
        s = {}
        with _Stage(f"{name}:ingest"):
            recs = ingest_csv(cfg.resolve(ds["records"]))
            ci = {r.area: r.value for r in recs if r.is_reference}
            if "deviations" in ds:
                devs = ingest_csv(cfg.resolve(ds["deviations"]))
                opt = _published_screen(recs, devs)
            else:
                devs = screening.normalize_to_area_averages(recs)
                opt = [r for r in recs if not r.is_reference]
        with _Stage(f"{name}:screening"):
            values = np.array([d.value for d in devs])
            res = screening.chauvenet(values, cfg.chauvenet.get("max_iterations", 2))
            keep = res.kept_mask
            w.table(f"{name}_screening", ["index", "area", "instrument", "magnification", "deviation", "kept"],
                    [(i, d.area, d.instrument.value, d.level("magnification"), d.value, int(k))
                     for i, (d, k) in enumerate(zip(devs, keep))])
            s["excluded"] = [v for v, _ in res.excluded]
            s["limits"] = list(res.limits)
            s["iterations"] = res.iterations_run
            kept_devs = [d for d, k in zip(devs, keep) if k]
            _plot_data(w, f"{name}_deviations", values[keep])
        if cfg.factors:
            with _Stage(f"{name}:anova"):
                s["anova"] = _anova_stage(w, name, kept_devs, cfg.factors, cfg.ss_kind)
        with _Stage(f"{name}:mixture"):
            m = _mixture_stage(w, name, values[keep], cfg)
            if m:
                s["mixture"] = m
        with _Stage(f"{name}:regression"):
            missing = sorted({r.area for r in opt} - set(ci))
            if missing:
                raise ValidationError(f"no reference value for area(s) {', '.join(missing)}")
            pairs = [PairedObservation(ci[r.area], r.value, r.area) for r, k in zip(opt, keep) if k]
            fit = regression.fit_through_origin(pairs)
            w.table(f"{name}_fit", ["term", "estimate", "sd"], _fit_rows(fit))
            s["fit"] = _fit_summary(fit)
            s["residuals"] = _residual_rows(w, f"{name}", fit, np.arange(1, fit.n + 1))
        with _Stage(f"{name}:uncertainty"):
            ref = ds.get("reference", cfg.reference)
            budgets = []
            for area in sorted(ci, key=glm_anova._level_sort_key):
                cal = MaterialMeasureCalibration(ci[area], ref["U"], None, int(ref.get("n_input", 12)))
                budgets.append((area, uncertainty.comparison_budget(fit, ci[area], cal,
                                                                    ds.get("resolution", uncertainty.DEFAULT_RESOLUTION))))
            _budget_table(w, f"{name}_budget", budgets)
            s["budgets"] = {a: {"value": b.value, "U": b.U, "k": b.k, "dof_eff": b.dof_eff} for a, b in budgets}
        summary["datasets"][name] = s
    return summary


def _run_time_sequence(cfg, w):
    s = {}
    with _Stage("ingest"):
        recs = ingest_csv(cfg.resolve(cfg.inputs["records"]))
        if any(r.seq is None for r in recs):
            raise ValidationError("time-sequence records need a seq column")
        recs = sorted(recs, key=lambda r: r.seq)
    with _Stage("screening"):
        values = np.array([r.value for r in recs])
        mode = cfg.chauvenet.get("mode", "exclude")
        if mode == "median-replace":
            res = screening.chauvenet_replace_median(values, cfg.chauvenet.get("max_iterations"))
            recs = [replace(r, value=float(v)) for r, v in zip(recs, res.values)]
            s["replaced"] = [{"seq": recs[i].seq, "value": v, "iteration": it} for i, v, it in res.replaced]
        elif mode == "exclude":
            res = screening.chauvenet(values, cfg.chauvenet.get("max_iterations", 2))
            recs = [r for r, k in zip(recs, res.kept_mask) if k]
            s["excluded"] = [v for v, _ in res.excluded]
        else:
            recs = [r for r in recs if not r.excluded]
        s["limits"] = list(res.limits) if mode != "published" else None
        values = np.array([r.value for r in recs])
        _plot_data(w, "values", values)
    if cfg.factors:
        with _Stage("anova"):
            s["anova"] = _anova_stage(w, "values", recs, cfg.factors, cfg.ss_kind)
    with _Stage("mixture"):
        m = _mixture_stage(w, "values", values, cfg, recs, cfg.mixture.get("assign", cfg.subgroups))
        if m:
            s["mixture"] = m
    with _Stage("regression"):
        t = np.array([float(r.seq) for r in recs])
        fit = regression.fit_poly(t, values, cfg.order)
        w.table("fit", ["term", "estimate", "sd"], _fit_rows(fit))
        s["fit"] = _fit_summary(fit)
        s["residuals"] = _residual_rows(w, "values", fit, t)
    with _Stage("uncertainty"):
        ref = cfg.reference
        cal = MaterialMeasureCalibration(ref["x_ci"], ref["U"], None, int(ref.get("n_input", 12)))
        res_ = cfg.options.get("resolution", uncertainty.DEFAULT_RESOLUTION)
        y, whole = uncertainty.time_sequence_budget(fit, t, values, cal, None, res_)
        w.table("corrected", ["sequence", "measured", "corrected"], list(zip(t, values, y)))
        budgets = [("all", whole)]
        for f in cfg.subgroups:
            levels = sorted({r.level(f) for r in recs}, key=glm_anova._level_sort_key)
            for lev in levels:
                sub = np.array([r.level(f) == lev for r in recs])
                budgets.append((f"{f}={lev}", uncertainty.time_sequence_budget(fit, t, values, cal, sub, res_)[1]))
        _budget_table(w, "budget", budgets)
        s["budgets"] = {g: {"value": b.value, "U": b.U, "k": b.k, "dof_eff": b.dof_eff} for g, b in budgets}
        s["corrected_sd"] = float(np.std(y, ddof=1))
    return s


def read_substitution_session(path):
    """CSV with columns t, gauge, optical: one row per repeat of both sessions."""
    t, g, o = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("t", "gauge", "optical") if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            try:
                t.append(float(row["t"]))
                g.append(float(row["gauge"]))
                o.append(float(row["optical"]))
            except ValueError:
                raise ValidationError(f"{path}:{reader.line_num}: malformed number") from None
    return np.array(t), np.array(g), np.array(o)


def _run_substitution(cfg, w):
    s = {}
    with _Stage("ingest"):
        t, g, o = read_substitution_session(cfg.resolve(cfg.inputs["session"]))
    with _Stage("regression"):
        fg = regression.fit_origin(t, g)
        fo = regression.fit_origin(t, o)
        w.table("fit_gauge", ["term", "estimate", "sd"], _fit_rows(fg))
        w.table("fit_optical", ["term", "estimate", "sd"], _fit_rows(fo))
        s["fit_gauge"] = _fit_summary(fg)
        s["fit_optical"] = _fit_summary(fo)
    with _Stage("uncertainty"):
        ref = cfg.reference
        cal = MaterialMeasureCalibration(ref["x_ref_cal"], ref["U"], ref.get("k"), int(ref.get("n_input", 1)))
        t_s = float(cfg.options.get("t_s", float(np.mean(t))))
        y, b = uncertainty.substitution_budget(fg, fo, cal, t_s)
        _budget_table(w, "budget", [("t_s", b)])
        s["t_s"] = t_s
        s["result"] = {"value": y, "U": b.U, "k": b.k, "dof_eff": b.dof_eff}
    return s


def _surface_matrix(recs, surface, areas, scale):
    """Repeats x areas matrix; published exclusions become NaN."""
    rows = sorted({r.seq for r in recs if r.surface == surface})
    M = np.full((len(rows), len(areas)), np.nan)
    flags = np.zeros_like(M, dtype=bool)
    for r in recs:
        if r.surface == surface:
            i, j = rows.index(r.seq), areas.index(r.area)
            M[i, j] = r.value * scale
            flags[i, j] = r.excluded
    if np.isnan(M).any():
        raise ValidationError(f"surface {surface}: incomplete repeats x areas grid")
    return M, flags


def _screen_columns(M, flags, mode):
    M = M.copy()
    replaced = []
    for j in range(M.shape[1]):
        if mode == "published":
            if flags[:, j].any():
                med = float(np.median(M[~flags[:, j], j]))
                replaced += [(int(i), j, float(M[i, j])) for i in np.flatnonzero(flags[:, j])]
                M[flags[:, j], j] = med
        elif mode == "median-replace":
            res = screening.chauvenet_replace_median(M[:, j])
            replaced += [(i, j, v) for i, v, _ in res.replaced]
            M[:, j] = res.values
        # exclude mode keeps the grid rectangular by leaving values as they are
    return M, replaced


def _run_characterization(cfg, w):
    s = {"surfaces": {}}
    with _Stage("ingest"):
        recs = ingest_csv(cfg.resolve(cfg.inputs["records"]))
        refs = ingest_csv(cfg.resolve(cfg.inputs["reference_records"]))
        scale = float(cfg.options.get("unit_scale", 1.0))
        measurand = Measurand(cfg.options.get("measurand", "RmsSq"))
        recs = [r for r in recs if r.measurand is measurand]
        refs = [r for r in refs if r.measurand is measurand]
        areas = sorted({r.area for r in recs})
        surfaces = sorted({r.surface for r in recs if r.surface})
        if not surfaces:
            raise ValidationError("characterization records need a surface column")
    mode = cfg.chauvenet.get("mode", "published")
    spread = cfg.options.get("spread", "half-range")
    U_map = cfg.reference["U"]
    n_input = int(cfg.reference.get("n_input", 12))
    corr_rows, unc_rows, doe_rows = [], [], []
    for surf in surfaces:
        ss = {}
        with _Stage(f"{surf}:screening"):
            M, flags = _surface_matrix(recs, surf, areas, scale)
            M, replaced = _screen_columns(M, flags, mode)
            ss["replaced"] = [{"repeat": i + 1, "area": areas[j], "value": v} for i, j, v in replaced]
            x = M.mean(axis=1)
            _plot_data(w, f"{surf}_values", x)
        with _Stage(f"{surf}:uncertainty"):
            ci = np.array([r.value * scale for r in refs if r.surface == surf])
            if len(ci) == 0:
                raise ValidationError(f"no reference values for surface {surf}")
            U = U_map[surf] if isinstance(U_map, dict) else U_map
            cal = MaterialMeasureCalibration(float(ci.mean()), float(U), None, n_input)
            y, bc, fit = uncertainty.corrected_characterization(x, ci, cal)
            y2, bu = uncertainty.uncorrected_characterization(x, ci, cal, spread)
            corr_rows.append((surf, bc))
            unc_rows.append((surf, bu))
            w.table(f"{surf}_fit", ["term", "estimate", "sd"], _fit_rows(fit))
            ss["fit"] = _fit_summary(fit)
            ss["reference_mean"] = float(ci.mean())
            ss["u_CI"] = uncertainty.ci_reference_uncertainty(cal)
            ss["corrected"] = {"value": bc.value, "U": bc.U, "k": bc.k}
            ss["uncorrected"] = {"value": bu.value, "U": bu.U, "k": bu.k}
            for j, area in enumerate(areas):
                _, b1, _ = uncertainty.corrected_characterization(M[:, j], ci, cal)
                _, b2 = uncertainty.uncorrected_characterization(M[:, j], ci, cal, spread)
                doe_rows.append({"corrected": "yes", "area": area, "surface": surf, "U": b1.U})
                doe_rows.append({"corrected": "no", "area": area, "surface": surf, "U": b2.U})
            doe_rows.append({"corrected": "yes", "area": "mean", "surface": surf, "U": bc.U})
            doe_rows.append({"corrected": "no", "area": "mean", "surface": surf, "U": bu.U})
        s["surfaces"][surf] = ss
    with _Stage("report"):
        _budget_table(w, "budget_corrected", corr_rows)
        _budget_table(w, "budget_uncorrected", unc_rows)
        w.table("doe_budgets", ["corrected", "area", "surface", "U"],
                [(r["corrected"], r["area"], r["surface"], r["U"]) for r in doe_rows])
        table = doe_summary(doe_rows)
        w.table("doe_interactions", ["factor_a", "level_a", "factor_b", "level_b", "mean_U", "n"], table)
        s["U_corr_lt_U_uncorr"] = {surf: c.U < u.U for (surf, c), (_, u) in zip(corr_rows, unc_rows)}
    return s


def doe_summary(rows, factors=("corrected", "area", "surface"), response="U") -> list:
    """Mean response per level pair of every two grouping factors.

    Rows are mappings holding the factors and the response. A factor with a
    single level still yields its rows, with a warning.
    """
    rows = list(rows)
    for f in factors:
        levels = {r[f] for r in rows}
        if len(levels) < 2:
            warnings.warn(f"factor {f!r} has a single level; interaction table is degenerate", stacklevel=2)
    out = []
    for fa, fb in combinations(factors, 2):
        cells = {}
        for r in rows:
            cells.setdefault((str(r[fa]), str(r[fb])), []).append(float(r[response]))
        for (la, lb) in sorted(cells, key=lambda c: (glm_anova._level_sort_key(c[0]), glm_anova._level_sort_key(c[1]))):
            v = cells[(la, lb)]
            out.append((fa, la, fb, lb, math.fsum(v) / len(v), len(v)))
    return out


RUNNERS = {
    "Comparison": _run_comparison,
    "TimeSequence": _run_time_sequence,
    "Substitution": _run_substitution,
    "Characterization": _run_characterization,
}


def run_pipeline(cfg: PipelineConfig, out=None) -> dict:
    """Run one case and write its report bundle; returns the summary."""
    w = _Writer(out or cfg.resolve(cfg.output), cfg.format)
    summary = RUNNERS[cfg.case](cfg, w)
    summary = {"case": cfg.case, "seed": cfg.seed, "results": summary, "files": sorted(w.files)}
    with _Stage("report"):
        write_summary(w.out / "summary.json", summary)
    return summary
