"""Command-line entry point ``topocorr``.

Exit status: 0 on success, 2 on invalid input or configuration, 1 on any
other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, glm_anova, micrograph, mixture, regression, screening, uncertainty
from .io import _cell, _json_value, ingest_csv, write_table
from .model import PairedObservation, UncertaintyContributor, ValidationError, validate_session
from .pipeline import BUNDLED_CONFIGS, PipelineConfig, StageError, bundled_config, doe_summary, run_pipeline


class _Emitter:
    """Tables go to ``--out`` as files, otherwise to stdout."""

    def __init__(self, args):
        self.out = getattr(args, "out", None)
        self.fmt = getattr(args, "format", "csv")

    def __call__(self, name, header, rows):
        if self.out:
            p = write_table(Path(self.out) / name, header, rows, self.fmt)
            print(f"wrote {p}")
            return
        if self.fmt == "csv":
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        else:
            for r in rows:
                print(json.dumps({h: _json_value(v) for h, v in zip(header, r)}))


def _values(path, drop_excluded=False):
    recs = ingest_csv(path)
    if drop_excluded:
        recs = [r for r in recs if not r.excluded]
    return recs, np.array([r.value for r in recs])


def cmd_ingest_check(args, emit):
    recs = ingest_csv(args.file)
    rep = validate_session(recs, args.factors.split(","))
    rows = [(m, a, n, int((m, a) in rep.tcl_warnings)) for (m, a), n in rep.replicate_counts.items()]
    emit("ingest_check", ["measurand", "area", "replicates", "below_minimum"], rows)
    n_ref = sum(r.is_reference for r in recs)
    print(f"{len(recs)} records ({len(recs) - n_ref} optical, {n_ref} reference); "
          f"unbalanced factors: {', '.join(rep.unbalanced) or 'none'}", file=sys.stderr)
    return 0


def cmd_screen(args, emit):
    recs = ingest_csv(args.file)
    if args.normalize:
        recs = screening.normalize_to_area_averages(recs)
    v = np.array([r.value for r in recs])
    if args.mode == "exclude":
        res = screening.chauvenet(v, 2 if args.max_iterations is None else args.max_iterations)
        excl_iter = {}
        for val, it in res.excluded:
            excl_iter.setdefault(val, it)
        rows = [(i, r.area, r.value, int(k), None if k else excl_iter.get(r.value)) for i, (r, k) in
                enumerate(zip(recs, res.kept_mask))]
        emit("screen", ["index", "area", "value", "kept", "excluded_in_iteration"], rows)
    else:
        res = screening.chauvenet_replace_median(v, args.max_iterations)
        rep = {i: it for i, _, it in res.replaced}
        rows = [(i, r.area, r.value, float(x), rep.get(i)) for i, (r, x) in enumerate(zip(recs, res.values))]
        emit("screen", ["index", "area", "value", "screened", "replaced_in_iteration"], rows)
    lo, hi = res.limits
    print(f"limits ({lo:.4f}, {hi:.4f}) after {res.iterations_run} iteration(s)", file=sys.stderr)
    return 0


def cmd_anova(args, emit):
    recs, _ = _values(args.file, args.drop_excluded)
    t = glm_anova.anova(glm_anova.encode_design(recs, args.factors.split(",")), args.ss_kind)
    emit("anova", ["factor", "ss", "dof", "ms", "f", "p"], [(r.factor, r.ss, r.dof, r.ms, r.f, r.p) for r in t.rows])
    print(f"R2 = {100 * t.r2:.1f} %" + (f"; aliased: {', '.join(t.aliased)}" if t.aliased else ""), file=sys.stderr)
    return 0


def cmd_mixture(args, emit):
    recs, v = _values(args.file, args.drop_excluded)
    h = screening.histogram(v, args.bins) if args.bins else None
    m = mixture.fit_mixture(v, args.k, h, restarts=args.restarts, seed=args.seed)
    se = mixture.kernel_standard_errors(m)
    rows = [(i + 1, k.mean, k.sd, 100 * k.weight, se[i, 0]) for i, k in enumerate(m.kernels)]
    emit("mixture", ["kernel", "mean", "sd", "weight_percent", "se_mean"], rows)
    print(f"chi2 = {m.chi2:.4f} on {m.bins.bin_count} bins", file=sys.stderr)
    if args.assign:
        a = mixture.assign_kernels_to_factors(m, recs, args.assign.split(","))
        for x in a:
            ties = f" (tie: {', '.join(x.tied_with)})" if x.tied_with else ""
            print(f"kernel {x.kernel + 1} -> {x.level}{ties}", file=sys.stderr)
    return 0


def cmd_fit(args, emit):
    recs, _ = _values(args.file, args.drop_excluded)
    if args.kind == "origin":
        ci = {r.area: r.value for r in recs if r.is_reference}
        opt = [r for r in recs if not r.is_reference]
        missing = sorted({r.area for r in opt} - set(ci))
        if missing:
            raise ValidationError(f"no reference value for area(s) {', '.join(missing)}")
        fit = regression.fit_through_origin(PairedObservation(ci[r.area], r.value, r.area) for r in opt)
    else:
        if any(r.seq is None for r in recs):
            raise ValidationError("polynomial fit needs a seq column")
        fit = regression.fit_poly([r.seq for r in recs], [r.value for r in recs], 1 if args.kind == "poly1" else 2)
    names = {"ThroughOrigin": ["q"], "Poly1": ["a", "b"], "Poly2": ["a", "b", "c"]}[fit.kind.value]
    rows = list(zip(names, fit.coeffs, fit.coeff_sd))
    rows += [("eps_rep", fit.eps_rep, None), ("dof", fit.dof, None), ("r2", fit.r2, None)]
    emit("fit", ["term", "estimate", "sd"], rows)
    return 0


def read_contributors(path):
    """CSV columns: name, u, sensitivity, dof (blank or inf), distribution.

    For Uniform rows ``u`` is the half-width.
    """
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for c in ("name", "u"):
            if c not in (reader.fieldnames or []):
                raise ValidationError(f"{path}: missing column {c!r}")
        for row in reader:
            where = f"{path}:{reader.line_num}"
            try:
                u = float(row["u"])
                sens = float(row.get("sensitivity") or 1.0)
                dof = float(row.get("dof") or "inf")
            except ValueError:
                raise ValidationError(f"{where}: malformed number") from None
            dist = (row.get("distribution") or "Normal").strip()
            try:
                if dist == "Uniform":
                    out.append(UncertaintyContributor.uniform(row["name"], u, sens))
                else:
                    out.append(UncertaintyContributor(row["name"], u, sens, dof, dist))
            except ValidationError as e:
                raise ValidationError(f"{where}: {e}") from None
    return out


def cmd_budget(args, emit):
    b = uncertainty.combine(read_contributors(args.file), args.value)
    emit("budget", ["term", "u", "sensitivity", "contribution", "dof"], uncertainty.budget_rows(b))
    return 0


def _load_map(path, args):
    p = Path(path)
    if p.suffix.lower() == ".csv":
        return micrograph.read_csv_grid(p, args.dx, args.dy)
    return micrograph.read_heightmap(p)


def cmd_micrograph(args, emit):
    m = _load_map(args.file, args)
    if args.level:
        m = micrograph.level_plane(m)
    op = args.op
    if op in ("sq", "sa"):
        val = micrograph.sq(m) if op == "sq" else micrograph.sa(m)
        emit(op, ["parameter", "value"], [(op.capitalize(), val)])
    elif op == "step":
        r = micrograph.step_height_histogram(m, args.bin_width if args.bin_width else "fd")
        emit("step", ["height", "lower_peak", "upper_peak", "bin_width"], [(r.height, r.peaks[0], r.peaks[1], r.bin_width)])
    elif op == "equalize":
        if not (args.nx and args.ny and args.target_dx and args.target_dy and args.output):
            raise ValidationError("equalize needs --nx --ny --target-dx --target-dy and --output")
        e = micrograph.equalize(m, args.nx, args.ny, args.target_dx, args.target_dy)
        micrograph.write_heightmap(e, args.output)
        print(f"wrote {args.output}: {e.ny} x {e.nx}, {int((~e.mask).sum())} invalid pixels", file=sys.stderr)
    elif op == "corr":
        c = micrograph.pixel_correlation(m, args.window, args.mode)
        rows = [(c.columns[i],) + tuple(float(x) for x in c.matrix[i]) for i in range(len(c.columns))]
        emit("correlation", ["column"] + [str(x) for x in c.columns], rows)
    return 0


def cmd_run(args, emit):
    if args.case:
        cfg = bundled_config(args.case)
    elif args.config:
        cfg = PipelineConfig.load(args.config)
    else:
        raise ValidationError("run needs --config or --case")
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "format", None):
        cfg.format = args.format
    out = Path(args.out or cfg.output)
    s = run_pipeline(cfg, out)
    print(f"{cfg.case}: wrote {len(s['files']) + 1} files to {out}", file=sys.stderr)
    return 0


def cmd_doe(args, emit):
    with open(args.file, newline="") as fh:
        rows = list(csv.DictReader(fh))
    factors = args.factors.split(",")
    for r in rows:
        missing = [f for f in factors + [args.response] if f not in r]
        if missing:
            raise ValidationError(f"{args.file}: missing column(s) {', '.join(missing)}")
        try:
            r[args.response] = float(r[args.response])
        except ValueError:
            raise ValidationError(f"{args.file}: malformed {args.response} value") from None
    emit("doe_interactions", ["factor_a", "level_a", "factor_b", "level_b", "mean_" + args.response, "n"],
         doe_summary(rows, factors, args.response))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="pipeline config (JSON)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for mixture restarts")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: stdout)")
    common.add_argument("--format", choices=("csv", "json-lines"), default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="topocorr", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("ingest-check", parents=[common], help="validate a records CSV")
    s.add_argument("file")
    s.add_argument("--factors", default="instrument,magnification,day")
    s.set_defaults(func=cmd_ingest_check)

    s = sub.add_parser("screen", parents=[common], help="Chauvenet screening")
    s.add_argument("file")
    s.add_argument("--mode", choices=("exclude", "median-replace"), default="exclude")
    s.add_argument("--max-iterations", type=int, default=None,
                   help="default 2 for exclude, until convergence for median-replace")
    s.add_argument("--normalize", action="store_true", help="screen deviations from area means")
    s.set_defaults(func=cmd_screen)

    s = sub.add_parser("anova", parents=[common], help="main-effects GLM ANOVA")
    s.add_argument("file")
    s.add_argument("--factors", default="instrument,magnification,area")
    s.add_argument("--ss-kind", choices=("Sequential", "Adjusted"), default="Adjusted")
    s.add_argument("--drop-excluded", action="store_true")
    s.set_defaults(func=cmd_anova)

    s = sub.add_parser("mixture", parents=[common], help="normal-mixture decomposition")
    s.add_argument("file")
    s.add_argument("-k", type=int, default=2)
    s.add_argument("--restarts", type=int, default=32)
    s.add_argument("--bins", type=int, default=None)
    s.add_argument("--assign", default=None, help="factors to match kernels against")
    s.add_argument("--drop-excluded", action="store_true")
    s.set_defaults(func=cmd_mixture)

    s = sub.add_parser("fit", parents=[common], help="systematics regression")
    s.add_argument("file")
    s.add_argument("--kind", choices=("origin", "poly1", "poly2"), default="origin")
    s.add_argument("--drop-excluded", action="store_true")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("budget", parents=[common], help="combine a contributors CSV")
    s.add_argument("file")
    s.add_argument("--value", type=float, default=None)
    s.set_defaults(func=cmd_budget)

    s = sub.add_parser("micrograph", parents=[common], help="height-map operations")
    s.add_argument("op", choices=("sq", "sa", "step", "equalize", "corr"))
    s.add_argument("file", help="height map (.csv grid or topocorr format)")
    s.add_argument("--dx", type=float, default=1.0, help="pixel pitch for CSV grids")
    s.add_argument("--dy", type=float, default=1.0)
    s.add_argument("--level", action="store_true", help="remove the least-squares plane first")
    s.add_argument("--bin-width", type=float, default=None)
    s.add_argument("--nx", type=int)
    s.add_argument("--ny", type=int)
    s.add_argument("--target-dx", type=float)
    s.add_argument("--target-dy", type=float)
    s.add_argument("--output")
    s.add_argument("--window", type=int, default=None)
    s.add_argument("--mode", choices=("rows", "stack"), default="rows")
    s.set_defaults(func=cmd_micrograph)

    s = sub.add_parser("run", parents=[common], help="full case pipeline")
    s.add_argument("--case", choices=sorted(BUNDLED_CONFIGS), default=None, help="bundled case config")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("doe", parents=[common], help="interaction table of U")
    s.add_argument("file", help="CSV with the factor columns and the response")
    s.add_argument("--factors", default="corrected,area,surface")
    s.add_argument("--response", default="U")
    s.set_defaults(func=cmd_doe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", None), ("format", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.verb == "mixture" and args.seed is None:
        args.seed = 0
    if args.format is None and args.verb != "run":
        args.format = "csv"
    try:
        return args.func(args, _Emitter(args))
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e.cause, ValidationError) else 1
    except (OSError, RuntimeError, ValueError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
