"""CSV ingestion of measurement records and report writers."""

from __future__ import annotations

import csv
import json
import math
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from .model import MeasurementRecord, ValidationError

REQUIRED = ("value_um", "instrument", "magnification", "area", "measurand")
OPTIONAL = ("day", "seq", "surface", "excluded")


class IngestError(ValidationError):
    pass


def fixture_path(name: str) -> Path:
    """Path of a bundled data fixture."""
    return Path(resources.files("topocorr") / "data" / name)


def _opt_int(s, field, where):
    s = (s or "").strip()
    if not s:
        return None
    try:
        return int(s)
    except ValueError:
        raise IngestError(f"{where}: column {field!r}: not an integer: {s!r}") from None


def ingest_csv(path) -> list:
    """Read records; errors carry file name, line number and column."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError(f"{path}: empty file")
        cols = [c.strip() for c in reader.fieldnames]
        missing = [c for c in REQUIRED if c not in cols]
        if missing:
            raise IngestError(f"{path}: missing column(s) {', '.join(missing)}")
        extra = [c for c in cols if c not in REQUIRED + OPTIONAL]
        if extra:
            warnings.warn(f"{path}: ignoring unknown column(s) {', '.join(extra)}", stacklevel=2)
        records = []
        for row in reader:
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            where = f"{path}:{reader.line_num}"
            try:
                value = float(row["value_um"])
            except ValueError:
                raise IngestError(f"{where}: column 'value_um': malformed number {row['value_um']!r}") from None
            mag = row["magnification"]
            try:
                mag = float(mag.rstrip("xX")) if mag else None
            except ValueError:
                raise IngestError(f"{where}: column 'magnification': malformed number {mag!r}") from None
            try:
                rec = MeasurementRecord(
                    value=value,
                    instrument=row["instrument"],
                    magnification=mag,
                    area=row["area"],
                    measurand=row["measurand"],
                    day=_opt_int(row.get("day"), "day", where),
                    seq=_opt_int(row.get("seq"), "seq", where),
                    surface=row.get("surface") or None,
                    excluded=(row.get("excluded") or "0").lower() in ("1", "true", "yes"),
                )
            except IngestError:
                raise
            except ValidationError as e:
                raise IngestError(f"{where}: {e}") from None
            records.append(rec)
    if not records:
        raise IngestError(f"{path}: no data rows")
    return records


def write_records(records, path) -> None:
    cols = REQUIRED[:4] + ("day", "seq", "measurand", "surface", "excluded")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow([
                repr(r.value), r.instrument.value, "" if r.magnification is None else f"{r.magnification:g}",
                r.area, "" if r.day is None else r.day, "" if r.seq is None else r.seq,
                r.measurand.value, r.surface or "", int(r.excluded),
            ])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf"
        return repr(round(v, 12))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _json_value(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return str(v)
        return round(v, 12)
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_table(path, header, rows, fmt: str = "csv") -> Path:
    """Write rows as CSV or JSON lines; the suffix follows the format."""
    path = Path(path).with_suffix(".csv" if fmt == "csv" else ".jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if fmt == "csv":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        elif fmt == "json-lines":
            for r in rows:
                fh.write(json.dumps({h: _json_value(v) for h, v in zip(header, r)}) + "\n")
        else:
            raise ValidationError(f"unknown format {fmt!r}")
    return path


def write_summary(path, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return _json_value(o)

    path.write_text(json.dumps(clean(summary), indent=2, sort_keys=True) + "\n")
    return path
