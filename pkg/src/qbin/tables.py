"""CSV/JSON persistence: tuple tables, heatmap manifests, assignment tables, failure reports.

All tables are UTF-8 CSV with a mandatory header. Floats are written as the
shortest decimal that round-trips (``repr``); absent optional values are empty
cells. Every write goes to a temporary file that is then renamed into place.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .measures import Measure

SPLITS = ("validation", "test", "train")


class TableError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def fmt_float(v: float | None) -> str:
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _opt_float(s: str) -> float | None:
    s = s.strip()
    return None if s == "" else float(s)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def read_csv(path: str | Path, required: Sequence[str], column_map: Mapping[str, str] | None = None) -> list[dict]:
    """Rows as dicts keyed by canonical column names; ``column_map`` maps canonical -> source header."""
    column_map = dict(column_map or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise TableError(f"{path}: missing header")
        source = {canon: column_map.get(canon, canon) for canon in set(required) | set(column_map)}
        missing = [c for c in required if source[c] not in reader.fieldnames]
        if missing:
            raise TableError(f"{path}: missing columns {missing}")
        out = []
        for raw in reader:
            row = dict(raw)
            for canon, src in source.items():
                if src in raw:
                    row[canon] = raw[src]
            out.append(row)
        return out


# -- tuple table ------------------------------------------------------------------

@dataclass(frozen=True)
class TupleRow:
    uid: str
    landmark: str
    fold: int
    split: str
    measure: str
    uncertainty: float
    error: float | None = None
    pred_row: float | None = None
    pred_col: float | None = None
    gt_row: float | None = None
    gt_col: float | None = None
    model: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise TableError(f"unknown split {self.split!r}")
        Measure(self.measure)
        if not math.isfinite(self.uncertainty) or self.uncertainty < 0:
            raise TableError(f"{self.uid}: uncertainty must be finite and non-negative")
        if self.error is not None and (not math.isfinite(self.error) or self.error < 0):
            raise TableError(f"{self.uid}: error must be finite and non-negative")
        if self.split == "validation" and self.error is None and not self.has_coords:
            raise TableError(f"{self.uid}: validation rows need an error or pred+gt coordinates")

    @property
    def has_coords(self) -> bool:
        return None not in (self.pred_row, self.pred_col, self.gt_row, self.gt_col)

    @property
    def group(self) -> tuple[str, str, str, int]:
        return (self.model, self.landmark, self.measure, self.fold)


TUPLE_COLUMNS = [f.name for f in fields(TupleRow)]
_TUPLE_REQUIRED = ["uid", "landmark", "fold", "split", "measure", "uncertainty"]
_OPT_FLOATS = ("error", "pred_row", "pred_col", "gt_row", "gt_col")


def tuple_row_sort_key(r: TupleRow):
    return (r.model, r.landmark, r.measure, r.fold, r.split, r.uid)


def write_tuples(path: str | Path, rows: Iterable[TupleRow]) -> None:
    body = [
        [r.uid, r.landmark, r.fold, r.split, r.measure, fmt_float(r.uncertainty)]
        + [fmt_float(getattr(r, k)) for k in _OPT_FLOATS] + [r.model]
        for r in rows
    ]
    atomic_write_text(path, csv_text(TUPLE_COLUMNS, body))


def read_tuples(path: str | Path, column_map: Mapping[str, str] | None = None) -> list[TupleRow]:
    rows = []
    for lineno, d in enumerate(read_csv(path, _TUPLE_REQUIRED, column_map), 2):
        try:
            rows.append(TupleRow(
                uid=d["uid"], landmark=d["landmark"], fold=int(d["fold"]), split=d["split"].strip(),
                measure=d["measure"].strip(), uncertainty=float(d["uncertainty"]),
                **{k: _opt_float(d.get(k) or "") for k in _OPT_FLOATS},
                model=d.get("model") or "",
            ))
        except (ValueError, KeyError) as exc:
            raise TableError(f"{path}:{lineno}: {exc}") from None
    return rows


# -- heatmap manifest ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    uid: str
    landmark: str
    fold: int
    split: str
    member: int
    path: str
    gt_row: float | None = None
    gt_col: float | None = None
    true_row: float | None = None
    true_col: float | None = None


MANIFEST_COLUMNS = [f.name for f in fields(ManifestRow)]


def write_manifest(path: str | Path, rows: Iterable[ManifestRow]) -> None:
    body = [[r.uid, r.landmark, r.fold, r.split, r.member, r.path,
             fmt_float(r.gt_row), fmt_float(r.gt_col), fmt_float(r.true_row), fmt_float(r.true_col)] for r in rows]
    atomic_write_text(path, csv_text(MANIFEST_COLUMNS, body))


def read_manifest(path: str | Path) -> list[ManifestRow]:
    rows = []
    for lineno, d in enumerate(read_csv(path, ["uid", "landmark", "member", "path"]), 2):
        try:
            rows.append(ManifestRow(
                uid=d["uid"], landmark=d["landmark"], fold=int(d.get("fold") or 0),
                split=(d.get("split") or "test").strip(), member=int(d["member"]), path=d["path"],
                gt_row=_opt_float(d.get("gt_row") or ""), gt_col=_opt_float(d.get("gt_col") or ""),
                true_row=_opt_float(d.get("true_row") or ""), true_col=_opt_float(d.get("true_col") or ""),
            ))
        except ValueError as exc:
            raise TableError(f"{path}:{lineno}: {exc}") from None
    return rows


# -- assignments ------------------------------------------------------------------------

@dataclass(frozen=True)
class AssignmentRow:
    uid: str
    landmark: str
    fold: int
    measure: str
    q: int
    bin: int
    uncertainty: float
    error: float | None
    lower: float | None
    upper: float | None
    model: str = ""

    def in_bounds(self) -> bool:
        return (self.lower is None or self.error >= self.lower) and (self.upper is None or self.error < self.upper)


ASSIGNMENT_COLUMNS = [f.name for f in fields(AssignmentRow)]


def write_assignments(path: str | Path, rows: Iterable[AssignmentRow]) -> None:
    body = [[r.uid, r.landmark, r.fold, r.measure, r.q, r.bin, fmt_float(r.uncertainty), fmt_float(r.error),
             fmt_float(r.lower), fmt_float(r.upper), r.model] for r in rows]
    atomic_write_text(path, csv_text(ASSIGNMENT_COLUMNS, body))


def read_assignments(path: str | Path) -> list[AssignmentRow]:
    rows = []
    for lineno, d in enumerate(read_csv(path, ASSIGNMENT_COLUMNS[:-1]), 2):
        try:
            rows.append(AssignmentRow(
                uid=d["uid"], landmark=d["landmark"], fold=int(d["fold"]), measure=d["measure"], q=int(d["q"]),
                bin=int(d["bin"]), uncertainty=float(d["uncertainty"]), error=_opt_float(d["error"]),
                lower=_opt_float(d["lower"]), upper=_opt_float(d["upper"]), model=d.get("model") or "",
            ))
        except ValueError as exc:
            raise TableError(f"{path}:{lineno}: {exc}") from None
    return rows


# -- failure report ----------------------------------------------------------------------

@dataclass(frozen=True)
class Failure:
    command: str
    key: str
    reason: str


def write_failures(path: str | Path, failures: Sequence[Failure]) -> None:
    atomic_write_text(path, csv_text(["command", "key", "reason"], [list(asdict(f).values()) for f in failures]))


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
