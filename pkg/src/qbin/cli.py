"""``qbin`` command line: simulate, extract, fit, bin, evaluate, report.

Exit codes: 0 success, 2 partial (failure report non-empty), 1 fatal.
Flags override values from a ``--config`` JSON file, which override defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import zlib
from collections import defaultdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .binning import BinAssignment, InsufficientDataError, UncErrTuple, assign_bin
from .evaluation import DEFAULT_CDF_THRESHOLDS, aggregate_folds, fold_metrics
from .heatmap import FormatError, HeatmapError, heatmap_bytes, read_heatmap
from .measures import DEFAULT_EPSILON, Measure, extract, localization_error
from .pipeline import POOLED_LANDMARK, BinningModel, fit_model
from .synthetic import NoiseSpec, SyntheticConfig, iter_cases
from .tables import (
    AssignmentRow,
    Failure,
    ManifestRow,
    TableError,
    TupleRow,
    atomic_write_bytes,
    atomic_write_text,
    csv_text,
    dump_json,
    fmt_float,
    read_assignments,
    read_manifest,
    read_tuples,
    tuple_row_sort_key,
    write_assignments,
    write_failures,
    write_manifest,
    write_tuples,
)

log = logging.getLogger("qbin")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2

DEFAULTS: dict[str, Any] = {
    "out_dir": "qbin_out",
    "seed": 0,
    "q": [5],
    "epsilon": DEFAULT_EPSILON,
    "pixel_spacing_mm": 1.0,
    "measures": [m.value for m in Measure],
    "pool_landmarks": False,
    "member_index": 0,
    "member_random": False,
    "cdf_thresholds": list(DEFAULT_CDF_THRESHOLDS),
    "per_fold_correlation": False,
    "column_map": None,
    "holdout_fraction": None,
    "model_label": "",
    "workers": 1,
    # simulate
    "n_images": 200,
    "grid": [128, 128],
    "ensemble_size": 5,
    "peak_sigma": 2.0,
    "jitter": 2.0,
    "aleatoric_major": 1.0,
    "aleatoric_minor": None,
    "aleatoric_orientation": 0.0,
    "outlier_rate": 0.0,
    "outlier_displacement": 50.0,
    "difficulty_sd": 0.5,
    "ambiguity_sd": 0.5,
    "validation_fraction": 0.5,
    "heatmap_format": "qbhm",
    "landmark": "L0",
}


def _safe(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", s) or "_"


class _Run:
    """Accumulates failures for one command and resolves the exit code."""

    def __init__(self, command: str, out_dir: Path):
        self.command = command
        self.out_dir = out_dir
        self.failures: list[Failure] = []

    def fail(self, key: str, reason: str) -> None:
        log.warning("%s: %s: %s", self.command, key, reason)
        self.failures.append(Failure(self.command, key, reason))

    def finish(self) -> int:
        if not self.failures:
            return EXIT_OK
        write_failures(self.out_dir / f"failures_{self.command}.csv", self.failures)
        return EXIT_PARTIAL


# -- simulate ---------------------------------------------------------------------

def cmd_simulate(o: dict) -> int:
    out = Path(o["out_dir"])
    cfg = SyntheticConfig(
        seed=int(o["seed"]), n_images=int(o["n_images"]), grid=tuple(o["grid"]),
        ensemble_size=int(o["ensemble_size"]), peak_sigma=float(o["peak_sigma"]),
        epistemic_jitter_sigma=float(o["jitter"]),
        aleatoric=NoiseSpec(float(o["aleatoric_major"]),
                            None if o["aleatoric_minor"] is None else float(o["aleatoric_minor"]),
                            float(o["aleatoric_orientation"])),
        outlier_rate=float(o["outlier_rate"]), outlier_displacement=float(o["outlier_displacement"]),
        difficulty_sd=float(o["difficulty_sd"]), ambiguity_sd=float(o["ambiguity_sd"]),
        pixel_spacing=float(o["pixel_spacing_mm"]),
    )
    ext = ".csv" if o["heatmap_format"] == "csv" else ".qbhm"
    n_val = int(round(cfg.n_images * float(o["validation_fraction"])))
    rows = []
    for i, case in enumerate(iter_cases(cfg, int(o["workers"]))):
        split = "validation" if i < n_val else "test"
        for t, h in enumerate(case.ensemble):
            rel = f"heatmaps/{case.case_id}_m{t}{ext}"
            atomic_write_bytes(out / rel, heatmap_bytes(h, rel))
            rows.append(ManifestRow(case.case_id, o["landmark"], 0, split, t, rel,
                                    case.annotated_coord.row, case.annotated_coord.col,
                                    case.true_coord.row, case.true_coord.col))
    write_manifest(out / "manifest.csv", rows)
    log.info("wrote %d cases to %s", cfg.n_images, out)
    return EXIT_OK


# -- extract -------------------------------------------------------------------------

def cmd_extract(o: dict) -> int:
    manifest_path = Path(o["manifest"])
    out = Path(o["out_dir"])
    run = _Run("extract", out)
    measures = [Measure(m) for m in o["measures"]]
    eps = float(o["epsilon"])
    spacing = float(o["pixel_spacing_mm"])
    cases: dict[tuple[str, str], list[ManifestRow]] = defaultdict(list)
    for r in read_manifest(manifest_path):
        cases[(r.uid, r.landmark)].append(r)

    sizes = [len({r.member for r in v}) for v in cases.values()]
    expected_t = max(set(sizes), key=sizes.count) if sizes else 0
    rng = np.random.default_rng(int(o["seed"]))
    rows: list[TupleRow] = []
    for key in sorted(cases):
        members = sorted(cases[key], key=lambda r: r.member)
        label = f"{key[0]}/{key[1]}"
        member_idx = int(rng.integers(len(members))) if o["member_random"] else int(o["member_index"])
        reason = None
        if [m.member for m in members] != list(range(len(members))):
            reason = "member indices must be 0..T-1 without repeats"
        elif len(members) != expected_t:
            reason = f"ensemble size {len(members)} disagrees with the manifest's T={expected_t}"
        elif not 0 <= member_idx < len(members):
            reason = f"member index {member_idx} out of range for T={len(members)}"
        ensemble = []
        if reason is None:
            try:
                ensemble = [read_heatmap(manifest_path.parent / m.path) for m in members]
            except (OSError, FormatError, HeatmapError) as exc:
                reason = f"cannot read heatmap: {exc}"
        if reason is not None:
            for m in measures:
                run.fail(f"{label}/{m.value}", reason)
            continue
        head = members[0]
        gt = (head.gt_row, head.gt_col) if None not in (head.gt_row, head.gt_col) else None
        for m in measures:
            try:
                ex = extract(m, ensemble, eps, member_idx)
            except HeatmapError as exc:
                run.fail(f"{label}/{m.value}", str(exc))
                continue
            err = None if gt is None else localization_error(ex.coord, gt, spacing)
            rows.append(TupleRow(head.uid, head.landmark, head.fold, head.split, m.value, ex.uncertainty, err,
                                 ex.coord.row, ex.coord.col, None if gt is None else gt[0],
                                 None if gt is None else gt[1], o["model_label"]))
    rows.sort(key=tuple_row_sort_key)
    write_tuples(Path(o.get("out") or out / "tuples.csv"), rows)
    return run.finish()


# -- fit ---------------------------------------------------------------------------------

def _row_error(r: TupleRow, spacing: float) -> float | None:
    if r.error is not None:
        return r.error
    if r.has_coords:
        return localization_error((r.pred_row, r.pred_col), (r.gt_row, r.gt_col), spacing)
    return None


def _fit_group_key(r: TupleRow, pool: bool) -> tuple[str, str, str, int]:
    return (r.model, POOLED_LANDMARK if pool else r.landmark, r.measure, r.fold)


def model_filename(model: str, landmark: str, measure: str, fold: int, q: int) -> str:
    return f"model__{_safe(model or 'default')}__{_safe(landmark)}__{_safe(measure)}__fold{fold}__q{q}.json"


def _holdout(rows: list[TupleRow], fraction: float, seed: int, key: tuple) -> list[TupleRow]:
    """Seeded carve-out of ``fraction`` of a group's training rows as validation."""
    if not rows:
        return []
    salt = zlib.crc32(json.dumps(list(key)).encode())
    rng = np.random.default_rng([seed, salt])
    k = int(round(fraction * len(rows)))
    pick = sorted(rng.choice(len(rows), size=k, replace=False).tolist())
    return [rows[i] for i in pick]


def cmd_fit(o: dict) -> int:
    out = Path(o["out_dir"])
    run = _Run("fit", out)
    spacing = float(o["pixel_spacing_mm"])
    pool = bool(o["pool_landmarks"])
    rows = read_tuples(o["tuples"], o["column_map"])
    groups: dict[tuple, list[TupleRow]] = defaultdict(list)
    train: dict[tuple, list[TupleRow]] = defaultdict(list)
    for r in sorted(rows, key=tuple_row_sort_key):
        if r.split == "validation":
            groups[_fit_group_key(r, pool)].append(r)
        elif r.split == "train":
            train[_fit_group_key(r, pool)].append(r)
    if o["holdout_fraction"] is not None:
        for key, trows in sorted(train.items()):
            groups[key].extend(_holdout(trows, float(o["holdout_fraction"]), int(o["seed"]), key))

    models_dir = Path(o.get("models") or out / "models")
    for key in sorted(groups):
        model, landmark, measure, fold = key
        tuples = []
        for r in groups[key]:
            err = _row_error(r, spacing)
            if err is None:
                run.fail(f"{model}/{landmark}/{measure}/fold{fold}/{r.uid}", "validation row has no error")
                continue
            tuples.append(UncErrTuple(r.uid, r.uncertainty, err))
        for q in sorted(int(x) for x in o["q"]):
            label = f"{model}/{landmark}/{measure}/fold{fold}/q{q}"
            try:
                fitted = fit_model(tuples, q, landmark, measure, fold)
            except InsufficientDataError as exc:
                run.fail(label, str(exc))
                continue
            doc = fitted.to_dict()
            doc["model"] = model
            atomic_write_text(models_dir / model_filename(model, landmark, measure, fold, q), dump_json(doc))
    return run.finish()


def load_models(models_dir: str | Path) -> dict[tuple[str, str, str, int, int], BinningModel]:
    out = {}
    for p in sorted(Path(models_dir).glob("*.json")):
        doc = json.loads(p.read_text(encoding="utf-8"))
        m = BinningModel.from_dict(doc)
        out[(doc.get("model", ""), m.landmark, m.measure, m.fold, m.q_bins)] = m
    return out


# -- bin -------------------------------------------------------------------------------------

def cmd_bin(o: dict) -> int:
    out = Path(o["out_dir"])
    run = _Run("bin", out)
    spacing = float(o["pixel_spacing_mm"])
    models = load_models(o.get("models") or out / "models")
    by_group: dict[tuple, list[tuple[int, BinningModel]]] = defaultdict(list)
    for (model, landmark, measure, fold, q), m in sorted(models.items()):
        by_group[(model, landmark, measure, fold)].append((q, m))
    wanted_q = {int(x) for x in o["q"]} if o.get("q_explicit") else None

    rows: list[AssignmentRow] = []
    for r in sorted(read_tuples(o["tuples"], o["column_map"]), key=tuple_row_sort_key):
        if r.split != "test":
            continue
        key = (r.model, r.landmark, r.measure, r.fold)
        candidates = by_group.get(key) or by_group.get((r.model, POOLED_LANDMARK, r.measure, r.fold)) or []
        if wanted_q is not None:
            candidates = [(q, m) for q, m in candidates if q in wanted_q]
        if not candidates:
            run.fail(f"{r.model}/{r.landmark}/{r.measure}/fold{r.fold}/{r.uid}", "no fitted model for this group")
            continue
        err = _row_error(r, spacing)
        for q, m in candidates:
            a = assign_bin(m.thresholds, r.uncertainty, r.uid)
            lower, upper = m.bounds.interval(a.bin)
            rows.append(AssignmentRow(r.uid, r.landmark, r.fold, r.measure, q, a.bin, r.uncertainty, err,
                                      lower, upper, r.model))
    rows.sort(key=lambda a: (a.model, a.measure, a.q, a.landmark, a.fold, a.uid))
    write_assignments(Path(o.get("out") or out / "assignments.csv"), rows)
    return run.finish()


# -- evaluate ---------------------------------------------------------------------------------

def _bins_rows(key, report) -> list[list[str]]:
    model, measure, q = key
    rows = []
    for b in range(q):
        rows.append([model, measure, q, b + 1] + [
            fmt_float(report.__getattribute__(part)[metric][b])
            for metric in ("jaccard", "bound_accuracy", "bin_mean_error", "bin_count") for part in ("mean", "sd")
        ])
    return rows


BINS_HEADER = ["model", "measure", "q", "bin", "jaccard_mean", "jaccard_sd", "bound_accuracy_mean",
               "bound_accuracy_sd", "bin_mean_error_mean", "bin_mean_error_sd", "bin_count_mean", "bin_count_sd"]


def table_one_from_docs(docs: Sequence[dict], digits: int = 2) -> list[list[str]]:
    cells = {}
    for d in docs:
        lab = d["labels"]
        cells[(lab["measure"], lab.get("model") or "default")] = d
    measures = sorted({m for m, _ in cells})
    columns = sorted({c for _, c in cells})

    def cell(s: dict) -> str:
        mean, sd = s["mean"], s["sd"]
        if mean is None:
            return ""
        return f"{mean:.{digits}f} ± {sd:.{digits}f}" if sd is not None else f"{mean:.{digits}f}"

    rows = [["method"] + columns]
    for m in measures:
        for tag, attr in (("All", "all_error"), ("B1", "b1_error")):
            rows.append([f"{m} {tag}"] + [cell(cells[(m, c)][attr]) if (m, c) in cells else "" for c in columns])
    return rows


def cmd_evaluate(o: dict) -> int:
    out = Path(o["out_dir"])
    run = _Run("evaluate", out)
    thresholds = [float(t) for t in o["cdf_thresholds"]]
    groups: dict[tuple, dict[tuple, list[AssignmentRow]]] = defaultdict(lambda: defaultdict(list))
    for r in read_assignments(o["assignments"]):
        if r.error is None:
            run.fail(f"{r.model}/{r.landmark}/{r.measure}/fold{r.fold}/q{r.q}/{r.uid}", "missing ground-truth error")
            continue
        groups[(r.model, r.measure, r.q)][(r.landmark, r.fold)].append(r)

    docs, bins_rows, cdf_rows = [], [], []
    for key in sorted(groups):
        model, measure, q = key
        per_fold = []
        for unit_idx, (unit, arows) in enumerate(sorted(groups[key].items())):
            landmark, fold = unit
            if len(arows) < q:
                run.fail(f"{model}/{landmark}/{measure}/fold{fold}/q{q}", f"{len(arows)} test rows cannot fill {q} bins")
                continue
            assignments = [BinAssignment(a.uid, a.bin, a.uncertainty) for a in arows]
            per_fold.append(fold_metrics(assignments, [a.error for a in arows], q,
                                         hits=[a.in_bounds() for a in arows], fold=fold))
        if not per_fold:
            continue
        report = aggregate_folds(per_fold, pooled=not o["per_fold_correlation"], cdf_thresholds=thresholds,
                                 labels={"model": model, "measure": measure, "q": str(q)})
        doc = report.to_dict()
        doc["units"] = [f"{lm}/fold{f}" for (lm, f), rows_ in sorted(groups[key].items()) if len(rows_) >= q]
        docs.append(doc)
        atomic_write_text(out / "reports" / f"report__{_safe(model or 'default')}__{_safe(measure)}__q{q}.json",
                          dump_json(doc))
        bins_rows.extend(_bins_rows(key, report))
        for subset, fr in (("All", report.cdf_all), ("B1", report.cdf_b1)):
            cdf_rows.extend([model, measure, q, subset, fmt_float(t), fmt_float(f)] for t, f in zip(thresholds, fr))

    atomic_write_text(out / "bins.csv", csv_text(BINS_HEADER, bins_rows))
    atomic_write_text(out / "cdf.csv", csv_text(["model", "measure", "q", "subset", "threshold_mm", "fraction"],
                                               cdf_rows))
    for q in sorted({int(d["q"]) for d in docs}):
        table = table_one_from_docs([d for d in docs if int(d["q"]) == q])
        atomic_write_text(out / f"table_one_q{q}.csv", csv_text(table[0], table[1:]))
    return run.finish()


# -- report ------------------------------------------------------------------------------------------

def cmd_report(o: dict) -> int:
    out = Path(o["out_dir"])
    src = Path(o.get("reports") or out / "reports")
    docs = [json.loads(p.read_text(encoding="utf-8")) for p in sorted(src.glob("*.json"))]
    if not docs:
        log.error("no reports found in %s", src)
        return EXIT_FATAL
    for q in sorted({int(d["q"]) for d in docs}):
        table = table_one_from_docs([d for d in docs if int(d["q"]) == q])
        atomic_write_text(out / f"table_one_q{q}.csv", csv_text(table[0], table[1:]))
        widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
        print(f"Localization error (mm), Q={q}")
        for row in table:
            print("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        for d in (d for d in docs if int(d["q"]) == q):
            lab = d["labels"]
            jac = ", ".join("-" if v is None else f"{v:.2f}" for v in d["mean"]["jaccard"])
            rho = d["spearman"]
            rho_s = "n/a" if rho is None else f"{rho['rho']:.3f}"
            print(f"{lab.get('model') or 'default'} {lab['measure']}: Jaccard per bin [{jac}], Spearman rho {rho_s}")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------------------

COMMANDS = {
    "simulate": cmd_simulate,
    "extract": cmd_extract,
    "fit": cmd_fit,
    "bin": cmd_bin,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON file with option values (flags win)")
    p.add_argument("--out-dir", default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--pixel-spacing-mm", type=float, default=S)
    p.add_argument("-v", "--verbose", action="store_true", default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="qbin", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qbin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write synthetic heatmap ensembles and a manifest")
    _add_common(p)
    p.add_argument("--n-images", type=int, default=S)
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"), default=S)
    p.add_argument("--ensemble-size", type=int, default=S)
    p.add_argument("--peak-sigma", type=float, default=S)
    p.add_argument("--jitter", type=float, default=S, help="epistemic jitter sd (pixels)")
    p.add_argument("--aleatoric-major", type=float, default=S)
    p.add_argument("--aleatoric-minor", type=float, default=S)
    p.add_argument("--aleatoric-orientation", type=float, default=S)
    p.add_argument("--outlier-rate", type=float, default=S)
    p.add_argument("--outlier-displacement", type=float, default=S)
    p.add_argument("--difficulty-sd", type=float, default=S)
    p.add_argument("--ambiguity-sd", type=float, default=S)
    p.add_argument("--validation-fraction", type=float, default=S)
    p.add_argument("--heatmap-format", choices=["qbhm", "csv"], default=S)
    p.add_argument("--landmark", default=S)
    p.add_argument("--workers", type=int, default=S)

    p = sub.add_parser("extract", help="heatmap manifest -> tuple table")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=S, help="tuple CSV path (default OUT_DIR/tuples.csv)")
    p.add_argument("--measures", nargs="+", choices=[m.value for m in Measure], default=S)
    p.add_argument("--epsilon", type=float, default=S)
    p.add_argument("--member-index", type=int, default=S)
    p.add_argument("--member-random", action="store_true", default=S)
    p.add_argument("--model-label", default=S)

    p = sub.add_parser("fit", help="validation tuples -> BinningModel JSON files")
    _add_common(p)
    p.add_argument("--tuples", required=True)
    p.add_argument("--models", default=S, help="output directory (default OUT_DIR/models)")
    p.add_argument("--q", type=int, nargs="+", default=S)
    p.add_argument("--pool-landmarks", action="store_true", default=S)
    p.add_argument("--holdout-fraction", type=float, default=S)
    p.add_argument("--column-map", default=S, help="JSON file mapping canonical to source column names")

    p = sub.add_parser("bin", help="test tuples + models -> assignment table")
    _add_common(p)
    p.add_argument("--tuples", required=True)
    p.add_argument("--models", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--q", type=int, nargs="+", default=S)
    p.add_argument("--column-map", default=S)

    p = sub.add_parser("evaluate", help="assignment table -> reports")
    _add_common(p)
    p.add_argument("--assignments", required=True)
    p.add_argument("--cdf-thresholds", type=float, nargs="+", default=S)
    p.add_argument("--per-fold-correlation", action="store_true", default=S)

    p = sub.add_parser("report", help="summarise evaluation reports as a mean ± sd CSV table")
    _add_common(p)
    p.add_argument("--reports", default=S, help="directory of report JSON files")
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    given = vars(args)
    opts = dict(DEFAULTS)
    if "config" in given:
        file_opts = json.loads(Path(given["config"]).read_text(encoding="utf-8"))
        opts.update({k.replace("-", "_"): v for k, v in file_opts.items()})
    opts.update(given)
    opts["q_explicit"] = "q" in given or ("config" in given and "q" in opts)
    if isinstance(opts.get("q"), int):
        opts["q"] = [opts["q"]]
    if any(int(q) < 2 for q in opts["q"]):
        raise ValueError("every Q must be >= 2")
    if float(opts["pixel_spacing_mm"]) <= 0:
        raise ValueError("pixel spacing must be positive")
    if isinstance(opts.get("column_map"), str):
        opts["column_map"] = json.loads(Path(opts["column_map"]).read_text(encoding="utf-8"))
    return opts


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except (OSError, ValueError, TableError, KeyError) as exc:
        log.error("%s: %s", args.command, exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
