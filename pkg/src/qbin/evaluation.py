"""Bin-quality metrics, error-bound accuracy, correlation and significance tests.

Empty bins produce ``nan`` for their accuracy and mean error and are left out
of cross-fold means.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import stdtr

from .binning import BinAssignment, InsufficientDataError, UncErrTuple, partition_sorted
from .isotonic import ErrorBounds

DEFAULT_CDF_THRESHOLDS = tuple(float(v) for v in range(1, 21))
ACCEPTABLE_ERROR_MM = 5.0


class MissingGroundTruthError(ValueError):
    pass


class IdMismatchError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


class DegenerateTestError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthBins:
    q_bins: int
    members: tuple[tuple[str, ...], ...]


def ground_truth_bins(test: Sequence[UncErrTuple], q: int) -> GroundTruthBins:
    """True-error quantile bins: stable ascending sort by error, near-equal contiguous split."""
    if q < 2:
        raise ValueError(f"Q must be >= 2, got {q}")
    if any(t.error is None for t in test):
        raise MissingGroundTruthError("every test tuple needs a ground-truth error")
    if len(test) < q:
        raise InsufficientDataError(f"{len(test)} test tuples cannot fill {q} bins")
    errors = np.array([t.error for t in test], dtype=np.float64)
    order = np.argsort(errors, kind="stable")
    members = tuple(tuple(test[i].id for i in order[r.start:r.stop]) for r in partition_sorted(len(test), q))
    return GroundTruthBins(q, members)


def predicted_members(assignments: Iterable[BinAssignment], q: int) -> list[set[str]]:
    sets: list[set[str]] = [set() for _ in range(q)]
    for a in assignments:
        sets[a.bin - 1].add(a.id)
    return sets


def jaccard(a: set, b: set) -> float:
    union = len(a | b)
    return 1.0 if union == 0 else len(a & b) / union


def jaccard_per_bin(predicted: Sequence[Iterable[str]], truth: GroundTruthBins) -> list[float]:
    if len(predicted) != truth.q_bins:
        raise ValueError(f"expected {truth.q_bins} predicted bins, got {len(predicted)}")
    pred = [set(p) for p in predicted]
    gt = [set(m) for m in truth.members]
    if set().union(*pred) != set().union(*gt):
        raise IdMismatchError("predicted and ground-truth bins cover different ids")
    return [jaccard(p, g) for p, g in zip(pred, gt)]


def _per_bin_fraction(bins: Sequence[int], hits: Sequence[bool], q: int) -> list[float]:
    num = np.zeros(q)
    den = np.zeros(q)
    for b, h in zip(bins, hits):
        den[b - 1] += 1
        num[b - 1] += bool(h)
    with np.errstate(invalid="ignore"):
        return (num / np.where(den > 0, den, np.nan)).tolist()


def bound_accuracy_per_bin(assignments: Sequence[BinAssignment], errors: Sequence[float],
                           bounds: ErrorBounds) -> list[float]:
    """Fraction of each bin whose error lies in that bin's estimated interval (nan if empty)."""
    hits = [bounds.contains(a.bin, e) for a, e in zip(assignments, errors, strict=True)]
    return _per_bin_fraction([a.bin for a in assignments], hits, bounds.q_bins)


def cumulative_error_curve(errors: Sequence[float], thresholds: Sequence[float]) -> list[float]:
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.size and e[0] < 0:
        raise ValueError("errors must be non-negative")
    if e.size == 0:
        return [float("nan")] * len(thresholds)
    return (np.searchsorted(e, np.asarray(thresholds, dtype=np.float64), side="right") / e.size).tolist()


# -- statistics ---------------------------------------------------------------

class StatResult(NamedTuple):
    statistic: float
    p: float
    df: float

    @property
    def significant_at_0_05(self) -> bool:
        return self.p <= 0.05


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(v.size)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _t_pvalue(t: float, df: float, alternative: str) -> float:
    if alternative == "two-sided":
        return float(2.0 * stdtr(df, -abs(t)))
    if alternative == "greater":
        return float(stdtr(df, -t))
    if alternative == "less":
        return float(stdtr(df, t))
    raise ValueError(f"unknown alternative {alternative!r}")


def spearman(x: Sequence[float], y: Sequence[float], alternative: str = "two-sided") -> StatResult:
    """Spearman's rho with a t-approximation p-value on ``n - 2`` degrees of freedom."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size:
        raise ValueError("x and y must have equal length")
    n = x.size
    if n < 3:
        raise InsufficientDataError("Spearman correlation needs n >= 3")
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("all ranks equal on one variable")
    rho = float(dx @ dy) / math.sqrt(sxx * syy)
    rho = max(-1.0, min(1.0, rho))
    df = n - 2
    if abs(rho) == 1.0:
        t = math.copysign(math.inf, rho)
    else:
        t = rho * math.sqrt(df / ((1.0 + rho) * (1.0 - rho)))
    return StatResult(rho, _t_pvalue(t, df, alternative), float(df))


def spearman_rho(tuples: Sequence[UncErrTuple]) -> tuple[float, float]:
    res = spearman([t.uncertainty for t in tuples], [t.error for t in tuples])
    return res.statistic, res.p


def significance_tests(group_a: Sequence[float], group_b: Sequence[float], paired: bool,
                       alternative: str = "two-sided") -> StatResult:
    """Paired t-test, or Welch's unequal-variance t-test when ``paired`` is false."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if paired:
        if a.size != b.size or a.size < 2:
            raise InsufficientDataError("paired test needs two equal-length groups of n >= 2")
        d = a - b
        sd = float(np.std(d, ddof=1))
        if sd == 0.0:
            raise DegenerateTestError("paired differences have zero variance")
        n = d.size
        t = float(np.mean(d)) / (sd / math.sqrt(n))
        df = float(n - 1)
    else:
        if a.size < 2 or b.size < 2:
            raise InsufficientDataError("unpaired test needs n >= 2 in each group")
        va = float(np.var(a, ddof=1)) / a.size
        vb = float(np.var(b, ddof=1)) / b.size
        if va + vb == 0.0:
            raise DegenerateTestError("both groups have zero variance")
        t = (float(np.mean(a)) - float(np.mean(b))) / math.sqrt(va + vb)
        df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return StatResult(t, _t_pvalue(t, df, alternative), df)


# -- per-fold and aggregated results ---------------------------------------------

@dataclass(frozen=True)
class FoldMetrics:
    """Per-bin metrics for one evaluation unit, with the samples they came from."""

    fold: int
    jaccard: tuple[float, ...]
    bound_accuracy: tuple[float, ...]
    bin_mean_error: tuple[float, ...]
    bin_count: tuple[int, ...]
    uncertainties: tuple[float, ...] = ()
    errors: tuple[float, ...] = ()
    bins: tuple[int, ...] = ()

    @property
    def q_bins(self) -> int:
        return len(self.jaccard)


def fold_metrics(assignments: Sequence[BinAssignment], errors: Sequence[float], q: int,
                 bounds: ErrorBounds | None = None, hits: Sequence[bool] | None = None,
                 fold: int = 0) -> FoldMetrics:
    """Score one fold's test predictions; bound hits come from ``bounds`` or are given directly."""
    if len(assignments) != len(errors):
        raise ValueError("one error per assignment required")
    tuples = [UncErrTuple(a.id, a.uncertainty, e) for a, e in zip(assignments, errors)]
    jac = jaccard_per_bin(predicted_members(assignments, q), ground_truth_bins(tuples, q))
    bins = [a.bin for a in assignments]
    if hits is None:
        if bounds is None:
            raise ValueError("need bounds or precomputed hits")
        hits = [bounds.contains(b, e) for b, e in zip(bins, errors)]
    acc = _per_bin_fraction(bins, hits, q)
    err = np.asarray(errors, dtype=np.float64)
    binarr = np.asarray(bins)
    counts = tuple(int(np.sum(binarr == k)) for k in range(1, q + 1))
    means = tuple(float(err[binarr == k].mean()) if c else math.nan for k, c in zip(range(1, q + 1), counts))
    return FoldMetrics(fold, tuple(jac), tuple(acc), means, counts,
                       tuple(a.uncertainty for a in assignments), tuple(float(e) for e in errors), tuple(bins))


def _mean_sd(stack: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Column-wise nan-ignoring mean and sample sd (nan where fewer than two values)."""
    means, sds = [], []
    for col in stack.T:
        v = col[~np.isnan(col)]
        means.append(float(v.mean()) if v.size else math.nan)
        sds.append(float(v.std(ddof=1)) if v.size > 1 else math.nan)
    return tuple(means), tuple(sds)


def _summary(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        return math.nan, math.nan
    return float(values.mean()), float(values.std(ddof=1)) if values.size > 1 else math.nan


@dataclass
class EvaluationReport:
    q_bins: int
    folds: list[FoldMetrics]
    mean: dict[str, tuple[float, ...]]
    sd: dict[str, tuple[float, ...]]
    all_error: tuple[float, float]
    b1_error: tuple[float, float]
    spearman: tuple[float, float] | None
    spearman_per_fold: list[tuple[float, float] | None]
    cdf_thresholds: tuple[float, ...]
    cdf_all: tuple[float, ...]
    cdf_b1: tuple[float, ...]
    significance: dict[str, dict | None]
    pooled: bool = True
    labels: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float):
                return v if math.isfinite(v) else (None if math.isnan(v) else ("inf" if v > 0 else "-inf"))
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return clean({
            "labels": dict(self.labels),
            "q": self.q_bins,
            "pooled": self.pooled,
            "n_folds": len(self.folds),
            "mean": {k: list(v) for k, v in self.mean.items()},
            "sd": {k: list(v) for k, v in self.sd.items()},
            "all_error": {"mean": self.all_error[0], "sd": self.all_error[1]},
            "b1_error": {"mean": self.b1_error[0], "sd": self.b1_error[1]},
            "spearman": None if self.spearman is None else {"rho": self.spearman[0], "p": self.spearman[1]},
            "spearman_per_fold": [None if s is None else {"rho": s[0], "p": s[1]} for s in self.spearman_per_fold],
            "cdf": {"thresholds": list(self.cdf_thresholds), "all": list(self.cdf_all), "b1": list(self.cdf_b1)},
            "significance": self.significance,
            "folds": [
                {"fold": f.fold, "jaccard": list(f.jaccard), "bound_accuracy": list(f.bound_accuracy),
                 "bin_mean_error": list(f.bin_mean_error), "bin_count": list(f.bin_count)}
                for f in self.folds
            ],
        })


METRICS = ("jaccard", "bound_accuracy", "bin_mean_error", "bin_count")


def _safe_spearman(u, e) -> tuple[float, float] | None:
    try:
        res = spearman(u, e)
    except (InsufficientDataError, UndefinedCorrelationError):
        return None
    return res.statistic, res.p


def _bin_tests(errors: np.ndarray, bins: np.ndarray, q: int) -> dict[str, dict | None]:
    """Unpaired Welch tests: B1 and BQ against the pooled inner bins."""
    inner = errors[(bins > 1) & (bins < q)]
    out: dict[str, dict | None] = {}
    for name, sel in (("B1_vs_inner", bins == 1), (f"B{q}_vs_inner", bins == q)):
        try:
            r = significance_tests(errors[sel], inner, paired=False)
        except (InsufficientDataError, DegenerateTestError):
            out[name] = None
            continue
        out[name] = {"t": r.statistic, "p": r.p, "df": r.df, "significant": r.significant_at_0_05}
    return out


def aggregate_folds(per_fold: Sequence[FoldMetrics], pooled: bool = True,
                    cdf_thresholds: Sequence[float] = DEFAULT_CDF_THRESHOLDS,
                    labels: Mapping[str, str] | None = None) -> EvaluationReport:
    """Unweighted cross-fold mean and sample sd per bin, plus pooled error summaries."""
    if not per_fold:
        raise ConfigError("need at least one fold")
    q = per_fold[0].q_bins
    if any(f.q_bins != q for f in per_fold):
        raise ConfigError("folds disagree on Q")
    mean, sd = {}, {}
    for m in METRICS:
        mean[m], sd[m] = _mean_sd(np.array([getattr(f, m) for f in per_fold], dtype=np.float64))

    errors = np.concatenate([np.asarray(f.errors, dtype=np.float64) for f in per_fold])
    unc = np.concatenate([np.asarray(f.uncertainties, dtype=np.float64) for f in per_fold])
    bins = np.concatenate([np.asarray(f.bins, dtype=np.int64) for f in per_fold])

    per_fold_rho = [_safe_spearman(f.uncertainties, f.errors) for f in per_fold]
    if pooled:
        rho = _safe_spearman(unc, errors)
    else:
        valid = [r for r in per_fold_rho if r is not None]
        rho = (float(np.mean([r[0] for r in valid])), math.nan) if valid else None

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return EvaluationReport(
            q_bins=q,
            folds=list(per_fold),
            mean=mean,
            sd=sd,
            all_error=_summary(errors),
            b1_error=_summary(errors[bins == 1]),
            spearman=rho,
            spearman_per_fold=per_fold_rho,
            cdf_thresholds=tuple(float(t) for t in cdf_thresholds),
            cdf_all=tuple(cumulative_error_curve(errors, cdf_thresholds)),
            cdf_b1=tuple(cumulative_error_curve(errors[bins == 1], cdf_thresholds)),
            significance=_bin_tests(errors, bins, q),
            pooled=pooled,
            labels=dict(labels or {}),
        )


def table_one(reports: Mapping[tuple[str, str], EvaluationReport], digits: int = 2) -> list[list[str]]:
    """Rows ``measure x {All, B1}``, one column per model label, cells ``mean ± sd``."""
    measures = sorted({m for m, _ in reports})
    columns = sorted({c for _, c in reports})
    rows = [["method"] + columns]
    for m in measures:
        for tag, attr in (("All", "all_error"), ("B1", "b1_error")):
            row = [f"{m} {tag}"]
            for c in columns:
                r = reports.get((m, c))
                row.append("" if r is None else f"{getattr(r, attr)[0]:.{digits}f} ± {getattr(r, attr)[1]:.{digits}f}")
            rows.append(row)
    return rows
