"""Quantile thresholds fitted on validation tuples and half-open bin assignment."""
from __future__ import annotations

import bisect
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class InsufficientDataError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TieWarning(UserWarning):
    """Duplicated uncertainties make the fitted partition unreproducible by intervals."""


@dataclass(frozen=True)
class UncErrTuple:
    id: str
    uncertainty: float
    error: float | None = None


@dataclass(frozen=True)
class QuantileThresholds:
    """``alphas[0] == 0`` and ``alphas[-1] == inf``; bin q covers ``[alphas[q-1], alphas[q])``."""

    q_bins: int
    alphas: tuple[float, ...]
    fit_count: int

    def __post_init__(self):
        a = tuple(float(v) for v in self.alphas)
        object.__setattr__(self, "alphas", a)
        if self.q_bins < 2 or len(a) != self.q_bins + 1:
            raise ValueError(f"need Q >= 2 and Q+1 alphas, got Q={self.q_bins}, {len(a)} alphas")
        if a[0] != 0.0 or a[-1] != math.inf:
            raise ValueError("alphas must start at 0 and end at inf")
        if any(x > y for x, y in zip(a, a[1:])):
            raise ValueError("alphas must be non-decreasing")


@dataclass(frozen=True)
class BinAssignment:
    id: str
    bin: int
    uncertainty: float


def partition_sizes(n: int, q: int) -> list[int]:
    """Near-equal contiguous bin sizes; the first ``n % q`` bins take one extra element."""
    base, extra = divmod(n, q)
    return [base + 1 if i < extra else base for i in range(q)]


def partition_sorted(n: int, q: int) -> list[range]:
    out, start = [], 0
    for size in partition_sizes(n, q):
        out.append(range(start, start + size))
        start += size
    return out


def _uncertainties(values: Iterable) -> np.ndarray:
    arr = np.array([v.uncertainty if isinstance(v, UncErrTuple) else v for v in values], dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise DomainError("uncertainties must be finite")
    if arr.size and arr.min() < 0:
        raise DomainError("uncertainties must be non-negative")
    return arr


def fit_thresholds(validation: Sequence[UncErrTuple] | Sequence[float], q: int) -> QuantileThresholds:
    """Fit ``Q`` equal-mass bins on ``validation`` (tuples or raw uncertainties)."""
    if q < 2:
        raise ValueError(f"Q must be >= 2, got {q}")
    u = _uncertainties(validation)
    n = u.size
    if n < q:
        raise InsufficientDataError(f"{n} validation tuples cannot fill {q} bins")
    order = np.argsort(u, kind="stable")
    ranked = u[order]
    bins = partition_sorted(n, q)
    alphas = [0.0] + [float(ranked[bins[k].start]) for k in range(1, q)] + [math.inf]
    thresholds = QuantileThresholds(q, tuple(alphas), n)

    counts = np.bincount(np.searchsorted(np.asarray(alphas[1:-1]), ranked, side="right"), minlength=q)
    expected = [len(b) for b in bins]
    if counts.tolist() != expected:
        warnings.warn(
            f"tied uncertainties skew bin occupancy: expected {expected}, intervals give {counts.tolist()}",
            TieWarning,
            stacklevel=2,
        )
    return thresholds


def assign_bin(t: QuantileThresholds, uncertainty: float, id: str = "") -> BinAssignment:
    u = float(uncertainty)
    if not math.isfinite(u) or u < 0:
        raise DomainError(f"uncertainty must be finite and non-negative, got {uncertainty}")
    # bisect_right over the interior edges yields q-1 for alpha_{q-1} <= u < alpha_q
    q = bisect.bisect_right(t.alphas, u, 1, t.q_bins)
    return BinAssignment(id, q, u)


def assign_bins(t: QuantileThresholds, tuples: Sequence[UncErrTuple]) -> list[BinAssignment]:
    return [assign_bin(t, x.uncertainty, x.id) for x in tuples]


def bin_occupancy(assignments: Iterable[BinAssignment], q: int) -> list[int]:
    counts = [0] * q
    for a in assignments:
        if not 1 <= a.bin <= q:
            raise ValueError(f"bin {a.bin} outside [1, {q}]")
        counts[a.bin - 1] += 1
    return counts
