"""Isotonic least squares by pool-adjacent-violators, and per-bin error bounds."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .binning import InsufficientDataError, QuantileThresholds, UncErrTuple


@dataclass(frozen=True)
class IsotonicFit:
    """Knots of the fitted non-decreasing step values, one per distinct uncertainty."""

    knots_x: tuple[float, ...]
    knots_y: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        for name in ("knots_x", "knots_y", "weights"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not self.knots_x or len(self.knots_x) != len(self.knots_y):
            raise ValueError("knots_x and knots_y must be non-empty and equally long")
        if any(a >= b for a, b in zip(self.knots_x, self.knots_x[1:])):
            raise ValueError("knots_x must be strictly ascending")
        if any(a > b for a, b in zip(self.knots_y, self.knots_y[1:])):
            raise ValueError("knots_y must be non-decreasing")


@dataclass(frozen=True)
class ErrorBounds:
    """Estimated errors at each threshold; ``gammas[0]`` and ``gammas[-1]`` are open ends."""

    q_bins: int
    gammas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if len(self.gammas) != self.q_bins + 1:
            raise ValueError("need Q+1 gammas")

    def interval(self, q: int) -> tuple[float | None, float | None]:
        """``(lower, upper)`` for bin ``q``; ``None`` marks the open side of an edge bin."""
        if not 1 <= q <= self.q_bins:
            raise ValueError(f"bin {q} outside [1, {self.q_bins}]")
        lower = None if q == 1 else self.gammas[q - 1]
        upper = None if q == self.q_bins else self.gammas[q]
        return lower, upper

    def contains(self, q: int, error: float) -> bool:
        lower, upper = self.interval(q)
        return (lower is None or error >= lower) and (upper is None or error < upper)


def pava(y: Sequence[float], w: Sequence[float] | None = None) -> np.ndarray:
    """Non-decreasing weighted least-squares fit to ``y`` taken in the given order."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    # blocks as parallel stacks: weighted mean, total weight, element count
    means: list[float] = []
    weights: list[float] = []
    counts: list[int] = []
    for yi, wi in zip(y, w):
        m, ww, c = float(yi), float(wi), 1
        while means and means[-1] > m:
            pm, pw, pc = means.pop(), weights.pop(), counts.pop()
            tot = pw + ww
            m = (pm * pw + m * ww) / tot
            ww, c = tot, pc + c
        means.append(m)
        weights.append(ww)
        counts.append(c)
    return np.repeat(means, counts)


def fit_isotonic(observations: Sequence[UncErrTuple], weights: Sequence[float] | None = None) -> IsotonicFit:
    """Monotone error-vs-uncertainty fit; equal uncertainties are merged before pooling."""
    if len(observations) == 0:
        raise InsufficientDataError("isotonic fit needs at least one observation")
    x = np.array([o.uncertainty for o in observations], dtype=np.float64)
    y = np.array([o.error for o in observations], dtype=np.float64)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive, finite and one per observation")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("observations must be finite (errors required)")

    order = np.argsort(x, kind="stable")
    xs, ys, ws = x[order], y[order], w[order]
    ux, start = np.unique(xs, return_index=True)
    wsum = np.add.reduceat(ws, start)
    ymean = np.add.reduceat(ws * ys, start) / wsum
    fitted = pava(ymean, wsum)
    return IsotonicFit(tuple(ux), tuple(fitted), tuple(w))


def eval_isotonic(fit: IsotonicFit, x: float | np.ndarray) -> float | np.ndarray:
    """Piecewise-linear between knots, clamped to the end values outside them (and at inf)."""
    kx = np.asarray(fit.knots_x)
    ky = np.asarray(fit.knots_y)
    xa = np.asarray(x, dtype=np.float64)
    out = np.interp(np.clip(xa, kx[0], kx[-1]), kx, ky)
    return float(out) if out.ndim == 0 else out


def estimate_bounds(fit: IsotonicFit, thresholds: QuantileThresholds) -> ErrorBounds:
    gammas = [eval_isotonic(fit, a) for a in thresholds.alphas]
    return ErrorBounds(thresholds.q_bins, tuple(gammas))
