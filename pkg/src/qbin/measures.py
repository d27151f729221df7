"""Coordinate extraction with S-MHA, E-MHA and E-CPV uncertainties, plus localization error."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .heatmap import EmptyEnsembleError, Heatmap, HeatmapError, RealCoord, ShapeError, argmax_coord, mean_heatmap

DEFAULT_EPSILON = 1e-6


class Measure(str, enum.Enum):
    SMHA = "SMHA"
    EMHA = "EMHA"
    ECPV = "ECPV"


@dataclass(frozen=True)
class Extraction:
    coord: RealCoord
    uncertainty: float
    measure: Measure


def _check_eps(eps: float) -> float:
    if not (0.0 < eps < 1.0):
        raise ValueError(f"epsilon must lie in (0, 1), got {eps}")
    return float(eps)


def mha_uncertainty(max_activation: float, eps: float = DEFAULT_EPSILON) -> float:
    """Inverse peak activation, ``1 / (max + eps)``."""
    if max_activation < 0:
        raise HeatmapError(f"peak activation must be non-negative, got {max_activation}")
    return 1.0 / (max_activation + _check_eps(eps))


def s_mha(h: Heatmap, eps: float = DEFAULT_EPSILON) -> Extraction:
    pix, peak = argmax_coord(h)
    return Extraction(RealCoord(float(pix.row), float(pix.col)), mha_uncertainty(peak, eps), Measure.SMHA)


def e_mha(ensemble: Sequence[Heatmap], eps: float = DEFAULT_EPSILON) -> Extraction:
    pix, peak = argmax_coord(mean_heatmap(ensemble))
    return Extraction(RealCoord(float(pix.row), float(pix.col)), mha_uncertainty(peak, eps), Measure.EMHA)


def coordinate_dispersion(points: np.ndarray) -> tuple[RealCoord, float]:
    """Mean point of a ``(T, 2)`` array and the mean Euclidean distance to it."""
    points = np.asarray(points, dtype=np.float64)
    centre = points.mean(axis=0)
    spread = float(np.mean(np.hypot(points[:, 0] - centre[0], points[:, 1] - centre[1])))
    return RealCoord(float(centre[0]), float(centre[1])), spread


def e_cpv(ensemble: Sequence[Heatmap]) -> Extraction:
    if len(ensemble) == 0:
        raise EmptyEnsembleError("ensemble must contain at least one heatmap")
    shape = ensemble[0].shape
    peaks = []
    for h in ensemble:
        if h.shape != shape:
            raise ShapeError(f"ensemble members disagree on shape: {shape} vs {h.shape}")
        peaks.append(argmax_coord(h)[0])
    coord, spread = coordinate_dispersion(np.array(peaks, dtype=np.float64))
    return Extraction(coord, spread, Measure.ECPV)


def extract(measure: Measure | str, ensemble: Sequence[Heatmap], eps: float = DEFAULT_EPSILON,
            member_index: int = 0) -> Extraction:
    """Dispatch on ``measure``; S-MHA reads only ``ensemble[member_index]``."""
    measure = Measure(measure)
    if measure is Measure.SMHA:
        if not ensemble:
            raise EmptyEnsembleError("ensemble must contain at least one heatmap")
        return s_mha(ensemble[member_index], eps)
    if measure is Measure.EMHA:
        return e_mha(ensemble, eps)
    return e_cpv(ensemble)


def localization_error(pred: Sequence[float], truth: Sequence[float], pixel_spacing: float = 1.0) -> float:
    """Euclidean distance between two pixel coordinates, in millimetres."""
    if not pixel_spacing > 0:
        raise ValueError(f"pixel spacing must be positive, got {pixel_spacing}")
    return math.hypot(pred[0] - truth[0], pred[1] - truth[1]) * pixel_spacing
