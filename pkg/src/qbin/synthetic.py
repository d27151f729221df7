"""Seeded synthetic ensembles of Gaussian heatmaps with known ground truth.

Generative model for one case (all draws from that case's own PCG64 stream,
spawned from ``SeedSequence(seed)`` so results do not depend on scheduling):

1. ``true_coord``: integer pixel, uniform inside the grid minus ``margin``.
2. Two independent log-normal per-case scales: ``difficulty``
   (``exp(N(0, difficulty_sd^2))``) multiplies the epistemic jitter and
   ``ambiguity`` (``exp(N(0, ambiguity_sd^2))``) multiplies the aleatoric spread.
3. With probability ``outlier_rate`` the case is a gross misprediction: every
   member is displaced by ``outlier_displacement`` pixels in an independent
   uniform direction. Otherwise each member gets ``N(0, (jitter*difficulty)^2)``
   per axis.
4. If ``members_share_ambiguity`` each member additionally takes its own draw
   from the aleatoric law, mimicking models trained on ambiguous labels.
5. ``annotated_coord = true_coord + aleatoric draw``.
6. Member peak amplitude ``exp(-|epistemic offset|^2 / (2 confidence_scale^2))``
   times log-normal noise; aleatoric offsets do not lower it.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .binning import UncErrTuple
from .heatmap import GaussianSpec, Heatmap, RealCoord, covariance, render_gaussian
from .measures import DEFAULT_EPSILON, Measure, extract, localization_error

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean 2-D Gaussian noise; ``sigma_minor`` defaults to ``sigma_major``."""

    sigma_major: float = 0.0
    sigma_minor: float | None = None
    orientation: float = 0.0

    def __post_init__(self):
        if self.sigma_minor is None:
            object.__setattr__(self, "sigma_minor", self.sigma_major)
        if not (self.sigma_major >= self.sigma_minor >= 0):
            raise ValueError("need sigma_major >= sigma_minor >= 0")

    @classmethod
    def isotropic_matching(cls, other: "NoiseSpec") -> "NoiseSpec":
        """Isotropic noise with the same total variance (covariance trace) as ``other``."""
        return cls(math.sqrt((other.sigma_major**2 + other.sigma_minor**2) / 2.0))

    @property
    def total_variance(self) -> float:
        return self.sigma_major**2 + self.sigma_minor**2

    def sample(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        if self.sigma_major == 0:
            return np.zeros(2)
        z = rng.standard_normal(2) * np.array([self.sigma_major, self.sigma_minor]) * scale
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        return np.array([c * z[0] - s * z[1], s * z[0] + c * z[1]])

    def cov(self) -> np.ndarray:
        return covariance(self.sigma_major, self.sigma_minor, self.orientation)


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    n_images: int = 200
    grid: tuple[int, int] = (128, 128)
    ensemble_size: int = 5
    peak_sigma: float = 2.0
    epistemic_jitter_sigma: float = 2.0
    aleatoric: NoiseSpec = field(default_factory=lambda: NoiseSpec(1.0))
    outlier_rate: float = 0.0
    outlier_displacement: float = 50.0
    difficulty_sd: float = 0.5
    ambiguity_sd: float = 0.5
    confidence_scale: float = 4.0
    amplitude_noise: float = 0.1
    members_share_ambiguity: bool = True
    margin: int = 8
    max_retries: int = 20
    pixel_spacing: float = 1.0

    def __post_init__(self):
        h, w = self.grid
        if self.n_images < 0 or self.ensemble_size < 1:
            raise ValueError("n_images must be >= 0 and ensemble_size >= 1")
        if h < 1 or w < 1 or 2 * self.margin >= min(h, w):
            raise ValueError(f"grid {self.grid} too small for margin {self.margin}")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must lie in [0, 1]")
        if self.peak_sigma <= 0 or self.outlier_displacement <= 0 or self.confidence_scale <= 0:
            raise ValueError("peak_sigma, outlier_displacement and confidence_scale must be positive")
        if min(self.epistemic_jitter_sigma, self.difficulty_sd, self.ambiguity_sd, self.amplitude_noise) < 0:
            raise ValueError("noise scales must be non-negative")
        if self.pixel_spacing <= 0:
            raise ValueError("pixel_spacing must be positive")


@dataclass(frozen=True)
class SyntheticCase:
    case_id: str
    true_coord: RealCoord
    annotated_coord: RealCoord
    ensemble: tuple[Heatmap, ...]
    member_peaks: tuple[RealCoord, ...]
    is_outlier: bool


def _inside(p: np.ndarray, h: int, w: int) -> bool:
    return 0 <= p[0] <= h - 1 and 0 <= p[1] <= w - 1


def _make_case(cfg: SyntheticConfig, index: int, seq: np.random.SeedSequence) -> SyntheticCase:
    rng = np.random.Generator(np.random.PCG64(seq))
    h, w = cfg.grid
    true = np.array([rng.integers(cfg.margin, h - cfg.margin), rng.integers(cfg.margin, w - cfg.margin)],
                    dtype=np.float64)
    difficulty = math.exp(cfg.difficulty_sd * rng.standard_normal())
    ambiguity = math.exp(cfg.ambiguity_sd * rng.standard_normal())
    is_outlier = bool(rng.random() < cfg.outlier_rate)
    annotated = true + cfg.aleatoric.sample(rng, ambiguity)

    peaks, amplitudes = [], []
    for _ in range(cfg.ensemble_size):
        for _attempt in range(cfg.max_retries + 1):
            if is_outlier:
                theta = rng.uniform(0.0, 2.0 * math.pi)
                epistemic = cfg.outlier_displacement * np.array([math.cos(theta), math.sin(theta)])
            else:
                epistemic = rng.standard_normal(2) * cfg.epistemic_jitter_sigma * difficulty
            offset = cfg.aleatoric.sample(rng, ambiguity) if cfg.members_share_ambiguity else np.zeros(2)
            peak = true + epistemic + offset
            if _inside(peak, h, w):
                break
        else:
            log.warning("case %d: member peak %s outside %dx%d grid after %d retries; clamping",
                        index, peak.tolist(), h, w, cfg.max_retries)
            peak = np.clip(peak, [0, 0], [h - 1, w - 1])
        amp = math.exp(-float(epistemic @ epistemic) / (2.0 * cfg.confidence_scale**2))
        if cfg.amplitude_noise:
            amp *= math.exp(cfg.amplitude_noise * rng.standard_normal())
        peaks.append(RealCoord(float(peak[0]), float(peak[1])))
        amplitudes.append(amp)

    ensemble = tuple(
        Heatmap(a * render_gaussian(GaussianSpec(p, cfg.peak_sigma), h, w).activations)
        for p, a in zip(peaks, amplitudes)
    )
    return SyntheticCase(
        case_id=f"case{index:05d}",
        true_coord=RealCoord(float(true[0]), float(true[1])),
        annotated_coord=RealCoord(float(annotated[0]), float(annotated[1])),
        ensemble=ensemble,
        member_peaks=tuple(peaks),
        is_outlier=is_outlier,
    )


def iter_cases(cfg: SyntheticConfig, workers: int = 1) -> Iterator[SyntheticCase]:
    """Cases in index order; output is identical for any ``workers``."""
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_images)
    if workers <= 1:
        for i, s in enumerate(seqs):
            yield _make_case(cfg, i, s)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(lambda args: _make_case(cfg, *args), enumerate(seqs))


def generate_cases(cfg: SyntheticConfig, workers: int = 1) -> list[SyntheticCase]:
    return list(iter_cases(cfg, workers))


@dataclass(frozen=True)
class SyntheticRecord:
    """One case scored under one measure."""

    case_id: str
    measure: Measure
    coord: RealCoord
    uncertainty: float
    error: float
    is_outlier: bool

    def as_tuple(self) -> UncErrTuple:
        return UncErrTuple(self.case_id, self.uncertainty, self.error)


def extract_records(cfg: SyntheticConfig, measures: Sequence[Measure | str] = tuple(Measure),
                    eps: float = DEFAULT_EPSILON, member_index: int = 0,
                    workers: int = 1) -> dict[Measure, list[SyntheticRecord]]:
    """Generate cases and score each under ``measures`` without keeping the heatmaps."""
    measures = [Measure(m) for m in measures]
    out: dict[Measure, list[SyntheticRecord]] = {m: [] for m in measures}
    for case in iter_cases(cfg, workers):
        for m in measures:
            ext = extract(m, case.ensemble, eps, member_index)
            err = localization_error(ext.coord, case.annotated_coord, cfg.pixel_spacing)
            out[m].append(SyntheticRecord(case.case_id, m, ext.coord, ext.uncertainty, err, case.is_outlier))
    return out


def split_folds(n: int, n_folds: int = 1, validation_fraction: float = 0.5) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(validation_idx, test_idx)`` pairs.

    One fold: the first ``validation_fraction`` of cases validate, the rest test.
    ``k > 1`` folds: contiguous parts; fold ``i`` tests on part ``i`` and
    validates on part ``i + 1`` (cyclically).
    """
    idx = np.arange(n)
    if n_folds <= 1:
        cut = int(round(n * validation_fraction))
        return [(idx[:cut], idx[cut:])]
    parts = np.array_split(idx, n_folds)
    return [(parts[(i + 1) % n_folds], parts[i]) for i in range(n_folds)]


def end_to_end_synthetic(cfg: SyntheticConfig, q: int, measure: Measure | str = Measure.ECPV,
                         n_folds: int = 1, validation_fraction: float = 0.5,
                         eps: float = DEFAULT_EPSILON, member_index: int = 0, workers: int = 1):
    """Extraction, fit, assignment, bounds and evaluation on one synthetic run."""
    return run_synthetic(cfg, q, [measure], n_folds, validation_fraction, eps, member_index, workers)[Measure(measure)]


def run_synthetic(cfg: SyntheticConfig, q: int, measures: Sequence[Measure | str] = tuple(Measure),
                  n_folds: int = 1, validation_fraction: float = 0.5, eps: float = DEFAULT_EPSILON,
                  member_index: int = 0, workers: int = 1, records=None):
    """Evaluation reports for several measures over the same generated cases."""
    from .evaluation import aggregate_folds
    from .pipeline import evaluate_fold, fit_model

    records = records if records is not None else extract_records(cfg, measures, eps, member_index, workers)
    reports = {}
    for m in (Measure(x) for x in measures):
        tuples = [r.as_tuple() for r in records[m]]
        folds = []
        for k, (val, test) in enumerate(split_folds(len(tuples), n_folds, validation_fraction)):
            model = fit_model([tuples[i] for i in val], q, measure=m.value, fold=k)
            folds.append(evaluate_fold(model, [tuples[i] for i in test], fold=k))
        reports[m] = aggregate_folds(folds, labels={"measure": m.value, "source": "synthetic", "seed": str(cfg.seed)})
    return reports
