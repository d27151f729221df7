"""Fit -> assign -> bound -> score composition and the BinningModel JSON schema."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

from .binning import BinAssignment, QuantileThresholds, UncErrTuple, assign_bins, fit_thresholds
from .evaluation import FoldMetrics, fold_metrics
from .isotonic import ErrorBounds, IsotonicFit, estimate_bounds, fit_isotonic

POOLED_LANDMARK = "*"


@dataclass(frozen=True)
class BinningModel:
    thresholds: QuantileThresholds
    isotonic: IsotonicFit
    bounds: ErrorBounds
    landmark: str = ""
    measure: str = ""
    fold: int = 0

    @property
    def q_bins(self) -> int:
        return self.thresholds.q_bins

    def to_dict(self) -> dict:
        return {
            "q": self.q_bins,
            "alphas": [_enc(a) for a in self.thresholds.alphas],
            "fit_count": self.thresholds.fit_count,
            "measure": self.measure,
            "landmark": self.landmark,
            "fold": self.fold,
            "isotonic": {
                "knots_x": list(self.isotonic.knots_x),
                "knots_y": list(self.isotonic.knots_y),
                "weights": list(self.isotonic.weights),
            },
            "gammas": [_enc(g) for g in self.bounds.gammas],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinningModel":
        q = int(d["q"])
        iso = d["isotonic"]
        return cls(
            thresholds=QuantileThresholds(q, tuple(_dec(a) for a in d["alphas"]), int(d["fit_count"])),
            isotonic=IsotonicFit(tuple(iso["knots_x"]), tuple(iso["knots_y"]), tuple(iso["weights"])),
            bounds=ErrorBounds(q, tuple(_dec(g) for g in d["gammas"])),
            landmark=str(d.get("landmark", "")),
            measure=str(d.get("measure", "")),
            fold=int(d.get("fold", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BinningModel":
        return cls.from_dict(json.loads(text))


def _enc(v: float):
    return "inf" if v == math.inf else v


def _dec(v) -> float:
    return math.inf if v == "inf" else float(v)


def fit_model(validation: Sequence[UncErrTuple], q: int, landmark: str = "", measure: str = "",
              fold: int = 0) -> BinningModel:
    thresholds = fit_thresholds(validation, q)
    iso = fit_isotonic(validation)
    return BinningModel(thresholds, iso, estimate_bounds(iso, thresholds), landmark, measure, fold)


def apply_model(model: BinningModel, test: Sequence[UncErrTuple]) -> list[BinAssignment]:
    return assign_bins(model.thresholds, test)


def evaluate_fold(model: BinningModel, test: Sequence[UncErrTuple], fold: int | None = None) -> FoldMetrics:
    assignments = apply_model(model, test)
    return fold_metrics(assignments, [t.error for t in test], model.q_bins, bounds=model.bounds,
                        fold=model.fold if fold is None else fold)
