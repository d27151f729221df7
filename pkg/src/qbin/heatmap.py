"""Heatmap grids: Gaussian synthesis, argmax decoding, ensemble averaging and file I/O.

Coordinates are ``(row, col)`` in pixels throughout. Physical units only
appear in :mod:`qbin.measures`.
"""
from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

QBHM_MAGIC = b"QBHM"
_QBHM_HEADER = struct.Struct("<4sII")


class HeatmapError(ValueError):
    """Invalid heatmap data or an inconsistent ensemble."""


class ShapeError(HeatmapError):
    pass


class EmptyEnsembleError(HeatmapError):
    pass


class InvalidSpecError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed heatmap file."""


class PixelCoord(NamedTuple):
    row: int
    col: int


class RealCoord(NamedTuple):
    row: float
    col: float


class Amplitude(str, enum.Enum):
    PEAK_ONE = "peak_one"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class Heatmap:
    """A ``height x width`` grid of finite activations for one landmark on one image."""

    activations: np.ndarray

    def __post_init__(self):
        a = np.array(self.activations, dtype=np.float64, copy=True)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise HeatmapError(f"heatmap must be a non-empty 2-D grid, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise HeatmapError("heatmap activations must be finite")
        a.flags.writeable = False
        object.__setattr__(self, "activations", a)

    @property
    def height(self) -> int:
        return self.activations.shape[0]

    @property
    def width(self) -> int:
        return self.activations.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.activations.shape

    def __eq__(self, other):
        if not isinstance(other, Heatmap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.activations, other.activations)

    __hash__ = None


@dataclass(frozen=True)
class GaussianSpec:
    """Shape of a (possibly anisotropic) 2-D Gaussian blob.

    ``orientation`` is the angle in radians of the major axis, measured from
    the row axis towards the column axis.
    """

    center: RealCoord
    sigma_major: float
    sigma_minor: float | None = None
    orientation: float = 0.0
    amplitude_mode: Amplitude = Amplitude.PEAK_ONE

    def __post_init__(self):
        object.__setattr__(self, "center", RealCoord(float(self.center[0]), float(self.center[1])))
        if self.sigma_minor is None:
            object.__setattr__(self, "sigma_minor", self.sigma_major)
        object.__setattr__(self, "amplitude_mode", Amplitude(self.amplitude_mode))
        smaj, smin = self.sigma_major, self.sigma_minor
        if not (math.isfinite(smaj) and math.isfinite(smin)) or smin <= 0 or smaj <= 0:
            raise InvalidSpecError(f"sigmas must be finite and positive, got {smaj}, {smin}")
        if smaj < smin:
            raise InvalidSpecError("sigma_major must be >= sigma_minor")
        if not (math.isfinite(self.center[0]) and math.isfinite(self.center[1])):
            raise InvalidSpecError("center must be finite")
        if not math.isfinite(self.orientation):
            raise InvalidSpecError("orientation must be finite")

    @property
    def isotropic(self) -> bool:
        return self.sigma_major == self.sigma_minor


def covariance(sigma_major: float, sigma_minor: float, orientation: float) -> np.ndarray:
    """Covariance ``R diag(major^2, minor^2) R^T`` in (row, col) space."""
    c, s = math.cos(orientation), math.sin(orientation)
    rot = np.array([[c, -s], [s, c]])
    return rot @ np.diag([sigma_major**2, sigma_minor**2]) @ rot.T


def render_gaussian(spec: GaussianSpec, height: int, width: int) -> Heatmap:
    if height < 1 or width < 1:
        raise InvalidSpecError(f"grid dimensions must be positive, got {height}x{width}")
    rows = np.arange(height, dtype=np.float64)[:, None] - spec.center.row
    cols = np.arange(width, dtype=np.float64)[None, :] - spec.center.col
    if spec.isotropic:
        # orientation is irrelevant and the closed form avoids a matrix inverse
        quad = (rows**2 + cols**2) / spec.sigma_major**2
    else:
        prec = np.linalg.inv(covariance(spec.sigma_major, spec.sigma_minor, spec.orientation))
        quad = prec[0, 0] * rows**2 + 2.0 * prec[0, 1] * rows * cols + prec[1, 1] * cols**2
    grid = np.exp(-0.5 * quad)
    if spec.amplitude_mode is Amplitude.NORMALIZED:
        grid = grid / (2.0 * math.pi * spec.sigma_major * spec.sigma_minor)
    return Heatmap(grid)


def argmax_coord(h: Heatmap) -> tuple[PixelCoord, float]:
    """Peak pixel and its activation; ties resolve to the smallest row-major index."""
    flat = int(np.argmax(h.activations))
    r, c = divmod(flat, h.width)
    return PixelCoord(r, c), float(h.activations[r, c])


def mean_heatmap(ensemble: Sequence[Heatmap]) -> Heatmap:
    if len(ensemble) == 0:
        raise EmptyEnsembleError("ensemble must contain at least one heatmap")
    shape = ensemble[0].shape
    for h in ensemble[1:]:
        if h.shape != shape:
            raise ShapeError(f"ensemble members disagree on shape: {shape} vs {h.shape}")
    total = np.zeros(shape, dtype=np.float64)
    for h in ensemble:
        total += h.activations
    return Heatmap(total / len(ensemble))


# -- file formats -----------------------------------------------------------

def encode_qbhm(h: Heatmap) -> bytes:
    body = np.ascontiguousarray(h.activations, dtype="<f4")
    if not np.all(np.isfinite(body)):
        raise FormatError("activations overflow float32")
    return _QBHM_HEADER.pack(QBHM_MAGIC, h.height, h.width) + body.tobytes()


def decode_qbhm(data: bytes) -> Heatmap:
    if len(data) < _QBHM_HEADER.size:
        raise FormatError("truncated QBHM header")
    magic, height, width = _QBHM_HEADER.unpack_from(data)
    if magic != QBHM_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    expected = _QBHM_HEADER.size + 4 * height * width
    if len(data) < expected:
        raise FormatError(f"truncated QBHM payload: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise FormatError(f"trailing bytes after QBHM payload: {len(data) - expected}")
    grid = np.frombuffer(data, dtype="<f4", count=height * width, offset=_QBHM_HEADER.size)
    return Heatmap(grid.reshape(height, width))


def encode_csv(h: Heatmap) -> str:
    # repr() is the shortest decimal that round-trips a float64
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in h.activations)


def decode_csv(text: str) -> Heatmap:
    rows = []
    for lineno, line in enumerate(io.StringIO(text), 1):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    if not rows:
        raise FormatError("empty heatmap CSV")
    if len({len(r) for r in rows}) != 1:
        raise FormatError("ragged heatmap CSV")
    try:
        return Heatmap(np.array(rows))
    except HeatmapError as exc:
        raise FormatError(str(exc)) from None


def read_heatmap(path: str | Path) -> Heatmap:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return decode_csv(path.read_text(encoding="utf-8"))
    return decode_qbhm(path.read_bytes())


def heatmap_bytes(h: Heatmap, path: str | Path) -> bytes:
    """Serialized form of ``h`` for the format implied by ``path``'s suffix."""
    if Path(path).suffix.lower() == ".csv":
        return encode_csv(h).encode("utf-8")
    return encode_qbhm(h)
