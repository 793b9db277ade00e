"""Range-view grid: spherical projection with a periodic azimuth axis."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass
class PointCloud:
    """Per-point coordinates and intensity, with optional semantic labels.

    ``corrupted`` marks clouds produced by test-time weather corruption so the
    training entry points can refuse them.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    labels: Optional[np.ndarray] = None
    frame_id: object = None
    corrupted: bool = False

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.intensity.shape[0] != self.xyz.shape[0]:
            raise ValueError("intensity length does not match point count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.xyz.shape[0]:
                raise ValueError("labels must have one entry per point")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def ranges(self) -> np.ndarray:
        return np.sqrt(np.sum(self.xyz * self.xyz, axis=1))

    def validate(self) -> None:
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("non-finite coordinates")
        if np.any((self.intensity < 0) | (self.intensity > 1)) or not np.all(np.isfinite(self.intensity)):
            raise ValueError("intensity outside [0, 1]")

    def subset(self, keep) -> "PointCloud":
        """Cloud restricted to ``keep`` (boolean mask or index array), order preserved."""
        labels = None if self.labels is None else self.labels[keep]
        return replace(self, xyz=self.xyz[keep], intensity=self.intensity[keep], labels=labels)

    def copy(self) -> "PointCloud":
        labels = None if self.labels is None else self.labels.copy()
        return replace(self, xyz=self.xyz.copy(), intensity=self.intensity.copy(), labels=labels)


@dataclass(frozen=True)
class GridSpec:
    width: int = 1024
    height: int = 64
    elev_min: float = math.radians(-25.5)
    elev_max: float = math.radians(3.5)
    azimuth_offset: float = 0.0

    def __post_init__(self):
        if self.width < 2 or self.height < 1:
            raise ValueError("grid needs width >= 2 and height >= 1")
        if not self.elev_min < self.elev_max:
            raise ValueError("elev_min must be below elev_max")
        if not 0.0 <= self.azimuth_offset < TWO_PI:
            raise ValueError("azimuth_offset must lie in [0, 2*pi)")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def with_offset(self, offset: float) -> "GridSpec":
        return replace(self, azimuth_offset=float(offset) % TWO_PI)


@dataclass
class RangeImage:
    """Cell grid over a cloud, stored CSR-style.

    Cell id is ``row * width + col``. ``order[cell_start[c]:cell_start[c + 1]]``
    lists the points of cell ``c`` in ascending point index.
    """

    spec: GridSpec
    cols: np.ndarray
    rows: np.ndarray
    ranges: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    order: np.ndarray
    cell_start: np.ndarray
    out_of_bounds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_points(self) -> int:
        return self.cols.shape[0]

    @property
    def in_grid(self) -> np.ndarray:
        return self.cols >= 0

    def cell(self, col: int, row: int) -> np.ndarray:
        c = row * self.spec.width + col
        return self.order[self.cell_start[c]:self.cell_start[c + 1]]

    def occupancy(self) -> np.ndarray:
        """(height, width) array of per-cell point counts."""
        return np.diff(self.cell_start).reshape(self.spec.height, self.spec.width)


def wrap_col(col: int, width: int) -> int:
    return col % width


def azimuth_of(xyz: np.ndarray, offset: float = 0.0) -> np.ndarray:
    az = np.arctan2(xyz[:, 1], xyz[:, 0]) - offset
    az = np.mod(az, TWO_PI)
    # mod can round up to exactly 2*pi for tiny negative inputs
    az[az >= TWO_PI] = 0.0
    return az


def align_azimuth(cloud: PointCloud) -> tuple[PointCloud, float]:
    """Pick the azimuth offset that puts the seam in the middle of the widest empty gap.

    Geometry is left untouched; pass the offset to ``GridSpec.with_offset``.
    Ties between equally wide gaps go to the smallest offset.
    """
    if len(cloud) == 0:
        raise ValueError("empty input")
    az = np.unique(azimuth_of(cloud.xyz))
    nxt = np.append(az[1:], az[0] + TWO_PI)
    gaps = nxt - az
    mids = np.mod(az + 0.5 * gaps, TWO_PI)
    mids[np.isclose(mids, TWO_PI, rtol=0, atol=1e-12)] = 0.0
    widest = gaps.max()
    cand = mids[np.isclose(gaps, widest, rtol=0, atol=1e-12)]
    offset = float(cand.min())
    if offset >= TWO_PI:
        offset = 0.0
    return cloud, offset


def spherical_project(cloud: PointCloud, spec: GridSpec) -> RangeImage:
    """Bin every point into an azimuth x elevation cell.

    Intervals are half-open ``[lo, hi)`` in both axes, except that the top
    elevation edge is inclusive. Points at the origin or outside the
    elevation band are listed in ``out_of_bounds``.
    """
    xyz = cloud.xyz
    n = xyz.shape[0]
    rng = np.sqrt(np.sum(xyz * xyz, axis=1))
    az = azimuth_of(xyz, spec.azimuth_offset)
    with np.errstate(invalid="ignore", divide="ignore"):
        el = np.arcsin(np.clip(xyz[:, 2] / rng, -1.0, 1.0))
    valid = (rng > 0) & (el >= spec.elev_min) & (el <= spec.elev_max)

    cols = np.full(n, -1, dtype=np.int64)
    rows = np.full(n, -1, dtype=np.int64)
    c = np.floor(az[valid] * spec.width / TWO_PI).astype(np.int64)
    cols[valid] = np.minimum(c, spec.width - 1)
    r = np.floor((el[valid] - spec.elev_min) * spec.height / (spec.elev_max - spec.elev_min)).astype(np.int64)
    rows[valid] = np.clip(r, 0, spec.height - 1)

    idx = np.flatnonzero(valid)
    cell_ids = rows[idx] * spec.width + cols[idx]
    order = idx[np.argsort(cell_ids, kind="stable")]
    counts = np.bincount(cell_ids, minlength=spec.n_cells)
    cell_start = np.zeros(spec.n_cells + 1, dtype=np.int64)
    np.cumsum(counts, out=cell_start[1:])
    el = np.where(valid, el, np.nan)
    return RangeImage(spec, cols, rows, rng, az, el, order, cell_start, np.flatnonzero(~valid))


def window_cells(center: tuple[int, int], half_w: int, half_h: int, spec: GridSpec) -> list[tuple[int, int]]:
    """Cells within ``half_w`` columns (circular) and ``half_h`` rows (clamped) of ``center``."""
    col, row = center
    if not (0 <= col < spec.width and 0 <= row < spec.height):
        raise ValueError("center outside grid")
    if 2 * half_w + 1 >= spec.width:
        cols = list(range(spec.width))
    else:
        cols = [wrap_col(col + d, spec.width) for d in range(-half_w, half_w + 1)]
    rows = range(max(0, row - half_h), min(spec.height - 1, row + half_h) + 1)
    return [(c, r) for r in rows for c in cols]
