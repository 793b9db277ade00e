"""Exact K-nearest-neighbor search inside a circular range-view window."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .rangeview import GridSpec, PointCloud, RangeImage, spherical_project


@dataclass
class GridIndex:
    image: RangeImage
    source: PointCloud

    def __post_init__(self):
        if self.image.n_points != len(self.source):
            raise ValueError("range image was not built from this cloud")

    @classmethod
    def build(cls, cloud: PointCloud, spec: GridSpec) -> "GridIndex":
        return cls(spherical_project(cloud, spec), cloud)


@dataclass
class NeighborSet:
    query_id: int
    ids: np.ndarray
    dists: np.ndarray
    eval_count: int
    degenerate: bool = False


@dataclass
class NeighborTable:
    """Batched result: row ``q`` holds up to K neighbors of ``queries[q]``.

    Unused slots have id -1 and distance inf; ``counts`` says how many are filled.
    """

    queries: np.ndarray
    ids: np.ndarray
    dists: np.ndarray
    counts: np.ndarray
    evals: np.ndarray


@dataclass
class VoxelFeature:
    v: np.ndarray
    voxel_size: float
    voxel_of: np.ndarray


@numba.njit(cache=True)
def _window_knn(sx, sy, sz, order, qx, qy, qz, qcol, qrow, qid, cell_start, width, height,
                k, half_w, half_h, wrap, out_i, out_d, out_n, out_e):
    # sx/sy/sz are coordinates in cell order; candidates are kept sorted by (distance, index)
    saturated = 2 * half_w + 1 >= width
    bd = np.empty(k)
    bi = np.empty(k, dtype=np.int64)
    for q in range(qid.shape[0]):
        i = qid[q]
        px = qx[q]
        py = qy[q]
        pz = qz[q]
        n = 0
        evals = 0
        r0 = max(0, qrow[q] - half_h)
        r1 = min(height - 1, qrow[q] + half_h)
        if saturated:
            c_lo = 0
            c_hi = width - 1
        else:
            c_lo = qcol[q] - half_w
            c_hi = qcol[q] + half_w
        for r in range(r0, r1 + 1):
            base = r * width
            # one row of the window is at most two contiguous spans in cell order
            for part in range(2):
                if part == 0:
                    a = max(c_lo, 0)
                    b = min(c_hi, width - 1)
                elif not wrap or saturated:
                    break
                elif c_lo < 0:
                    a = c_lo + width
                    b = width - 1
                elif c_hi >= width:
                    a = 0
                    b = c_hi - width
                else:
                    break
                for s in range(cell_start[base + a], cell_start[base + b + 1]):
                    j = order[s]
                    if j == i:
                        continue
                    dx = sx[s] - px
                    dy = sy[s] - py
                    dz = sz[s] - pz
                    d = np.sqrt(dx * dx + dy * dy + dz * dz)
                    evals += 1
                    if n == k:
                        if d > bd[k - 1] or (d == bd[k - 1] and j > bi[k - 1]):
                            continue
                        pos = k - 1
                    else:
                        pos = n
                        n += 1
                    while pos > 0 and (bd[pos - 1] > d or (bd[pos - 1] == d and bi[pos - 1] > j)):
                        bd[pos] = bd[pos - 1]
                        bi[pos] = bi[pos - 1]
                        pos -= 1
                    bd[pos] = d
                    bi[pos] = j
        for t in range(n):
            out_d[q, t] = bd[t]
            out_i[q, t] = bi[t]
        out_n[q] = n
        out_e[q] = evals


def knn_table(index: GridIndex, K: int, half_w: int, half_h: int, queries=None, wrap: bool = True) -> NeighborTable:
    """Windowed KNN for many queries at once. ``wrap=False`` disables circular padding."""
    if K < 1:
        raise ValueError("K must be positive")
    img = index.image
    if queries is None:
        queries = np.flatnonzero(img.in_grid)
    queries = np.asarray(queries, dtype=np.int64)
    if queries.size and np.any(img.cols[queries] < 0):
        raise ValueError("query point is outside the grid")
    nq = queries.shape[0]
    ids = np.full((nq, K), -1, dtype=np.int64)
    dists = np.full((nq, K), np.inf)
    counts = np.zeros(nq, dtype=np.int64)
    evals = np.zeros(nq, dtype=np.int64)
    xyz = index.source.xyz
    sxyz = xyz[img.order]
    qxyz = xyz[queries]
    _window_knn(np.ascontiguousarray(sxyz[:, 0]), np.ascontiguousarray(sxyz[:, 1]),
                np.ascontiguousarray(sxyz[:, 2]), img.order,
                np.ascontiguousarray(qxyz[:, 0]), np.ascontiguousarray(qxyz[:, 1]),
                np.ascontiguousarray(qxyz[:, 2]), img.cols[queries], img.rows[queries], queries,
                img.cell_start, img.spec.width, img.spec.height, K, max(0, half_w), max(0, half_h),
                wrap, ids, dists, counts, evals)
    return NeighborTable(queries, ids, dists, counts, evals)


def local_window_knn(index: GridIndex, query_id: int, K: int, half_w: int, half_h: int, wrap: bool = True) -> NeighborSet:
    t = knn_table(index, K, half_w, half_h, queries=[query_id], wrap=wrap)
    n = int(t.counts[0])
    return NeighborSet(query_id, t.ids[0, :n].copy(), t.dists[0, :n].copy(), int(t.evals[0]), degenerate=n < K)


def global_knn_bruteforce(cloud: PointCloud, query_id: int, K: int) -> NeighborSet:
    if K < 1:
        raise ValueError("K must be positive")
    n = len(cloud)
    others = np.delete(np.arange(n), query_id)
    diff = cloud.xyz[others] - cloud.xyz[query_id]
    d = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2])
    sel = np.argsort(d, kind="stable")[:K]
    return NeighborSet(query_id, others[sel], d[sel], n - 1, degenerate=len(sel) < K)


def voxel_mean_pool(cloud: PointCloud, voxel_size: float = 0.3) -> VoxelFeature:
    """Replace each point's (x, y, z, intensity) with the mean over its cubic voxel."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    feats = np.column_stack([cloud.xyz, cloud.intensity])
    if len(cloud) == 0:
        return VoxelFeature(feats, voxel_size, np.zeros(0, dtype=np.int64))
    keys = np.floor(cloud.xyz / voxel_size).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    _, inverse = np.unique(flat, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse)
    sums = np.zeros((counts.shape[0], 4))
    np.add.at(sums, inverse, feats)
    return VoxelFeature((sums / counts[:, None])[inverse], voxel_size, inverse)


def bench_knn(index: GridIndex, K: int, half_w: int, half_h: int) -> dict:
    """Distance evaluations of the windowed search vs a full-scan search, over every gridded query."""
    queries = np.flatnonzero(index.image.in_grid)
    if queries.size == 0:
        raise ValueError("index is empty")
    t = knn_table(index, K, half_w, half_h, queries=queries)
    local = int(t.evals.sum())
    glob = int(queries.size * (len(index.source) - 1))
    return {
        "queries": int(queries.size),
        "K": int(K),
        "half_w": int(half_w),
        "half_h": int(half_h),
        "total_evals_local": local,
        "total_evals_global": glob,
        "ratio": local / glob if glob else 1.0,
    }


def format_bench(report: dict) -> str:
    return "\n".join(f"{k}: {v}" for k, v in report.items())
