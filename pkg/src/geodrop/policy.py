"""Region-level point drop driven by an epsilon-greedy Q-network."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import MLP, SGD, pack_layers, unpack_layers
from .rangeview import PointCloud, RangeImage
from .weather import FOREGROUND

DROP_RATIOS = (0.1, 0.25, 0.5, 0.75)
MAGIC = b"LGQ1"


@dataclass
class Region:
    id: int
    cells: np.ndarray      # flat cell ids, row * width + col
    point_ids: np.ndarray
    feature: np.ndarray
    empty: bool = False


def region_feature_dim(cue_dim: int) -> int:
    # mean g, mean s, mean d1, mean d2, occupancy, mean range
    return cue_dim + 5


def build_regions(cloud: PointCloud, cues, grid: RangeImage, n_az: int = 8, n_el: int = 2,
                  col_shift: int = 0) -> list[Region]:
    """Tile the grid into n_az x n_el blocks; region id is ``az_block * n_el + el_block``.

    ``col_shift`` rotates the azimuth tiling so blocks may straddle the seam.
    """
    if n_az < 1 or n_el < 1:
        raise ValueError("need at least one block per axis")
    W, H = grid.spec.width, grid.spec.height
    col_block = ((np.arange(W) + col_shift) % W) * n_az // W
    row_block = np.arange(H) * n_el // H
    cell_region = (col_block[None, :] * n_el + row_block[:, None]).ravel()

    gridded = np.flatnonzero(grid.in_grid)
    pt_region = cell_region[grid.rows[gridded] * W + grid.cols[gridded]]
    n_reg = n_az * n_el
    total = max(1, gridded.size)
    dim = region_feature_dim(cues.g.shape[1])
    ranges = grid.ranges

    order = np.argsort(pt_region, kind="stable")
    bounds = np.searchsorted(pt_region[order], np.arange(n_reg + 1))
    regions = []
    for k in range(n_reg):
        members = gridded[order[bounds[k]:bounds[k + 1]]]
        cells = np.flatnonzero(cell_region == k)
        if members.size == 0:
            regions.append(Region(k, cells, members, np.zeros(dim), empty=True))
            continue
        feat = np.concatenate([
            cues.g[members].mean(axis=0),
            [cues.s[members].mean(), cues.d1[members].mean(), cues.d2[members].mean(),
             members.size / total, ranges[members].mean()],
        ])
        regions.append(Region(k, cells, members, feat))
    return regions


def symlog(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x))


def region_states(regions: Sequence[Region], u_summary: np.ndarray, region_u: np.ndarray) -> np.ndarray:
    """State rows ``[F_k, u]`` per region; u is frame mean/max entropy plus the region's mean entropy."""
    F = np.stack([r.feature for r in regions])
    u = np.broadcast_to(np.asarray(u_summary, dtype=np.float64), (len(regions), len(u_summary)))
    return symlog(np.column_stack([F, u, region_u]))


def uncertainty_summary(u: np.ndarray, regions: Sequence[Region], point_rows: np.ndarray | None = None):
    """Frame (mean, max) entropy and per-region mean entropy.

    ``point_rows`` maps cloud indices to rows of ``u`` when they differ.
    """
    frame = np.array([u.mean(), u.max()]) if u.size else np.zeros(2)
    per = np.zeros(len(regions))
    for j, r in enumerate(regions):
        if r.point_ids.size:
            rows = r.point_ids if point_rows is None else point_rows[r.point_ids]
            per[j] = u[rows].mean()
    return frame, per


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray


@dataclass
class QFunction:
    """Q-network over per-region states, one output per drop ratio, with replay and target copy."""

    net: MLP
    target: MLP
    ratios: tuple = DROP_RATIOS
    capacity: int = 4096
    batch_size: int = 64
    gamma: float = 0.9
    lr: float = 1e-3
    target_sync: int = 100
    momentum: float = 0.0
    buffer: deque = field(default_factory=deque)
    updates: int = 0
    opt: SGD | None = None

    def __post_init__(self):
        self.buffer = deque(self.buffer, maxlen=self.capacity)
        if self.opt is None:
            self.opt = SGD(self.net.layers, momentum=self.momentum)

    @classmethod
    def init(cls, state_dim: int, rng: np.random.Generator, hidden: int = 32, ratios=DROP_RATIOS, **kw) -> "QFunction":
        net = MLP.init([state_dim, hidden, len(ratios)], rng)
        return cls(net, net.copy(), tuple(ratios), **kw)

    @property
    def state_dim(self) -> int:
        return self.net.n_in

    def values(self, states: np.ndarray) -> np.ndarray:
        return self.net(states)

    def push(self, tr: Transition) -> None:
        self.buffer.append(tr)

    def save(self, path) -> None:
        Path(path).write_bytes(pack_layers(self.net.layers, MAGIC))

    def load_weights(self, path) -> None:
        layers = unpack_layers(Path(path).read_bytes(), MAGIC)
        self.net = MLP(layers)
        self.target = self.net.copy()
        self.opt = SGD(self.net.layers, momentum=self.momentum)


def select_action(q: QFunction, regions: Sequence[Region], states: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> tuple[int, int]:
    """Epsilon-greedy over (non-empty region, ratio) pairs; greedy ties go to the lowest (k, b)."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    live = np.array([not r.empty for r in regions])
    if not live.any():
        raise ValueError("no droppable region")
    n_b = len(q.ratios)
    if epsilon > 0 and rng.random() < epsilon:
        ks = np.flatnonzero(live)
        pick = int(rng.integers(ks.size * n_b))
        return int(ks[pick // n_b]), pick % n_b
    vals = q.values(states)
    vals = np.where(live[:, None], vals, -np.inf)
    flat = int(np.argmax(vals))
    return flat // n_b, flat % n_b


def drop_ids(region: Region, ratio: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    n = region.point_ids.size
    m = int(math.floor(ratio * n + 1e-9))
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(region.point_ids, size=m, replace=False))


def region_drop(cloud: PointCloud, region: Region, ratio: float, rng: np.random.Generator,
                return_ids: bool = False):
    """Remove ``floor(ratio * n)`` random points of ``region``; everything else is untouched."""
    dropped = drop_ids(region, ratio, rng)
    keep = np.ones(len(cloud), dtype=bool)
    keep[dropped] = False
    out = cloud.subset(keep)
    return (out, dropped) if return_ids else out


def gt_ratio(dropped_ids: np.ndarray, labels: np.ndarray, foreground_classes=FOREGROUND) -> float:
    dropped_ids = np.asarray(dropped_ids, dtype=np.int64)
    if dropped_ids.size == 0:
        return 0.0
    return float(np.isin(labels[dropped_ids], foreground_classes).mean())


def reward(loss_after: float, loss_before: float, gt_ratio: float, lam: float) -> float:
    return loss_after - loss_before - lam * gt_ratio


def td_loss_and_grads(q: QFunction, batch: Sequence[Transition]):
    """Mean squared TD error and its gradient for the online network."""
    s = np.stack([t.state for t in batch])
    a = np.array([t.action for t in batch])
    r = np.array([t.reward for t in batch])
    s2 = np.stack([t.next_state for t in batch])
    target = r + q.gamma * q.target(s2).max(axis=1) if q.gamma else r
    out, acts = q.net.forward(s)
    pred = out[np.arange(len(batch)), a]
    err = pred - target
    loss = float(np.mean(err * err))
    dout = np.zeros_like(out)
    dout[np.arange(len(batch)), a] = 2.0 * err / len(batch)
    grads, _ = q.net.backward(acts, dout)
    return loss, grads


def q_update(q: QFunction, batch: Sequence[Transition]) -> float:
    """One SGD step on the TD error; the target copy is refreshed every ``target_sync`` updates."""
    if not batch:
        raise ValueError("empty batch")
    loss, grads = td_loss_and_grads(q, batch)
    q.opt.step(grads, q.lr)
    q.updates += 1
    if q.updates % q.target_sync == 0:
        q.target = q.net.copy()
    return loss


def sample_batch(q: QFunction, rng: np.random.Generator) -> list[Transition]:
    n = len(q.buffer)
    m = min(n, q.batch_size)
    idx = rng.choice(n, size=m, replace=False)
    return [q.buffer[i] for i in sorted(idx)]


def epsilon_at(step: int, total: int, start: float = 1.0, end: float = 0.05) -> float:
    if total <= 1:
        return end
    frac = min(1.0, step / (total - 1))
    return start + (end - start) * frac
