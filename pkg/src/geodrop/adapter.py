"""Light geometry-aware adapter: windowed dispersion cues, point mixing,
attention pooling and the cue head, with exact backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .neighbors import GridIndex, NeighborTable, knn_table, voxel_mean_pool
from .nn import MLP, Dense, pack_layers, softmax, unpack_layers

MIX_IN = 14  # p_i, p_k, p_i - p_k, mu (3 each) + d1, d2
VOXEL_DIM = 4
SCORE_EPS = 1e-6
MAGIC = b"LGA1"


@dataclass
class DispersionCues:
    mu: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


@dataclass
class AdapterParams:
    phi_p: MLP
    fc_att: MLP
    mlp_out: MLP

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 32, feat: int = 32, cue_hidden: int = 32,
             cue_dim: int = 16, coord_scale: float = 1.0) -> "AdapterParams":
        mix_scale = np.full(MIX_IN, coord_scale)
        out_scale = np.concatenate([np.full(3, coord_scale), [1.0], np.ones(feat)])
        return cls(
            MLP.init([MIX_IN, hidden, feat], rng, in_scale=mix_scale),
            MLP.init([feat, 1], rng),
            MLP.init([VOXEL_DIM + feat, cue_hidden, cue_dim], rng, in_scale=out_scale),
        )

    @property
    def feat_dim(self) -> int:
        return self.phi_p.n_out

    @property
    def cue_dim(self) -> int:
        return self.mlp_out.n_out + 3

    @property
    def layers(self) -> list[Dense]:
        return self.phi_p.layers + self.fc_att.layers + self.mlp_out.layers

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.phi_p.copy(), self.fc_att.copy(), self.mlp_out.copy())

    def astype(self, dtype) -> "AdapterParams":
        return AdapterParams(self.phi_p.astype(dtype), self.fc_att.astype(dtype), self.mlp_out.astype(dtype))

    def to_bytes(self) -> bytes:
        return pack_layers(self.layers, MAGIC)

    @classmethod
    def from_bytes(cls, data: bytes, coord_scale: float = 1.0) -> "AdapterParams":
        layers = unpack_layers(data, MAGIC)
        if len(layers) != 5:
            raise ValueError("adapter file must hold 5 layers")
        feat = layers[1].W.shape[0]
        p = cls(MLP(layers[:2]), MLP(layers[2:3]), MLP(layers[3:]))
        p.phi_p.in_scale = np.full(MIX_IN, coord_scale)
        p.mlp_out.in_scale = np.concatenate([np.full(3, coord_scale), [1.0], np.ones(feat)])
        p.check()
        return p

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, coord_scale: float = 1.0) -> "AdapterParams":
        return cls.from_bytes(Path(path).read_bytes(), coord_scale)

    def check(self) -> None:
        if self.phi_p.n_in != MIX_IN:
            raise ValueError("phi_p must take 14 inputs")
        if self.fc_att.n_in != self.phi_p.n_out or self.fc_att.n_out != 1:
            raise ValueError("fc_att must map F -> 1")
        if self.mlp_out.n_in != VOXEL_DIM + self.phi_p.n_out:
            raise ValueError("mlp_out input must be voxel features plus F")
        for mlp in (self.phi_p, self.fc_att, self.mlp_out):
            for a, b in zip(mlp.layers[:-1], mlp.layers[1:]):
                if a.W.shape[0] != b.W.shape[1]:
                    raise ValueError("inconsistent layer shapes")


@dataclass
class GeometryCues:
    """Per-point adapter output plus what the backward pass needs."""

    ids: np.ndarray        # (N, K) neighbor ids after padding
    degenerate: np.ndarray  # (N,) fewer than K window candidates
    mu: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    v: np.ndarray
    ell: np.ndarray        # (N, K, F)
    att: np.ndarray        # (N, K)
    f_pt: np.ndarray       # (N, F)
    g: np.ndarray          # (N, F_g + 3)
    s: np.ndarray
    evals: int = 0
    cache: dict | None = field(default=None, repr=False)


def dispersion(query: np.ndarray, neighbors: np.ndarray) -> DispersionCues:
    """Windowed mean of the neighbors and the two dispersion indicators.

    Broadcasts: ``query`` (..., 3) and ``neighbors`` (..., K, 3).
    """
    neighbors = np.asarray(neighbors, dtype=np.float64)
    if neighbors.shape[-2] == 0:
        raise ValueError("degenerate neighborhood")
    query = np.asarray(query, dtype=np.float64)
    mu = neighbors.mean(axis=-2)
    d1 = np.linalg.norm(query - mu, axis=-1)
    d2 = np.linalg.norm(neighbors - mu[..., None, :], axis=-1).mean(axis=-1)
    return DispersionCues(mu, d1, d2)


def mix_input(p_i, p_k, cues: DispersionCues) -> np.ndarray:
    """Concatenate [p_i, p_k, p_i - p_k, mu, d1, d2]; ``p_k`` may carry an extra K axis."""
    p_k = np.asarray(p_k, dtype=np.float64)
    p_i = np.asarray(p_i, dtype=np.float64)
    if p_k.ndim > p_i.ndim:
        p_i = np.broadcast_to(p_i[..., None, :], p_k.shape)
        mu = np.broadcast_to(np.asarray(cues.mu)[..., None, :], p_k.shape)
        d = np.broadcast_to(np.stack([cues.d1, cues.d2], axis=-1)[..., None, :], p_k.shape[:-1] + (2,))
    else:
        mu = np.asarray(cues.mu)
        d = np.stack([np.asarray(cues.d1), np.asarray(cues.d2)], axis=-1)
    x = np.concatenate([p_i, p_k, p_i - p_k, mu, d], axis=-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature")
    return x


def mix_point(p_i, p_k, cues: DispersionCues, params: AdapterParams) -> np.ndarray:
    return params.phi_p(mix_input(p_i, p_k, cues))


def attention_pool(ell: np.ndarray, params: AdapterParams):
    """Softmax attention over the K axis (second to last); returns (weights, pooled)."""
    logits = params.fc_att(ell)[..., 0]
    att = softmax(logits)
    f_pt = np.einsum("...k,...kf->...f", att, ell)
    return att, f_pt


def cue(v_i, f_pt, p_i, params: AdapterParams) -> np.ndarray:
    x = np.concatenate([np.asarray(v_i, dtype=np.float64), np.asarray(f_pt, dtype=np.float64)], axis=-1)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(p_i)):
        raise ValueError("non-finite feature")
    return np.concatenate([params.mlp_out(x), np.asarray(p_i, dtype=np.float64)], axis=-1)


def frame_stats(d1: np.ndarray, d2: np.ndarray) -> tuple[float, float]:
    if d1.size == 0:
        return 0.0, 0.0
    return float(np.median(d1)), float(np.median(d2))


def vulnerability_score(d1, d2, batch_stats: tuple[float, float]):
    """Median-normalized mean of d1 and d2, halved and clamped to [0, 1]."""
    m1, m2 = batch_stats
    raw = 0.5 * (np.asarray(d1) / (m1 + SCORE_EPS) + np.asarray(d2) / (m2 + SCORE_EPS)) / 2.0
    return np.clip(raw, 0.0, 1.0)


def pad_neighbors(table: NeighborTable, n_points: int, queries_all: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(N, K) neighbor ids for every point.

    Short rows repeat their nearest neighbor; points with no candidate (or
    outside the grid) use themselves, which gives d1 = d2 = 0.
    """
    K = table.ids.shape[1]
    ids = np.repeat(np.arange(n_points)[:, None], K, axis=1)
    degenerate = np.ones(n_points, dtype=bool)
    rows = table.ids.copy()
    cnt = table.counts
    has = cnt > 0
    nearest = np.where(has, rows[:, 0], table.queries)
    slot = np.arange(K)[None, :]
    rows = np.where(slot < cnt[:, None], rows, nearest[:, None])
    ids[table.queries] = rows
    degenerate[table.queries] = cnt < K
    return ids, degenerate


@numba.njit(cache=True)
def _gather_relu(a, b, ids, out):
    # out[n, k] = relu(a[n] + b[ids[n, k]])
    n, k = ids.shape
    f = a.shape[1]
    for i in range(n):
        for j in range(k):
            src = ids[i, j]
            for c in range(f):
                v = a[i, c] + b[src, c]
                out[i, j, c] = v if v > 0 else 0.0


@numba.njit(cache=True)
def _pool_backward(ell, att, df, w_att, dlogit_out, dell_out):
    # attention pooling backward: fills dL/dlogits and dL/dell
    n, k, f = ell.shape
    datt = np.empty(k, dtype=ell.dtype)
    for i in range(n):
        acc = 0.0
        for j in range(k):
            t = 0.0
            for c in range(f):
                t += ell[i, j, c] * df[i, c]
            datt[j] = t
            acc += t * att[i, j]
        for j in range(k):
            dl = att[i, j] * (datt[j] - acc)
            dlogit_out[i, j] = dl
            a = att[i, j]
            for c in range(f):
                dell_out[i, j, c] = a * df[i, c] + dl * w_att[c]


@numba.njit(cache=True)
def _relu_mask_sum(dh, h, s_out):
    # zero dh where the forward ReLU was inactive; s_out[n] = sum_k dh[n, k]
    n, k, f = dh.shape
    for i in range(n):
        for c in range(f):
            s_out[i, c] = 0.0
        for j in range(k):
            for c in range(f):
                if h[i, j, c] <= 0:
                    dh[i, j, c] = 0.0
                else:
                    s_out[i, c] += dh[i, j, c]


def _split_first_layer(params: AdapterParams):
    """First phi_p layer regrouped into a per-query part and a per-neighbor part."""
    layer = params.phi_p.layers[0]
    scale = params.phi_p.in_scale if params.phi_p.in_scale is not None else np.ones(MIX_IN, dtype=layer.W.dtype)
    Ws = layer.W * scale
    w_query = Ws[:, 0:3] + Ws[:, 6:9]
    w_nb = Ws[:, 3:6] - Ws[:, 6:9]
    return Ws, w_query, w_nb


def adapter_forward(cloud, index: GridIndex, params: AdapterParams, K: int, window: tuple[int, int],
                    voxel_size: float = 0.3, keep_cache: bool = True) -> GeometryCues:
    """Cues for every point of ``cloud``; ``window`` is (half_w, half_h).

    The mixing input is never materialized: its first affine layer is split
    into a per-query term and a gathered per-neighbor term.
    """
    if len(params.phi_p.layers) != 2 or len(params.fc_att.layers) != 1:
        raise ValueError("adapter expects a two-layer phi_p and a single-layer attention head")
    half_w, half_h = window
    n = len(cloud)
    vox = voxel_mean_pool(cloud, voxel_size)
    queries = np.flatnonzero(index.image.in_grid)
    table = knn_table(index, K, half_w, half_h, queries=queries)
    ids, degenerate = pad_neighbors(table, n, queries)
    disp = dispersion(cloud.xyz, cloud.xyz[ids])

    # compute in the parameters' precision; geometry above stays float64
    l1, l2 = params.phi_p.layers
    dt = l1.W.dtype
    xyz = cloud.xyz.astype(dt)
    mu = disp.mu.astype(dt)
    dd = np.column_stack([disp.d1, disp.d2]).astype(dt)
    Ws, w_query, w_nb = _split_first_layer(params)
    a = xyz @ w_query.T + mu @ Ws[:, 9:12].T + dd @ Ws[:, 12:14].T + l1.b
    bnb = xyz @ w_nb.T
    h1 = np.empty((n, ids.shape[1], a.shape[1]), dtype=dt)
    _gather_relu(np.ascontiguousarray(a), np.ascontiguousarray(bnb), ids, h1)
    ell = h1 @ l2.W.T
    ell += l2.b
    fc = params.fc_att.layers[0]
    logits = ell @ fc.W[0] + fc.b[0]
    att = softmax(logits)
    f_pt = np.einsum("nk,nkf->nf", att, ell)
    x_out = np.concatenate([vox.v.astype(dt), f_pt], axis=1)
    h, acts_out = params.mlp_out.forward(x_out)
    g = np.concatenate([h, xyz], axis=1)
    s = vulnerability_score(disp.d1, disp.d2, frame_stats(disp.d1, disp.d2))
    cache = {"h1": h1, "dd": dd, "xyz": xyz, "mu": mu, "acts_out": acts_out} if keep_cache else None
    return GeometryCues(ids, degenerate, disp.mu, disp.d1, disp.d2, vox.v, ell, att, f_pt, g, s,
                        int(table.evals.sum()), cache)


def adapter_backward(cues: GeometryCues, params: AdapterParams, dg: np.ndarray):
    """Parameter gradients given dL/dg; the raw-coordinate tail of g carries no parameters.

    Returns ``(dW, db)`` pairs in ``params.layers`` order.
    """
    if cues.cache is None:
        raise ValueError("forward cache missing; run adapter_forward with keep_cache=True")
    c = cues.cache
    F_g = params.mlp_out.n_out
    g_out, dx_out = params.mlp_out.backward(c["acts_out"], dg[:, :F_g], need_dx=True)
    df_pt = np.ascontiguousarray(dx_out[:, VOXEL_DIM:])
    fc = params.fc_att.layers[0]
    ell = cues.ell
    n, K, F = ell.shape
    dlogit = np.empty((n, K), dtype=ell.dtype)
    dell = np.empty_like(ell)
    _pool_backward(ell, cues.att, df_pt, np.ascontiguousarray(fc.W[0]), dlogit, dell)
    g_att = [(dlogit.reshape(1, -1) @ ell.reshape(-1, F), np.array([dlogit.sum()], dtype=ell.dtype))]

    l1, l2 = params.phi_p.layers
    h1 = c["h1"]
    dW2 = dell.reshape(-1, F).T @ h1.reshape(-1, h1.shape[-1])
    db2 = dell.reshape(-1, F).sum(axis=0)
    dh1 = dell @ l2.W
    S = np.empty((n, dh1.shape[-1]), dtype=dh1.dtype)
    _relu_mask_sum(dh1, h1, S)
    xyz = c["xyz"]
    nb_xyz = xyz[cues.ids].reshape(-1, 3)
    Qk = dh1.reshape(-1, dh1.shape[-1]).T @ nb_xyz
    SP = S.T @ xyz
    dWs = np.concatenate([SP, Qk, SP - Qk, S.T @ c["mu"], S.T @ c["dd"]], axis=1)
    scale = params.phi_p.in_scale if params.phi_p.in_scale is not None else np.ones(MIX_IN, dtype=dWs.dtype)
    g_phi = [(dWs * scale, S.sum(axis=0)), (dW2, db2)]
    return g_phi + g_att + g_out
