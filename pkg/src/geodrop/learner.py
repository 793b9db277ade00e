"""Per-point classifier on geometry cues, the reweighted two-branch loss, training and IoU evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapter import AdapterParams, GeometryCues, adapter_backward, adapter_forward
from .neighbors import GridIndex
from .nn import MLP, SGD, Dense, add_grads, softmax, zero_grads
from .policy import (QFunction, Transition, build_regions, epsilon_at, gt_ratio, q_update,
                     region_drop, region_feature_dim, region_states, reward, sample_batch,
                     select_action, uncertainty_summary)
from .rangeview import GridSpec, PointCloud
from .weather import IGNORE, NUM_CLASSES, JitterConfig, frame_rng, selective_jitter

LOG_FLOOR = 1e-12
BASE_FEATURES = 5  # x, y, z, intensity, range


# ---------------------------------------------------------------- losses

def class_weights(label_histogram) -> np.ndarray:
    """Inverse-log frequency weights, mean 1 over the classes that occur; absent classes get 0."""
    h = np.asarray(label_histogram, dtype=np.float64)
    if h.sum() <= 0:
        raise ValueError("empty label histogram")
    freq = h / h.sum()
    w = np.where(h > 0, 1.0 / np.log(1.02 + freq), 0.0)
    present = h > 0
    return w / w[present].mean()


def _check(probs, labels, w=None):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError("shape mismatch between probabilities and labels")
    if w is not None and np.shape(w) != (probs.shape[1],):
        raise ValueError("class weights must have one entry per class")
    return probs, labels


def point_ce(probs, labels, w) -> np.ndarray:
    """Per-point weighted cross-entropy ``-w_y log p_y``."""
    probs, labels = _check(probs, labels, w)
    p = probs[np.arange(labels.shape[0]), labels]
    return -np.asarray(w)[labels] * np.log(np.maximum(p, LOG_FLOOR))


def loss_ce(probs, labels, w) -> float:
    ce = point_ce(probs, labels, w)
    return float(ce.mean()) if ce.size else 0.0


def loss_after(probs_drop, labels, w, s, kappa: float) -> float:
    ce = point_ce(probs_drop, labels, w)
    s = np.asarray(s, dtype=np.float64)
    if s.shape != ce.shape:
        raise ValueError("one vulnerability score per point required")
    return float(np.mean((1.0 + kappa * s) * ce)) if ce.size else 0.0


def entropy(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    return -np.sum(probs * np.log(np.maximum(probs, LOG_FLOOR)), axis=-1)


def uncertainty(probs) -> np.ndarray:
    return entropy(probs)


def loss_entropy(probs_sj, probs_drop) -> float:
    """Mean Shannon entropy of the two branches, each averaged over its own points."""
    probs_sj = np.asarray(probs_sj, dtype=np.float64)
    probs_drop = np.asarray(probs_drop, dtype=np.float64)
    if probs_sj.ndim != 2 or probs_drop.ndim != 2 or probs_sj.shape[1] != probs_drop.shape[1]:
        raise ValueError("shape mismatch between branches")
    return 0.5 * (float(entropy(probs_sj).mean()) + float(entropy(probs_drop).mean()))


def loss_total(l_before: float, l_after: float, l_ent: float, alpha: float, eta: float) -> float:
    return l_before + alpha * l_after + eta * l_ent


def _dce(probs, labels, coef):
    # d/dlogits of sum_i coef_i * (-log p_{i,y_i})
    g = probs.copy()
    g[np.arange(labels.shape[0]), labels] -= 1.0
    return g * coef[:, None]


def _dentropy(probs, coef):
    # d/dlogits of sum_i coef_i * H(p_i)
    logp = np.log(np.maximum(probs, LOG_FLOOR))
    h = -np.sum(probs * logp, axis=1, keepdims=True)
    return -probs * (logp + h) * coef


@dataclass(frozen=True)
class LossWeights:
    w_c: tuple = (1.0,) * NUM_CLASSES
    kappa: float = 1.0
    alpha: float = 1.0
    eta: float = 0.1
    lam: float = 1.0

    def __post_init__(self):
        if self.kappa < 0 or self.alpha < 1 or self.eta < 0 or self.lam < 0:
            raise ValueError("loss weights need kappa >= 0, alpha >= 1, eta >= 0, lambda >= 0")


# ---------------------------------------------------------------- model

def point_features(cloud: PointCloud) -> np.ndarray:
    return np.column_stack([cloud.xyz, cloud.intensity, cloud.ranges])


def backbone_init(cue_dim: int, rng, hidden: int = 64, n_classes: int = NUM_CLASSES,
                  coord_scale: float = 0.05) -> MLP:
    scale = np.concatenate([np.full(3, coord_scale), [1.0, coord_scale],
                            np.ones(cue_dim - 3), np.full(3, coord_scale)])
    return MLP.init([BASE_FEATURES + cue_dim, hidden, hidden, n_classes], rng, in_scale=scale)


def backbone_forward(net: MLP, x: np.ndarray):
    logits, acts = net.forward(x)
    return softmax(logits), acts


def backbone_backward(net: MLP, acts, dlogits: np.ndarray):
    return net.backward(acts, dlogits, need_dx=True)


@dataclass
class TrainConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    K: int = 16
    half_w: int = 128
    half_h: int = 2
    voxel_size: float = 0.3
    jitter: JitterConfig = field(default_factory=JitterConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    mode: str = "learned"  # learned | random | none
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    ratios: tuple = (0.1, 0.25, 0.5, 0.75)
    n_az: int = 8
    n_el: int = 2
    q_hidden: int = 32
    q_lr: float = 1e-3
    replay_capacity: int = 4096
    replay_batch: int = 64
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.05
    target_sync: int = 100
    adapter_hidden: int = 32
    feat_dim: int = 32
    cue_hidden: int = 32
    cue_dim: int = 16
    backbone_hidden: int = 64
    coord_scale: float = 0.05
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("learned", "random", "none"):
            raise ValueError(f"unknown drop mode {self.mode!r}")


@dataclass
class TrainState:
    adapter: AdapterParams
    backbone: MLP
    q: QFunction
    opt: SGD
    step: int = 0
    epoch: int = 0

    @property
    def layers(self) -> list[Dense]:
        return self.adapter.layers + self.backbone.layers


def init_state(cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng([cfg.seed, 17])
    adapter = AdapterParams.init(rng, cfg.adapter_hidden, cfg.feat_dim, cfg.cue_hidden, cfg.cue_dim,
                                 coord_scale=cfg.coord_scale)
    backbone = backbone_init(adapter.cue_dim, rng, cfg.backbone_hidden, coord_scale=cfg.coord_scale)
    adapter, backbone = adapter.astype(cfg.dtype), backbone.astype(cfg.dtype)
    state_dim = region_feature_dim(adapter.cue_dim) + 3
    q = QFunction.init(state_dim, rng, cfg.q_hidden, cfg.ratios, capacity=cfg.replay_capacity,
                       batch_size=cfg.replay_batch, gamma=cfg.gamma, lr=cfg.q_lr, target_sync=cfg.target_sync)
    st = TrainState(adapter, backbone, q, None)
    st.opt = SGD(st.layers, momentum=cfg.momentum)
    return st


@dataclass
class BranchOut:
    cloud: PointCloud
    index: GridIndex
    cues: GeometryCues
    probs: np.ndarray
    acts: list


def branch_forward(cloud: PointCloud, state: TrainState, cfg: TrainConfig) -> BranchOut:
    """Adapter cues then backbone probabilities for one cloud."""
    index = GridIndex.build(cloud, cfg.grid)
    cues = adapter_forward(cloud, index, state.adapter, cfg.K, (cfg.half_w, cfg.half_h), cfg.voxel_size)
    x = np.concatenate([point_features(cloud), cues.g], axis=1)
    probs, acts = backbone_forward(state.backbone, x)
    return BranchOut(cloud, index, cues, probs, acts)


def branch_backward(out: BranchOut, state: TrainState, dlogits: np.ndarray):
    dlogits = dlogits.astype(state.backbone.layers[0].W.dtype, copy=False)
    g_bb, dx = backbone_backward(state.backbone, out.acts, dlogits)
    g_ad = adapter_backward(out.cues, state.adapter, dx[:, BASE_FEATURES:])
    return g_ad + g_bb


def predict(cloud: PointCloud, state: TrainState, cfg: TrainConfig) -> np.ndarray:
    return np.argmax(branch_forward(cloud, state, cfg).probs, axis=1)


def _valid(labels):
    return (labels >= 0) & (labels < NUM_CLASSES)


def seg_objective(sj: BranchOut, drop: BranchOut | None, lw: LossWeights):
    """Total loss, its parts, and the logit gradients of both branches."""
    w = np.asarray(lw.w_c, dtype=np.float64)
    y_sj = sj.cloud.labels
    m_sj = _valid(y_sj)
    n_sj = max(1, int(m_sj.sum()))
    ce_sj = point_ce(sj.probs[m_sj], y_sj[m_sj], w)
    l_before = float(ce_sj.sum() / n_sj)
    g_sj = np.zeros_like(sj.probs)
    g_sj[m_sj] = _dce(sj.probs[m_sj], y_sj[m_sj], w[y_sj[m_sj]] / n_sj)
    h_sj = entropy(sj.probs).mean()
    if drop is None:
        l_after, l_ent, g_dr = 0.0, float(h_sj), None
        g_sj += lw.eta * _dentropy(sj.probs, np.full((sj.probs.shape[0], 1), 1.0 / sj.probs.shape[0]))
        total = l_before + lw.eta * l_ent
        return total, {"before": l_before, "after": 0.0, "ent": l_ent, "ce_drop": 0.0}, g_sj, None
    y_dr = drop.cloud.labels
    m_dr = _valid(y_dr)
    n_dr = max(1, int(m_dr.sum()))
    ce_dr = point_ce(drop.probs[m_dr], y_dr[m_dr], w)
    s = drop.cues.s[m_dr]
    coef = (1.0 + lw.kappa * s) / n_dr
    l_after = float(np.sum(coef * ce_dr))
    g_dr = np.zeros_like(drop.probs)
    g_dr[m_dr] = _dce(drop.probs[m_dr], y_dr[m_dr], coef * w[y_dr[m_dr]])
    l_ent = 0.5 * (float(h_sj) + float(entropy(drop.probs).mean()))
    g_sj += lw.eta * _dentropy(sj.probs, np.full((sj.probs.shape[0], 1), 0.5 / sj.probs.shape[0]))
    g_dr = lw.alpha * g_dr + lw.eta * _dentropy(drop.probs, np.full((drop.probs.shape[0], 1), 0.5 / drop.probs.shape[0]))
    total = loss_total(l_before, l_after, l_ent, lw.alpha, lw.eta)
    parts = {"before": l_before, "after": l_after, "ent": l_ent, "ce_drop": float(ce_dr.sum() / n_dr)}
    return total, parts, g_sj, g_dr


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if total <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _region_state(cloud, out: BranchOut, cfg, k):
    regions = build_regions(cloud, out.cues, out.index.image, cfg.n_az, cfg.n_el)
    frame_u, per_u = uncertainty_summary(uncertainty(out.probs), regions)
    states = region_states(regions, frame_u, per_u)
    return regions, states if k is None else states[k]


def train_frame(cloud: PointCloud, state: TrainState, cfg: TrainConfig, total_steps: int) -> dict:
    """One pass of the drop-policy loop on a single frame, followed by the parameter and Q updates."""
    if cloud.corrupted:
        raise ValueError("refusing weather-corrupted input in training (source-only)")
    if cloud.labels is None:
        raise ValueError("training frames need labels")
    fid = (state.epoch, cloud.frame_id)
    rng = frame_rng(cfg.seed, fid, salt=11)
    # 1. jitter, reference branch, uncertainty
    p_sj, _ = selective_jitter(cloud, replace(cfg.jitter, seed=cfg.seed), frame_rng(cfg.seed, fid, salt=1))
    sj = branch_forward(p_sj, state, cfg)
    rec = {"epoch": state.epoch, "frame": str(cloud.frame_id), "step": state.step}
    drop = None
    transition = None
    if cfg.mode != "none":
        # 2-4. regions from cues, epsilon-greedy action
        regions, states = _region_state(p_sj, sj, cfg, None)
        eps = 1.0 if cfg.mode == "random" else epsilon_at(state.step, total_steps, cfg.eps_start, cfg.eps_end)
        k, b = select_action(state.q, regions, states, eps, rng)
        # 5. drop
        p_drop, dropped = region_drop(p_sj, regions[k], cfg.ratios[b], rng, return_ids=True)
        drop = branch_forward(p_drop, state, cfg)
        rec.update(k=k, b=b, eps=eps, n_dropped=int(dropped.size))
    total, parts, g_sj, g_dr = seg_objective(sj, drop, cfg.loss)
    rec.update(loss=total, **parts)
    if drop is not None:
        # 6. reward on the plain segmentation losses of both branches
        gr = gt_ratio(dropped, p_sj.labels)
        r = reward(parts["ce_drop"], parts["before"], gr, cfg.loss.lam)
        _, s_next = _region_state(p_drop, drop, cfg, k)
        transition = Transition(states[k], b, r, s_next)
        rec.update(reward=r, gt_ratio=gr)
    # 7. backbone/adapter step, then Q update
    grads = branch_backward(sj, state, g_sj)
    if g_dr is not None:
        add_grads(grads, branch_backward(drop, state, g_dr))
    state.opt.step(grads, lr_at(cfg, state.step, total_steps))
    if transition is not None and cfg.mode == "learned":
        state.q.push(transition)
        rec["td_loss"] = q_update(state.q, sample_batch(state.q, rng))
    state.step += 1
    return rec


def train_epoch(dataset: Sequence[PointCloud], state: TrainState, cfg: TrainConfig, total_steps: int | None = None):
    if not dataset:
        raise ValueError("empty dataset")
    if total_steps is None:
        total_steps = cfg.epochs * len(dataset)
    log = [train_frame(c, state, cfg, total_steps) for c in dataset]
    state.epoch += 1
    return state, log


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    iou: np.ndarray
    miou: float
    confusion: np.ndarray
    counts: np.ndarray
    present: np.ndarray

    def to_dict(self) -> dict:
        return {
            "iou": [None if not p else float(v) for v, p in zip(self.iou, self.present)],
            "miou": float(self.miou),
            "confusion": self.confusion.tolist(),
            "counts": self.counts.tolist(),
        }


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    ok = (labels >= 0) & (labels < n_classes)
    return np.bincount(n_classes * labels[ok] + preds[ok], minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    tp = np.diag(cm).astype(np.float64)
    gt = cm.sum(axis=1)
    union = gt + cm.sum(axis=0) - tp
    present = gt > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, 0.0)
    miou = float(iou[present].mean()) if present.any() else 0.0
    return EvalReport(iou, miou, cm, gt, present)


def evaluate(preds, labels, C: int = NUM_CLASSES) -> EvalReport:
    """Per-class IoU and mIoU over classes present in the labels; ignore-class points are skipped."""
    return report_from_confusion(confusion_matrix(preds, labels, C))


def evaluate_dataset(clouds: Sequence[PointCloud], state: TrainState, cfg: TrainConfig) -> EvalReport:
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for c in clouds:
        cm += confusion_matrix(predict(c, state, cfg), c.labels, NUM_CLASSES)
    return report_from_confusion(cm)


def label_histogram(clouds: Sequence[PointCloud], n_classes: int = NUM_CLASSES) -> np.ndarray:
    h = np.zeros(n_classes, dtype=np.int64)
    for c in clouds:
        y = c.labels[_valid(c.labels)]
        h += np.bincount(y, minlength=n_classes)
    return h


def fit(dataset: Sequence[PointCloud], cfg: TrainConfig, on_epoch=None):
    """Train from scratch; class weights come from the training label histogram.

    Returns (state, effective config, per-epoch frame logs).
    """
    if any(c.corrupted for c in dataset):
        raise ValueError("refusing weather-corrupted input in training (source-only)")
    w = class_weights(label_histogram(dataset))
    cfg = replace(cfg, loss=replace(cfg.loss, w_c=tuple(float(x) for x in w)))
    state = init_state(cfg)
    total = cfg.epochs * len(dataset)
    logs = []
    for _ in range(cfg.epochs):
        state, log = train_epoch(dataset, state, cfg, total)
        logs.append(log)
        if on_epoch is not None:
            on_epoch(state, log)
    return state, cfg, logs
