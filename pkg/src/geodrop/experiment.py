"""Synthetic benchmark: clean training scenes, weather-corrupted held-out scenes, arms and sweeps."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .learner import EvalReport, TrainConfig, evaluate_dataset, fit
from .rangeview import PointCloud
from .weather import WEATHER_KINDS, SceneSpec, corrupt_weather, generate_scene

TEST_ID_BASE = 1000


@dataclass(frozen=True)
class BenchmarkSpec:
    scene: SceneSpec = SceneSpec(points_budget=24576, seed=7)
    n_train: int = 20
    n_test: int = 10
    weather: tuple = WEATHER_KINDS
    severity: float = 0.6
    weather_seed: int = 99


def train_scenes(b: BenchmarkSpec) -> list[PointCloud]:
    return [generate_scene(b.scene, frame_id=i) for i in range(b.n_train)]


def test_scenes(b: BenchmarkSpec, weather: Sequence[str] | None = None, severity: float | None = None) -> list[PointCloud]:
    """Held-out scenes (disjoint frame ids), corrupted round-robin over the weather kinds."""
    kinds = tuple(weather or b.weather)
    sev = b.severity if severity is None else severity
    out = []
    for i in range(b.n_test):
        c = generate_scene(b.scene, frame_id=TEST_ID_BASE + i)
        c = corrupt_weather(c, kinds[i % len(kinds)], sev, seed=b.weather_seed)
        c.corrupted = True
        out.append(c)
    return out


@dataclass
class ArmResult:
    mode: str
    seed: int
    miou: float
    report: EvalReport
    seconds: float

    def to_dict(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "miou": self.miou, "report": self.report.to_dict()}


def run_arm(train: Sequence[PointCloud], test: Sequence[PointCloud], cfg: TrainConfig,
            on_epoch: Callable | None = None) -> ArmResult:
    t0 = time.perf_counter()
    state, cfg_eff, _ = fit(train, cfg, on_epoch=on_epoch)
    rep = evaluate_dataset(test, state, cfg_eff)
    return ArmResult(cfg.mode, cfg.seed, rep.miou, rep, time.perf_counter() - t0)


def compare_arms(train, test, cfg: TrainConfig, seeds: Sequence[int],
                 modes: Sequence[str] = ("learned", "random", "none"), log: Callable | None = None) -> tuple[dict, dict]:
    """Mean and per-seed test mIoU for each drop mode; all arms share every other setting."""
    per = {m: [] for m in modes}
    for seed in seeds:
        for m in modes:
            r = run_arm(train, test, replace(cfg, mode=m, seed=seed))
            per[m].append(r.miou)
            if log is not None:
                log(r)
    return {m: float(np.mean(v)) for m, v in per.items()}, per


def parse_sweep(text: str) -> list[tuple[int, int]]:
    """``"W=256,512 K=8,16"`` -> [(256, 8), (256, 16), (512, 8), (512, 16)]."""
    axes: dict[str, list[int]] = {}
    for tok in text.split():
        if "=" not in tok:
            raise ValueError(f"bad sweep token {tok!r}; expected NAME=v1,v2")
        name, vals = tok.split("=", 1)
        name = name.strip().upper()
        if name not in ("W", "K"):
            raise ValueError(f"unknown sweep axis {name!r}; use W and K")
        try:
            axes[name] = [int(v) for v in vals.split(",") if v.strip()]
        except ValueError as exc:
            raise ValueError(f"bad sweep values {vals!r}") from exc
        if not axes[name] or min(axes[name]) <= 0:
            raise ValueError(f"sweep axis {name} needs positive values")
    if set(axes) != {"W", "K"}:
        raise ValueError("sweep needs both W= and K=")
    return [(w, k) for w in axes["W"] for k in axes["K"]]
