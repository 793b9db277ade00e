"""INI configuration with typed defaults; unknown keys are rejected."""
from __future__ import annotations

import configparser
import hashlib
import io
import math

from .experiment import BenchmarkSpec
from .learner import LossWeights, TrainConfig
from .rangeview import GridSpec
from .weather import WEATHER_KINDS, JitterConfig, SceneSpec


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, object]] = {
    "grid": {"width": 1024, "height": 64, "elev_min_deg": -25.5, "elev_max_deg": 3.5, "azimuth_offset": 0.0},
    "knn": {"window": 256, "k": 16, "half_h": 2, "voxel_size": 0.3},
    "adapter": {"hidden": 32, "feat_dim": 32, "cue_hidden": 32, "cue_dim": 16, "coord_scale": 0.05},
    "backbone": {"hidden": 64},
    "jitter": {"range_threshold": 25.0, "bearing_lo": "", "bearing_hi": "", "intensity_threshold": 0.05,
               "sigma": 0.1, "fraction": 0.5},
    "scene": {"n_buildings": 4, "n_vehicles": 5, "n_fences": 3, "n_poles": 6, "n_vegetation": 5,
              "points_budget": 24576, "beams": 64, "sensor_height": 1.73, "max_range": 70.0},
    "policy": {"mode": "learned", "ratios": "0.1,0.25,0.5,0.75", "n_az": 8, "n_el": 2, "hidden": 32,
               "lr": 1e-3, "capacity": 4096, "batch": 64, "gamma": 0.9, "eps_start": 1.0, "eps_end": 0.05,
               "target_sync": 100},
    "loss": {"kappa": 1.0, "alpha": 1.0, "eta": 0.1, "lambda": 1.0},
    "train": {"epochs": 10, "lr": 0.05, "momentum": 0.9},
    "data": {"n_train": 20, "n_test": 10, "weather": "fog_light,fog_dense,rain,snow", "severity": 0.6,
             "scene_seed": 7, "weather_seed": 99},
    "run": {"seed": 0, "workers": 1},
    "paths": {"data": "data", "out": "runs"},
}


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc
    return raw.strip()


def parse_config(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from exc
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
            cfg[section][key] = _coerce(section, key, raw)
    return cfg


def load_config(path=None) -> dict:
    if path is None:
        return parse_config("")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: dict) -> str:
    buf = io.StringIO()
    for section in DEFAULTS:
        buf.write(f"[{section}]\n")
        for key in DEFAULTS[section]:
            buf.write(f"{key} = {cfg[section][key]!r}\n" if isinstance(cfg[section][key], float)
                      else f"{key} = {cfg[section][key]}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def set_value(cfg: dict, section: str, key: str, value) -> dict:
    out = {s: dict(v) for s, v in cfg.items()}
    if key not in DEFAULTS.get(section, {}):
        raise ConfigError(f"unknown key '{key}' in [{section}]")
    out[section][key] = _coerce(section, key, str(value))
    return out


def grid_spec(cfg: dict) -> GridSpec:
    g = cfg["grid"]
    return GridSpec(g["width"], g["height"], math.radians(g["elev_min_deg"]), math.radians(g["elev_max_deg"]),
                    g["azimuth_offset"])


def jitter_config(cfg: dict) -> JitterConfig:
    j = cfg["jitter"]
    sector = None
    if j["bearing_lo"] != "" and j["bearing_hi"] != "":
        sector = (math.radians(float(j["bearing_lo"])), math.radians(float(j["bearing_hi"])))
    return JitterConfig(j["range_threshold"], sector, j["intensity_threshold"], j["sigma"], j["fraction"],
                        cfg["run"]["seed"])


def scene_spec(cfg: dict, seed: int | None = None) -> SceneSpec:
    s = cfg["scene"]
    return SceneSpec(s["n_buildings"], s["n_vehicles"], s["n_fences"], s["n_poles"], s["n_vegetation"],
                     s["points_budget"], s["beams"], sensor_height=s["sensor_height"], max_range=s["max_range"],
                     seed=cfg["run"]["seed"] if seed is None else seed)


def half_width(window: int) -> int:
    """Column half-width for a window of about ``window`` columns (2 * half + 1 columns)."""
    return max(0, int(window) // 2)


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    if cfg["run"]["workers"] != 1:
        raise ConfigError("[run] workers: only single-worker runs are supported")
    try:
        p, l, a = cfg["policy"], cfg["loss"], cfg["adapter"]
        ratios = tuple(float(x) for x in str(p["ratios"]).split(",") if x.strip())
        return TrainConfig(
            grid=grid_spec(cfg),
            K=cfg["knn"]["k"],
            half_w=half_width(cfg["knn"]["window"]),
            half_h=cfg["knn"]["half_h"],
            voxel_size=cfg["knn"]["voxel_size"],
            jitter=jitter_config(cfg),
            loss=LossWeights(kappa=l["kappa"], alpha=l["alpha"], eta=l["eta"], lam=l["lambda"]),
            mode=p["mode"],
            epochs=cfg["train"]["epochs"],
            lr=cfg["train"]["lr"],
            momentum=cfg["train"]["momentum"],
            ratios=ratios,
            n_az=p["n_az"],
            n_el=p["n_el"],
            q_hidden=p["hidden"],
            q_lr=p["lr"],
            replay_capacity=p["capacity"],
            replay_batch=p["batch"],
            gamma=p["gamma"],
            eps_start=p["eps_start"],
            eps_end=p["eps_end"],
            target_sync=p["target_sync"],
            adapter_hidden=a["hidden"],
            feat_dim=a["feat_dim"],
            cue_hidden=a["cue_hidden"],
            cue_dim=a["cue_dim"],
            backbone_hidden=cfg["backbone"]["hidden"],
            coord_scale=a["coord_scale"],
            seed=cfg["run"]["seed"] if seed is None else seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc



def weather_kinds(cfg: dict) -> tuple[str, ...]:
    kinds = tuple(k.strip() for k in str(cfg["data"]["weather"]).split(",") if k.strip())
    bad = [k for k in kinds if k not in WEATHER_KINDS]
    if bad or not kinds:
        raise ConfigError(f"[data] weather: unknown kind(s) {bad or kinds}; choose from {', '.join(WEATHER_KINDS)}")
    return kinds


def benchmark_spec(cfg: dict) -> BenchmarkSpec:
    """Benchmark scenes depend only on [scene] and [data], never on the training seed."""
    d = cfg["data"]
    try:
        return BenchmarkSpec(scene_spec(cfg, seed=d["scene_seed"]), d["n_train"], d["n_test"], weather_kinds(cfg),
                             d["severity"], d["weather_seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
