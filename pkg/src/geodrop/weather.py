"""Selective jittering, test-time weather corruption, and synthetic labeled scans."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rangeview import TWO_PI, PointCloud, azimuth_of

GROUND, BUILDING, FENCE, VEHICLE, POLE, VEGETATION = range(6)
CLASS_NAMES = ("ground", "building", "fence", "vehicle", "pole", "vegetation")
NUM_CLASSES = len(CLASS_NAMES)
FOREGROUND = (VEHICLE, POLE)
IGNORE = 255
WEATHER_KINDS = ("fog_light", "fog_dense", "rain", "snow")


def frame_rng(seed: int, frame_id=None, salt: int = 0) -> np.random.Generator:
    """Independent stream per (seed, frame); stable across processes."""
    key = zlib.crc32(repr(frame_id).encode())
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, key, salt])


@dataclass(frozen=True)
class JitterConfig:
    range_threshold: float = 25.0
    bearing_sector: Optional[tuple[float, float]] = None
    intensity_threshold: float = 0.05
    sigma: float = 0.1
    fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")


def _in_sector(az: np.ndarray, sector) -> np.ndarray:
    lo, hi = (a % TWO_PI for a in sector)
    if lo <= hi:
        return (az >= lo) & (az < hi)
    return (az >= lo) | (az < hi)


def jitter_eligible(cloud: PointCloud, cfg: JitterConfig) -> np.ndarray:
    elig = (cloud.ranges > cfg.range_threshold) | (cloud.intensity < cfg.intensity_threshold)
    if cfg.bearing_sector is not None:
        elig |= _in_sector(azimuth_of(cloud.xyz), cfg.bearing_sector)
    return elig


def selective_jitter(cloud: PointCloud, cfg: JitterConfig, rng: np.random.Generator | None = None):
    """Gaussian offsets on a random ``fraction`` of the eligible points.

    Returns the perturbed cloud and the mask of perturbed points.
    """
    if rng is None:
        rng = frame_rng(cfg.seed, cloud.frame_id, salt=1)
    elig = np.flatnonzero(jitter_eligible(cloud, cfg))
    m = int(round(cfg.fraction * elig.size))
    mask = np.zeros(len(cloud), dtype=bool)
    out = cloud.copy()
    if m == 0:
        return out, mask
    chosen = np.sort(rng.choice(elig, size=m, replace=False))
    mask[chosen] = True
    if cfg.sigma > 0:
        out.xyz[chosen] += rng.normal(0.0, cfg.sigma, size=(m, 3))
    return out, mask


@dataclass(frozen=True)
class WeatherModel:
    r_max: float
    scatter_rate: float
    range_noise: float
    scatter_range: tuple[float, float] = (1.0, 8.0)


WEATHER = {
    "fog_light": WeatherModel(r_max=120.0, scatter_rate=300.0, range_noise=0.02),
    "fog_dense": WeatherModel(r_max=40.0, scatter_rate=1500.0, range_noise=0.04),
    "rain": WeatherModel(r_max=150.0, scatter_rate=0.0, range_noise=0.06),
    "snow": WeatherModel(r_max=80.0, scatter_rate=800.0, range_noise=0.05, scatter_range=(1.0, 15.0)),
}


def drop_probability(ranges: np.ndarray, kind: str, severity: float) -> np.ndarray:
    return severity * np.minimum(1.0, np.asarray(ranges) / WEATHER[kind].r_max)


def corrupt_weather(cloud: PointCloud, kind: str, severity: float, seed: int,
                    elev_band: tuple[float, float] = (math.radians(-25.0), math.radians(3.0))) -> PointCloud:
    """Range-dependent dropout, radial range noise and (fog, snow) near-sensor scatter.

    Scatter points are appended after the survivors and labeled ``IGNORE``.
    """
    if kind not in WEATHER:
        raise ValueError(f"unknown weather kind {kind!r}")
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    if severity == 0.0:
        return cloud.copy()
    model = WEATHER[kind]
    rng = frame_rng(seed, cloud.frame_id, salt=2 + WEATHER_KINDS.index(kind))
    r = cloud.ranges
    keep = rng.random(len(cloud)) >= drop_probability(r, kind, severity)
    out = cloud.subset(keep)
    out.corrupted = True
    rk = r[keep]
    noise = rng.normal(0.0, model.range_noise * severity, size=rk.shape)
    scale = np.where(rk > 0, (rk + noise) / np.where(rk > 0, rk, 1.0), 1.0)
    out.xyz = out.xyz * scale[:, None]

    n_sc = rng.poisson(model.scatter_rate * severity)
    if n_sc:
        lo, hi = model.scatter_range
        sr = rng.uniform(lo, hi, n_sc)
        saz = rng.uniform(0.0, TWO_PI, n_sc)
        sel = rng.uniform(elev_band[0], elev_band[1], n_sc)
        sxyz = np.column_stack([sr * np.cos(sel) * np.cos(saz), sr * np.cos(sel) * np.sin(saz), sr * np.sin(sel)])
        sint = rng.uniform(0.0, 0.1, n_sc)
        labels = None
        if out.labels is not None:
            labels = np.concatenate([out.labels, np.full(n_sc, IGNORE, dtype=np.int64)])
        out = PointCloud(np.vstack([out.xyz, sxyz]), np.concatenate([out.intensity, sint]), labels,
                         out.frame_id, corrupted=True)
    return out


# ---------------------------------------------------------------- scene generation

@dataclass(frozen=True)
class SceneSpec:
    n_buildings: int = 4
    n_vehicles: int = 5
    n_fences: int = 3
    n_poles: int = 6
    n_vegetation: int = 5
    points_budget: int = 32768
    beams: int = 64
    elev_low_deg: float = -25.0
    elev_high_deg: float = 3.0
    sensor_height: float = 1.73
    max_range: float = 70.0
    ground_noise: float = 0.02
    range_noise: float = 0.01
    seam_object: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.beams < 1:
            raise ValueError("beams must be positive")
        for name in ("n_buildings", "n_vehicles", "n_fences", "n_poles", "n_vegetation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


_INTENSITY = np.array([0.25, 0.35, 0.5, 0.7, 0.55, 0.15])


def _ray_box(o, d, center, half, yaw):
    """Slab test against a z-rotated box; returns hit distance (inf on miss)."""
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    lo_ = rot @ (o - center)
    ld = d @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / ld
        t1 = (-half - lo_) * inv
        t2 = (half - lo_) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit, t, np.inf)


def _ray_cylinder(o, d, center_xy, radius, z0, z1):
    ox, oy = o[0] - center_xy[0], o[1] - center_xy[1]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    cc = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * cc
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    z = o[2] + t * d[:, 2]
    ok = (disc >= 0) & (t > 0) & (z >= z0) & (z <= z1)
    return np.where(ok, t, np.inf)


def _ray_sphere(o, d, center, radius):
    oc = o - center
    b = d @ oc
    cc = oc @ oc - radius * radius
    disc = b * b - cc
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _place(rng, r_lo, r_hi, az=None):
    r = rng.uniform(r_lo, r_hi)
    a = rng.uniform(0, TWO_PI) if az is None else az
    return np.array([r * math.cos(a), r * math.sin(a)])


def scene_objects(spec: SceneSpec, rng: np.random.Generator) -> list[tuple]:
    """Primitive list: (kind, label, geometry...)."""
    h = spec.sensor_height
    objs = []
    seam_done = not spec.seam_object
    for _ in range(spec.n_vehicles):
        bus = rng.random() < 0.3
        length = rng.uniform(9.0, 12.0) if bus else rng.uniform(3.8, 5.0)
        width = 2.5 if bus else rng.uniform(1.6, 2.0)
        height = rng.uniform(2.8, 3.4) if bus else rng.uniform(1.4, 1.8)
        if not seam_done:
            xy = np.array([rng.uniform(8.0, 14.0), 0.0])
            yaw = math.pi / 2 + rng.uniform(-0.2, 0.2)
            seam_done = True
        else:
            xy = _place(rng, 5.0, 30.0)
            yaw = rng.uniform(0, math.pi)
        center = np.array([xy[0], xy[1], -h + height / 2])
        objs.append(("box", VEHICLE, center, np.array([length / 2, width / 2, height / 2]), yaw))
    for _ in range(spec.n_buildings):
        xy = _place(rng, 18.0, 45.0)
        size = np.array([rng.uniform(8, 25), rng.uniform(6, 15), rng.uniform(6, 15)])
        az = math.atan2(xy[1], xy[0])
        if not seam_done:
            xy = np.array([rng.uniform(20.0, 30.0), 0.0])
            az = 0.0
            seam_done = True
        center = np.array([xy[0], xy[1], -h + size[2] / 2])
        objs.append(("box", BUILDING, center, size / 2, az + rng.uniform(-0.3, 0.3)))
    for _ in range(spec.n_fences):
        xy = _place(rng, 8.0, 35.0)
        length = rng.uniform(6, 20)
        height = rng.uniform(1.0, 2.0)
        center = np.array([xy[0], xy[1], -h + height / 2])
        objs.append(("box", FENCE, center, np.array([length / 2, 0.08, height / 2]), rng.uniform(0, math.pi)))
    for _ in range(spec.n_poles):
        xy = _place(rng, 4.0, 30.0)
        objs.append(("cyl", POLE, xy, rng.uniform(0.08, 0.2), -h, -h + rng.uniform(3.0, 7.0)))
    for _ in range(spec.n_vegetation):
        xy = _place(rng, 6.0, 40.0)
        rad = rng.uniform(1.0, 3.0)
        z = -h + rng.uniform(0.3, 1.0) * rad + rng.uniform(0.0, 3.0)
        objs.append(("sphere", VEGETATION, np.array([xy[0], xy[1], z]), rad))
    return objs


def generate_scene(spec: SceneSpec, frame_id=None) -> PointCloud:
    """Ray-cast a spinning scanner at the origin against the scene primitives.

    The first vehicle (or building, if there are no vehicles) is centered on
    azimuth 0 so that it straddles the seam.
    """
    if spec.points_budget <= 0:
        raise ValueError("empty scene: zero point budget")
    rng = np.random.default_rng([spec.seed, zlib.crc32(repr(frame_id).encode())])
    n_az = max(1, spec.points_budget // spec.beams)
    elev = np.radians(np.linspace(spec.elev_low_deg, spec.elev_high_deg, spec.beams))
    az = (np.arange(n_az) + 0.5) * TWO_PI / n_az
    E, A = np.meshgrid(elev, az, indexing="ij")
    E, A = E.ravel(), A.ravel()
    d = np.column_stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)])
    o = np.zeros(3)

    objs = scene_objects(spec, rng)
    t = np.full((len(objs) + 1, d.shape[0]), np.inf)
    with np.errstate(divide="ignore"):
        t[0] = np.where(d[:, 2] < 0, -spec.sensor_height / d[:, 2], np.inf)
    labels = [GROUND]
    for j, ob in enumerate(objs, start=1):
        if ob[0] == "box":
            t[j] = _ray_box(o, d, ob[2], ob[3], ob[4])
        elif ob[0] == "cyl":
            t[j] = _ray_cylinder(o, d, ob[2], ob[3], ob[4], ob[5])
        else:
            t[j] = _ray_sphere(o, d, ob[2], ob[3])
        labels.append(ob[1])
    labels = np.array(labels)
    which = np.argmin(t, axis=0)
    tt = t[which, np.arange(d.shape[0])]
    hit = tt <= spec.max_range
    which, tt, d = which[hit], tt[hit], d[hit]
    lab = labels[which]
    tt = tt + rng.normal(0.0, spec.range_noise, tt.shape)
    xyz = d * tt[:, None]
    veg = lab == VEGETATION
    xyz[veg] += rng.normal(0.0, 0.15, (int(veg.sum()), 3))
    gnd = lab == GROUND
    xyz[gnd, 2] += rng.normal(0.0, spec.ground_noise, int(gnd.sum()))
    inten = _INTENSITY[lab] * np.exp(-tt / 100.0) + rng.normal(0.0, 0.03, tt.shape)
    return PointCloud(xyz, np.clip(inten, 0.0, 1.0), lab, frame_id)
