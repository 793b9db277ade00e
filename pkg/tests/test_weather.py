import math

import numpy as np
import pytest

from geodrop.rangeview import GridSpec, PointCloud, spherical_project
from geodrop.weather import (FOREGROUND, GROUND, IGNORE, VEHICLE, WEATHER, WEATHER_KINDS, JitterConfig, SceneSpec,
                             corrupt_weather, drop_probability, frame_rng, generate_scene, jitter_eligible,
                             selective_jitter)


def shell_cloud(rng, n, r_lo, r_hi):
    r = rng.uniform(r_lo, r_hi, n)
    az = rng.uniform(0, 2 * math.pi, n)
    el = rng.uniform(-0.3, 0.03, n)
    xyz = np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)])
    return PointCloud(xyz, rng.uniform(0.1, 1.0, n), rng.integers(0, 6, n), frame_id=7)


# ---------------------------------------------------------------- selective jitter

def test_jitter_fraction_zero_is_identity():
    cloud = shell_cloud(np.random.default_rng(0), 500, 1, 60)
    out, mask = selective_jitter(cloud, JitterConfig(fraction=0.0))
    assert not mask.any() and np.array_equal(out.xyz, cloud.xyz)


def test_jitter_sigma_zero_leaves_coordinates():
    cloud = shell_cloud(np.random.default_rng(1), 500, 1, 60)
    out, mask = selective_jitter(cloud, JitterConfig(sigma=0.0, fraction=1.0))
    assert mask.any() and np.array_equal(out.xyz, cloud.xyz)


def test_jitter_full_fraction_on_far_half_monte_carlo():
    rng = np.random.default_rng(2)
    n = 100_000
    near = shell_cloud(rng, n // 2, 1, 20)
    far = shell_cloud(rng, n // 2, 30, 60)
    cloud = PointCloud(np.vstack([near.xyz, far.xyz]), np.full(n, 0.5), frame_id=0)
    sigma = 0.2
    cfg = JitterConfig(range_threshold=25.0, intensity_threshold=0.0, sigma=sigma, fraction=1.0)
    out, mask = selective_jitter(cloud, cfg, np.random.default_rng(3))
    assert np.array_equal(mask, jitter_eligible(cloud, cfg))
    assert np.array_equal(np.flatnonzero(mask), np.arange(n // 2, n))
    disp = np.linalg.norm(out.xyz - cloud.xyz, axis=1)
    assert np.all(disp[: n // 2] == 0)
    # independent Monte-Carlo reference for the mean norm of an isotropic 3-D Gaussian
    ref = np.linalg.norm(np.random.default_rng(4).normal(0, sigma, (n, 3)), axis=1).mean()
    assert abs(disp[n // 2:].mean() - ref) <= 0.05 * ref
    assert abs(ref - sigma * math.sqrt(8 / math.pi)) <= 0.05 * ref


def test_jitter_exact_count_and_eligibility():
    cloud = shell_cloud(np.random.default_rng(5), 1000, 1, 60)
    cloud.intensity[:10] = 0.01
    cfg = JitterConfig(fraction=0.3)
    elig = jitter_eligible(cloud, cfg)
    assert elig[:10].all()
    _, mask = selective_jitter(cloud, cfg)
    assert mask.sum() == round(0.3 * elig.sum()) and not (mask & ~elig).any()


def test_jitter_bearing_sector_across_seam():
    a = np.radians([350.0, 5.0, 90.0])
    cloud = PointCloud(np.column_stack([5 * np.cos(a), 5 * np.sin(a), np.zeros(3)]), np.full(3, 0.5))
    cfg = JitterConfig(range_threshold=100.0, intensity_threshold=0.0, bearing_sector=(math.radians(340), math.radians(10)))
    assert jitter_eligible(cloud, cfg).tolist() == [True, True, False]


def test_jitter_deterministic_per_frame():
    cloud = shell_cloud(np.random.default_rng(6), 300, 1, 60)
    a, _ = selective_jitter(cloud, JitterConfig(seed=3))
    b, _ = selective_jitter(cloud, JitterConfig(seed=3))
    c, _ = selective_jitter(cloud, JitterConfig(seed=4))
    assert np.array_equal(a.xyz, b.xyz) and not np.array_equal(a.xyz, c.xyz)


def test_jitter_config_validation():
    with pytest.raises(ValueError):
        JitterConfig(sigma=-1)
    with pytest.raises(ValueError):
        JitterConfig(fraction=1.5)


# ---------------------------------------------------------------- weather corruption

def test_severity_zero_is_identity():
    cloud = shell_cloud(np.random.default_rng(7), 200, 1, 60)
    for kind in WEATHER_KINDS:
        out = corrupt_weather(cloud, kind, 0.0, seed=1)
        assert np.array_equal(out.xyz, cloud.xyz) and np.array_equal(out.labels, cloud.labels)


def test_fog_dense_survival_matches_closed_form():
    rng = np.random.default_rng(8)
    n = 100_000
    lo, hi = 1.0, 80.0
    cloud = shell_cloud(rng, n, lo, hi)
    out = corrupt_weather(cloud, "fog_dense", 1.0, seed=3)
    survivors = int(np.sum(out.labels != IGNORE))
    r_max = WEATHER["fog_dense"].r_max
    # E[1 - min(1, r / r_max)] for r ~ U(lo, hi), lo < r_max < hi
    closed = ((r_max - lo) - (r_max ** 2 - lo ** 2) / (2 * r_max)) / (hi - lo)
    assert abs(survivors / n - closed) <= 0.02 * closed


def test_drop_probability_curve():
    r = np.array([0.0, 20.0, 40.0, 200.0])
    assert np.allclose(drop_probability(r, "fog_dense", 0.5), [0.0, 0.25, 0.5, 0.5])


def test_rain_never_inserts_points():
    cloud = shell_cloud(np.random.default_rng(9), 2000, 1, 60)
    for sev in (0.1, 0.5, 1.0):
        out = corrupt_weather(cloud, "rain", sev, seed=2)
        assert len(out) <= len(cloud) and not np.any(out.labels == IGNORE)


def test_scatter_points_are_ignored_and_near():
    cloud = shell_cloud(np.random.default_rng(10), 2000, 20, 60)
    out = corrupt_weather(cloud, "snow", 1.0, seed=2)
    sc = out.labels == IGNORE
    assert sc.sum() > 0 and out.corrupted
    lo, hi = WEATHER["snow"].scatter_range
    assert np.all((out.ranges[sc] >= lo) & (out.ranges[sc] <= hi))


def test_corruption_deterministic_and_validated():
    cloud = shell_cloud(np.random.default_rng(11), 500, 1, 60)
    a = corrupt_weather(cloud, "fog_light", 0.7, seed=5)
    b = corrupt_weather(cloud, "fog_light", 0.7, seed=5)
    assert np.array_equal(a.xyz, b.xyz)
    with pytest.raises(ValueError):
        corrupt_weather(cloud, "hail", 0.5, seed=0)
    with pytest.raises(ValueError):
        corrupt_weather(cloud, "rain", 1.5, seed=0)


def test_frame_rng_streams_differ_by_frame():
    a = frame_rng(0, 1).random(4)
    assert np.array_equal(a, frame_rng(0, 1).random(4))
    assert not np.array_equal(a, frame_rng(0, 2).random(4))
    assert not np.array_equal(a, frame_rng(0, 1, salt=1).random(4))


# ---------------------------------------------------------------- scenes

def test_ground_only_scene():
    spec = SceneSpec(n_buildings=0, n_vehicles=0, n_fences=0, n_poles=0, n_vegetation=0, points_budget=8192, seed=1)
    cloud = generate_scene(spec, frame_id=0)
    assert len(cloud) > 0 and np.all(cloud.labels == GROUND)
    # plane noise plus range noise projected on z
    assert np.all(np.abs(cloud.xyz[:, 2] + spec.sensor_height) < 6 * (spec.ground_noise + spec.range_noise))


def test_scene_bit_identical_for_fixed_seed():
    spec = SceneSpec(points_budget=4096, seed=4)
    a, b = generate_scene(spec, frame_id=3), generate_scene(spec, frame_id=3)
    assert a.xyz.tobytes() == b.xyz.tobytes() and np.array_equal(a.labels, b.labels)
    c = generate_scene(spec, frame_id=4)
    assert len(c) != len(a) or not np.array_equal(c.xyz, a.xyz)


def test_seam_vehicle_occupies_first_and_last_columns():
    # one ray per column of the 64 x 1024 grid
    spec = SceneSpec(points_budget=64 * 1024, seed=5)
    cloud = generate_scene(spec, frame_id=0)
    grid = GridSpec()
    img = spherical_project(cloud, grid)
    veh_cols = set(img.cols[(cloud.labels == VEHICLE) & (img.cols >= 0)].tolist())
    assert 0 in veh_cols and grid.width - 1 in veh_cols


def test_scene_has_all_classes_and_foreground():
    cloud = generate_scene(SceneSpec(points_budget=24576, seed=7), frame_id=0)
    present = set(np.unique(cloud.labels).tolist())
    assert present == set(range(6))
    assert set(FOREGROUND) <= present
    cloud.validate()


def test_zero_budget_raises():
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(points_budget=0))
