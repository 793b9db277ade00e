import math

import numpy as np
import pytest

from geodrop.rangeview import TWO_PI, GridSpec, PointCloud
from geodrop.weather import SceneSpec, generate_scene


def band_cloud(rng, n, r_lo=1.0, r_hi=50.0, el_lo=-24.0, el_hi=2.0, labels=False, quantize=None):
    """Random points inside the default elevation band.

    ``quantize`` rounds coordinates to a lattice so that exact distance ties occur.
    """
    r = rng.uniform(r_lo, r_hi, n)
    az = rng.uniform(0.0, TWO_PI, n)
    el = np.radians(rng.uniform(el_lo, el_hi, n))
    xyz = np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)])
    if quantize:
        xyz = np.round(xyz / quantize) * quantize
    lab = rng.integers(0, 6, n) if labels else None
    return PointCloud(xyz, rng.uniform(0.0, 1.0, n), lab)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneSpec(points_budget=4096, seed=3), frame_id=0)


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(width=256, height=64, elev_min=math.radians(-25.5), elev_max=math.radians(3.5))
