import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geodrop.rangeview import (TWO_PI, GridSpec, PointCloud, align_azimuth, azimuth_of,
                               spherical_project, window_cells, wrap_col)


def cloud_from(xyz, intensity=None):
    xyz = np.asarray(xyz, dtype=float)
    if intensity is None:
        intensity = np.full(len(xyz), 0.5)
    return PointCloud(xyz, intensity)


def ring(angles, r=10.0, z=0.0):
    a = np.asarray(angles)
    return cloud_from(np.column_stack([r * np.cos(a), r * np.sin(a), np.full(a.shape, z)]))


def random_cloud(rng, n):
    r = rng.uniform(1, 50, n)
    az = rng.uniform(0, TWO_PI, n)
    el = rng.uniform(math.radians(-24), math.radians(2), n)
    xyz = np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)])
    return cloud_from(xyz, rng.uniform(0, 1, n))


# ---------------------------------------------------------------- types

def test_labels_must_match_points():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.zeros(3), labels=[1, 2])


def test_validate_rejects_bad_intensity():
    with pytest.raises(ValueError):
        cloud_from([[1, 0, 0]], [1.5]).validate()
    with pytest.raises(ValueError):
        cloud_from([[np.nan, 0, 0]]).validate()


@pytest.mark.parametrize("kw", [dict(width=1), dict(height=0), dict(elev_min=0.1, elev_max=0.1),
                                dict(azimuth_offset=TWO_PI), dict(azimuth_offset=-0.1)])
def test_gridspec_invariants(kw):
    with pytest.raises(ValueError):
        GridSpec(**kw)


# ---------------------------------------------------------------- wrap_col / window_cells

@pytest.mark.parametrize("col,width,expected", [(-1, 512, 511), (512, 512, 0), (-1025, 512, 511), (3, 8, 3)])
def test_wrap_col(col, width, expected):
    assert wrap_col(col, width) == expected


@given(st.integers(-10**6, 10**6), st.integers(1, 5000))
def test_wrap_col_range(col, width):
    w = wrap_col(col, width)
    assert 0 <= w < width and (w - col) % width == 0


def test_window_crosses_seam():
    spec = GridSpec(width=8, height=4)
    cells = window_cells((0, 2), 1, 0, spec)
    assert sorted(cells) == [(0, 2), (1, 2), (7, 2)]


def test_window_saturates():
    spec = GridSpec(width=8, height=2)
    cells = window_cells((3, 0), 4, 0, spec)
    assert sorted(c for c, _ in cells) == list(range(8))


def test_window_clamps_rows():
    spec = GridSpec(width=8, height=4)
    rows = {r for _, r in window_cells((5, 0), 0, 2, spec)}
    assert rows == {0, 1, 2}


@given(st.integers(2, 64), st.integers(1, 16), st.data())
def test_window_cell_count(width, height, data):
    spec = GridSpec(width=width, height=height)
    col = data.draw(st.integers(0, width - 1))
    row = data.draw(st.integers(0, height - 1))
    hw = data.draw(st.integers(0, 40))
    hh = data.draw(st.integers(0, 20))
    cells = window_cells((col, row), hw, hh, spec)
    span = min(height - 1, row + hh) - max(0, row - hh) + 1
    assert len(cells) == len(set(cells)) == min(2 * hw + 1, width) * span


# ---------------------------------------------------------------- projection

def test_axis_points_land_in_expected_columns():
    spec = GridSpec(width=4, height=2, elev_min=-0.5, elev_max=0.5)
    img = spherical_project(cloud_from([[1, 0, 0], [0, 1, 0]]), spec)
    assert img.cols.tolist() == [0, 1]


def test_origin_is_out_of_bounds():
    spec = GridSpec(width=4, height=2, elev_min=-0.5, elev_max=0.5)
    img = spherical_project(cloud_from([[0, 0, 0], [1, 0, 0], [0, 0, 5]]), spec)
    assert img.out_of_bounds.tolist() == [0, 2]
    assert img.cols[0] == -1


def test_boundary_tie_goes_to_upper_bin_start():
    # azimuth exactly pi/2 is the lower edge of column 1 with width 4
    spec = GridSpec(width=4, height=1, elev_min=-0.5, elev_max=0.5)
    img = spherical_project(cloud_from([[0, 1, 0]]), spec)
    assert img.cols[0] == 1


def test_every_point_inside_its_cell():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 1000)
    spec = GridSpec(width=360, height=32, elev_min=math.radians(-25), elev_max=math.radians(3),
                    azimuth_offset=0.7)
    img = spherical_project(cloud, spec)
    x, y, z = cloud.xyz.T
    az = np.mod(np.arctan2(y, x) - 0.7, TWO_PI)
    el = np.arcsin(z / np.sqrt(x * x + y * y + z * z))
    col_w = TWO_PI / spec.width
    row_h = (spec.elev_max - spec.elev_min) / spec.height
    for i in range(len(cloud)):
        c, r = img.cols[i], img.rows[i]
        assert c * col_w - 1e-12 <= az[i] < (c + 1) * col_w + 1e-12
        assert spec.elev_min + r * row_h - 1e-12 <= el[i] <= spec.elev_min + (r + 1) * row_h + 1e-12
        assert i in img.cell(c, r)


def test_partition():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 500)
    cloud.xyz[:20, 2] = 40.0  # far above the band
    img = spherical_project(cloud, GridSpec(width=64, height=8, elev_min=-0.45, elev_max=0.05))
    assert img.occupancy().sum() + img.out_of_bounds.size == len(cloud)
    assert np.all(img.cols[img.out_of_bounds] == -1)


def test_seam_equivariance():
    rng = np.random.default_rng(5)
    width = 128
    bin_w = TWO_PI / width
    # keep every point well inside its azimuth bin
    cols = rng.integers(0, width, 400)
    az = (cols + rng.uniform(0.2, 0.8, 400)) * bin_w
    el = rng.uniform(-0.3, 0.0, 400)
    r = rng.uniform(2, 30, 400)
    spec = GridSpec(width=width, height=8, elev_min=-0.35, elev_max=0.05)
    for shift in (1, 17, 127):
        a2 = az + shift * bin_w
        base = cloud_from(np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)]))
        rot = cloud_from(np.column_stack([r * np.cos(el) * np.cos(a2), r * np.cos(el) * np.sin(a2), r * np.sin(el)]))
        i0 = spherical_project(base, spec)
        i1 = spherical_project(rot, spec)
        assert np.array_equal((i0.cols + shift) % width, i1.cols)
        assert np.array_equal(i0.rows, i1.rows)
        occ0, occ1 = i0.occupancy(), i1.occupancy()
        assert np.array_equal(np.roll(occ0, shift, axis=1), occ1)


# ---------------------------------------------------------------- align_azimuth

def test_align_empty_raises():
    with pytest.raises(ValueError, match="empty input"):
        align_azimuth(cloud_from(np.zeros((0, 3))))


def test_align_already_aligned():
    # points span [5 deg, 355 deg]; the widest gap is centered on 0
    cloud = ring(np.radians(np.arange(5, 356, 5)))
    out, offset = align_azimuth(cloud)
    assert offset == 0.0
    assert np.array_equal(out.xyz, cloud.xyz)


def test_align_single_point_invertible():
    cloud = ring([math.pi])
    out, offset = align_azimuth(cloud)
    assert np.array_equal(out.xyz, cloud.xyz)
    az = azimuth_of(out.xyz, offset)
    assert abs(((az + offset) % TWO_PI) - math.pi) < 1e-9
    # the seam sits opposite the point
    assert abs(az[0] - math.pi) < 1e-9


def _brute_offset(az, n_cand=72000):
    cand = np.arange(n_cand) * TWO_PI / n_cand
    d = np.abs(cand[:, None] - az[None, :])
    d = np.minimum(d, TWO_PI - d).min(axis=1)
    return cand[np.argmax(d)]


def test_align_gap_matches_brute_force():
    rng = np.random.default_rng(6)
    gap_start = 123.0
    angles = gap_start + 10.0 + np.arange(360) * (350.0 / 360)
    angles = np.radians(angles % 360)
    rng.shuffle(angles)
    _, offset = align_azimuth(ring(angles))
    brute = _brute_offset(np.sort(angles))
    assert abs(offset - brute) < 2 * TWO_PI / 72000
    # seam inside the 10 degree gap
    assert math.radians(gap_start) < offset < math.radians(gap_start + 10.0)


def test_align_then_invert_reproduces_azimuth():
    rng = np.random.default_rng(7)
    cloud = random_cloud(rng, 300)
    _, offset = align_azimuth(cloud)
    back = np.mod(azimuth_of(cloud.xyz, offset) + offset, TWO_PI)
    diff = np.abs(back - azimuth_of(cloud.xyz))
    assert np.all(np.minimum(diff, TWO_PI - diff) < 1e-9)
