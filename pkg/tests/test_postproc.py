import numpy as np
import pytest

from phnn.data import MaskVolume
from phnn.errors import ConfigError
from phnn.postproc import (
    THRESHOLD_GRID,
    ProbabilityVolume,
    connected_components,
    fill_holes,
    keep_lungs,
    threshold,
)

from oracles import bfs_components, bfs_fill_holes


def random_masks(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        density = rng.uniform(0.05, 0.6)
        yield rng.uniform(size=(size, size, size)) < density


def test_threshold_convention():
    pv = ProbabilityVolume(np.full((2, 2, 2), 0.5))
    assert threshold(pv, 0.5).voxels.all()
    assert not threshold(pv, 0.500001).voxels.any()
    rng = np.random.default_rng(0)
    p = rng.uniform(size=(4, 5, 6))
    np.testing.assert_array_equal(threshold(ProbabilityVolume(p), 0.5).voxels, (p >= 0.5).astype(np.uint8))
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ConfigError):
            threshold(pv, bad)


def test_threshold_grid():
    assert THRESHOLD_GRID[0] == 0.05 and THRESHOLD_GRID[-1] == 0.95 and len(THRESHOLD_GRID) == 19


def test_two_unit_voxels_and_diagonal_adjacency():
    v = np.zeros((5, 5, 5), bool)
    v[0, 0, 0] = v[4, 4, 4] = True
    c = connected_components(v)
    assert c.count == 2 and c.voxel_counts == [1, 1]
    d = np.zeros((3, 3, 3), bool)
    d[0, 0, 0] = d[1, 1, 0] = True  # face diagonal
    assert connected_components(d).count == 1
    d[2, 2, 2] = True  # two steps away along x
    assert connected_components(d).count == 2
    d[2, 2, 1] = True  # body diagonal of (1, 1, 0) joins everything
    assert connected_components(d).count == 1


def test_component_order_and_mm3():
    v = np.zeros((4, 10, 10), bool)
    v[0, 0, 0:2] = True  # 2 voxels, first
    v[3, 9, 5:8] = True  # 3 voxels
    v[0, 5, 5:7] = True  # 2 voxels, later minimum index
    c = connected_components(MaskVolume(v, (0.5, 0.5, 2.0)))
    assert c.voxel_counts == [3, 2, 2]
    assert c.volumes_mm3 == [1.5, 1.0, 1.0]
    assert c.labels[3, 9, 6] == 1 and c.labels[0, 0, 0] == 2 and c.labels[0, 5, 5] == 3


def test_components_match_flood_fill_oracle():
    for vox in random_masks(40, seed=1):
        c = connected_components(vox)
        oracle = bfs_components(vox)
        got = [set(zip(*np.nonzero(c.labels == i))) for i in range(1, c.count + 1)]
        assert sorted(map(sorted, got)) == sorted(map(sorted, oracle))
        assert c.voxel_counts == sorted((len(o) for o in oracle), reverse=True)


def test_hollow_cube_fills_solid():
    v = np.zeros((7, 7, 7), bool)
    v[1:6, 1:6, 1:6] = True
    v[2:5, 2:5, 2:5] = False
    out = fill_holes(v).voxels.astype(bool)
    np.testing.assert_array_equal(out, bfs_fill_holes(v))
    assert out[1:6, 1:6, 1:6].all() and out.sum() == 125


def test_tunnel_to_border_not_filled():
    v = np.zeros((7, 7, 7), bool)
    v[1:6, 1:6, 1:6] = True
    v[2:5, 2:5, 2:5] = False
    v[3, 3, 0:3] = False  # tunnel out through the x=0 face
    out = fill_holes(v).voxels.astype(bool)
    np.testing.assert_array_equal(out, v)


def test_fill_empty():
    assert not fill_holes(np.zeros((3, 3, 3))).voxels.any()


def test_fill_matches_oracle_and_never_removes():
    for vox in random_masks(40, seed=2):
        out = fill_holes(vox).voxels.astype(bool)
        np.testing.assert_array_equal(out, bfs_fill_holes(vox))
        assert np.all(out[vox])


def _blob(v, z, y, x, n):
    # n voxels in a single row segment
    v[z, y, x:x + n] = True


def test_keep_two_when_ratio_below_five():
    v = np.zeros((10, 20, 120), bool)
    _blob(v, 1, 1, 0, 100)
    _blob(v, 5, 10, 0, 99)
    _blob(v, 8, 18, 0, 3)
    out = keep_lungs(v).voxels.astype(bool)
    assert out.sum() == 199 and not out[8].any()


def test_keep_one_when_ratio_at_least_five():
    v = np.zeros((10, 20, 120), bool)
    _blob(v, 1, 1, 0, 100)
    _blob(v, 5, 10, 0, 10)
    out = keep_lungs(v).voxels.astype(bool)
    assert out.sum() == 100 and out[1, 1].sum() == 100


def test_ratio_exactly_five_keeps_one():
    v = np.zeros((10, 20, 120), bool)
    _blob(v, 1, 1, 0, 100)
    _blob(v, 5, 10, 0, 20)
    assert keep_lungs(v).voxels.sum() == 100


def test_single_component_unchanged_and_empty():
    v = np.zeros((6, 6, 6), bool)
    v[1:4, 1:4, 1:4] = True
    np.testing.assert_array_equal(keep_lungs(v).voxels, v)
    assert not keep_lungs(np.zeros((4, 4, 4))).voxels.any()


def test_keep_lungs_properties_on_random_masks():
    for vox in random_masks(40, seed=3):
        once = keep_lungs(vox)
        twice = keep_lungs(once)
        np.testing.assert_array_equal(once.voxels, twice.voxels)
        assert connected_components(once).count <= 2
        filled = fill_holes(vox).voxels.astype(bool)
        assert not np.any(once.voxels.astype(bool) & ~filled)
        np.testing.assert_array_equal(fill_holes(once).voxels, once.voxels)
