"""Heatmap rasterization, weight remap, and the GZH1 binary format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeadapt.data import GazeTrajectory
from gazeadapt.gaze import (GazeHeatmap, WeightMask, rasterize_heatmap,
                            read_gzh1, regularize_to_weights, write_gzh1)


def test_single_fixation_peaks_at_its_pixel():
    # x=0.25 of width 33 -> col 8; y=0.75 of height 33 -> row 24
    traj = GazeTrajectory(((0.0, 0.25, 0.75),))
    heat = rasterize_heatmap(traj, 33, 33, sigma=2.0)
    assert heat.values.max() == pytest.approx(1.0)
    assert np.unravel_index(heat.values.argmax(), heat.values.shape) == (24, 8)


def test_heatmap_matches_gaussian_formula():
    traj = GazeTrajectory(((0.0, 0.0, 0.0), (200.0, 1.0, 1.0)))
    sigma = 3.0
    heat = rasterize_heatmap(traj, 17, 17, sigma=sigma)
    yy, xx = np.mgrid[0:17, 0:17].astype(np.float64)
    raw = np.zeros((17, 17))
    for cy, cx in ((0.0, 0.0), (16.0, 16.0)):
        raw += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    want = raw / raw.max()
    np.testing.assert_allclose(heat.values, want.astype(np.float32), atol=1e-6)


def test_empty_trajectory_gives_zero_map():
    heat = rasterize_heatmap(GazeTrajectory(()), 32, 32, sigma=2.0)
    assert heat.values.shape == (32, 32)
    assert not heat.values.any()


def test_max_normalization_invariant():
    rng = np.random.default_rng(4)
    pts = tuple((200.0 * k, float(x), float(y))
                for k, (x, y) in enumerate(rng.random((12, 2))))
    heat = rasterize_heatmap(GazeTrajectory(pts), 40, 48, sigma=1.0)
    assert heat.values.max() == pytest.approx(1.0, abs=1e-6)
    assert heat.values.min() >= 0.0


def test_rasterize_validation():
    traj = GazeTrajectory(((0.0, 0.5, 0.5),))
    with pytest.raises(ValueError, match="bad kernel width"):
        rasterize_heatmap(traj, 32, 32, sigma=0.0)
    with pytest.raises(ValueError, match=">= 16"):
        rasterize_heatmap(traj, 8, 32, sigma=2.0)


def test_heatmap_type_validation():
    with pytest.raises(ValueError, match="nonnegative"):
        GazeHeatmap(np.full((16, 16), -0.5))
    with pytest.raises(ValueError, match="not exceed 1"):
        GazeHeatmap(np.full((16, 16), 1.5))
    with pytest.raises(ValueError, match="2-D"):
        GazeHeatmap(np.zeros(16))


def test_weight_remap_hand_values():
    heat = GazeHeatmap(np.array([[0.0, 0.5], [1.0, 0.25]], dtype=np.float32))
    w = regularize_to_weights(heat, w_floor=0.5)
    want = np.array([[0.5, 0.75], [1.0, 0.625]], dtype=np.float32)
    np.testing.assert_array_equal(w.values, want)
    assert w.w_floor == 0.5


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 1.0), st.integers(0, 2**31 - 1))
def test_weight_remap_properties(floor, seed):
    rng = np.random.default_rng(seed)
    h = rng.random((16, 16)).astype(np.float32)
    h /= max(h.max(), 1.0)
    w = regularize_to_weights(GazeHeatmap(h), w_floor=floor).values
    # range and monotonicity in the heatmap
    assert w.min() >= floor - 1e-6 and w.max() <= 1.0 + 1e-6
    order = np.argsort(h.ravel())
    assert (np.diff(w.ravel()[order]) >= -1e-6).all()


def test_weight_floor_validation():
    heat = GazeHeatmap(np.zeros((16, 16), dtype=np.float32))
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError, match="bad weight floor"):
            regularize_to_weights(heat, w_floor=bad)
    with pytest.raises(ValueError, match="lie in"):
        WeightMask(np.zeros((16, 16), dtype=np.float32), w_floor=0.5)


def test_gzh1_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    vals = rng.random((24, 40)).astype(np.float32)
    p = tmp_path / "h.gzh"
    write_gzh1(p, vals)
    back = read_gzh1(p)
    assert back.dtype == np.float32
    assert np.array_equal(back, vals)
    # a second write of the loaded array produces identical bytes
    p2 = tmp_path / "h2.gzh"
    write_gzh1(p2, back)
    assert p.read_bytes() == p2.read_bytes()


def test_gzh1_error_paths(tmp_path):
    p = tmp_path / "x.gzh"
    p.write_bytes(b"JUNKxxxx")
    with pytest.raises(ValueError, match="not a GZH1 file"):
        read_gzh1(p)
    write_gzh1(p, np.zeros((16, 16), dtype=np.float32))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated GZH1"):
        read_gzh1(p)
    with pytest.raises(ValueError, match="2-D"):
        write_gzh1(tmp_path / "y.gzh", np.zeros((2, 3, 4), dtype=np.float32))


def test_synthetic_gaze_to_weights_pipeline(tiny_target):
    # end to end: trajectory -> heatmap -> weights, shapes and ranges hold
    item = tiny_target.items[0]
    heat = rasterize_heatmap(item.gaze, item.image.height, item.image.width,
                             sigma=3.0)
    w = regularize_to_weights(heat, w_floor=0.5)
    assert w.values.shape == item.image.pixels.shape
    assert math.isclose(float(heat.values.max()), 1.0, rel_tol=1e-6)
