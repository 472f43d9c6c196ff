import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import cKDTree

from usnav.compound import (
    STICK_DIRECTIONS,
    EmptyInputError,
    TrackedFrame,
    VolumeGrid,
    compound,
    stick_hole_fill,
)
from usnav.geometry import Frame, RigidTransform, SimilarityTransform, rotation_about
from usnav.volume import Volume

from oracles import brute_force_fill

IDENTITY_US = SimilarityTransform.from_rst(None, 1.0, None, Frame.US_IMAGE, Frame.PROBE)


def _pose(R=None, t=None):
    return RigidTransform.from_rt(R, t, Frame.PROBE, Frame.TRACKER)


def test_aligned_splat_is_exact():
    rng = np.random.default_rng(0)
    img = rng.uniform(0.01, 1.0, (6, 8))
    grid = VolumeGrid((8, 6, 3), (1.0, 1.0, 1.0), (0.0, 0.0, -1.0))
    vol, rep = compound([TrackedFrame(0.0, _pose(), img)], IDENTITY_US, grid=grid)
    assert np.array_equal(vol.voxels[:, :, 1], img.T.astype(np.float32).astype(float))
    assert vol.filled[:, :, 1].all()
    assert not vol.filled[:, :, 0].any() and not vol.filled[:, :, 2].any()
    assert rep.voxels_filled == 48


def test_coincident_frames_keep_maximum():
    grid = VolumeGrid((4, 4, 1), (1.0, 1.0, 1.0))
    a = TrackedFrame(0.0, _pose(), np.full((4, 4), 10 / 255))
    b = TrackedFrame(0.1, _pose(), np.full((4, 4), 20 / 255))
    vol, _ = compound([a, b], IDENTITY_US, grid=grid)
    assert np.allclose(vol.voxels, np.float32(20 / 255))


def _random_frames(rng, n, size=(12, 10)):
    frames = []
    for k in range(n):
        R = rotation_about(rng.normal(size=3), rng.uniform(0, 0.4))
        frames.append(TrackedFrame(k * 0.1, _pose(R, rng.uniform(-2, 2, 3)), rng.uniform(0, 1, size[::-1])))
    return frames


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_frame_order_invariance(seed):
    rng = np.random.default_rng(seed)
    frames = _random_frames(rng, 6)
    grid = VolumeGrid.from_bounds([-8, -8, -8], [20, 20, 12], 0.7)
    a, _ = compound(frames, IDENTITY_US, grid=grid)
    b, _ = compound([frames[i] for i in rng.permutation(6)], IDENTITY_US, grid=grid)
    assert np.array_equal(a.voxels, b.voxels)
    assert np.array_equal(a.filled, b.filled)


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_adding_frames_is_monotone(seed):
    rng = np.random.default_rng(seed)
    frames = _random_frames(rng, 6)
    grid = VolumeGrid.from_bounds([-8, -8, -8], [20, 20, 12], 0.7)
    a, _ = compound(frames[:3], IDENTITY_US, grid=grid)
    b, _ = compound(frames, IDENTITY_US, grid=grid)
    assert np.all(b.voxels >= a.voxels)
    assert np.all(b.filled >= a.filled)


def test_fan_over_sphere_covers_oracle():
    """Voxels within a quarter voxel (per axis) of some mapped pixel must be filled,
    and those inside the sphere must carry signal."""
    centre, radius = np.array([10.0, 10.0, 0.0]), 6.0
    us = SimilarityTransform.from_rst(None, 0.5, None, Frame.US_IMAGE, Frame.PROBE)
    frames, pts = [], []
    v, u = np.mgrid[0:40, 0:40]
    pix = np.column_stack([u.ravel(), v.ravel(), np.zeros(u.size)]).astype(float)
    for ang in np.radians(np.linspace(-30, 30, 13)):
        pose = _pose(rotation_about([1, 0, 0], ang), [0.0, 10.0 - 10.0 * np.cos(ang), -10.0 * np.sin(ang)])
        world = (pose @ us).apply(pix)
        inten = (np.linalg.norm(world - centre, axis=1) < radius).astype(float)
        frames.append(TrackedFrame(0.0, pose, inten.reshape(40, 40)))
        pts.append(world)
    grid = VolumeGrid.from_bounds([-1, -1, -8], [21, 21, 8], 1.0)
    vol, _ = compound(frames, us, grid=grid)
    centres = vol.grid_points().reshape(-1, 3)
    d, _ = cKDTree(np.concatenate(pts)).query(centres, p=np.inf)
    hit = (d <= 0.25).reshape(vol.dims)
    assert hit.sum() > 500
    assert np.all(vol.filled[hit])
    in_sphere = (np.linalg.norm(centres - centre, axis=1) < radius - 1.0).reshape(vol.dims)
    assert np.all(vol.voxels[hit & in_sphere] > 0)


def test_invalid_frames_skipped():
    good = TrackedFrame(0.0, _pose(), np.ones((3, 3)))
    bad = TrackedFrame(0.1, _pose(None, [0, 0, 5]), np.ones((3, 3)), valid=False)
    vol, rep = compound([good, bad], IDENTITY_US, spacing=1.0)
    assert rep.frames_used == 1 and rep.frames_skipped == 1


def test_no_valid_frames():
    bad = TrackedFrame(0.0, _pose(), np.ones((3, 3)), valid=False)
    with pytest.raises(EmptyInputError):
        compound([bad], IDENTITY_US, spacing=1.0)


def test_degenerate_bounds():
    with pytest.raises(ValueError):
        VolumeGrid.from_bounds([0, 0, 0], [5, 0, 5], 1.0)


def test_stick_midpoint():
    vals = np.zeros((3, 1, 1))
    mask = np.zeros((3, 1, 1), bool)
    vals[0], vals[2] = 10.0, 20.0
    mask[0] = mask[2] = True
    out = stick_hole_fill(Volume(vals, filled=mask))
    assert out.voxels[1, 0, 0] == 15.0
    assert out.filled.all()


@pytest.mark.parametrize("gap,filled", [(9, True), (10, False)])
def test_stick_reach_boundary(gap, filled):
    n = 2 * gap + 1
    vals = np.zeros((n, 1, 1))
    mask = np.zeros((n, 1, 1), bool)
    vals[0], vals[-1] = 3.0, 5.0
    mask[0] = mask[-1] = True
    out = stick_hole_fill(Volume(vals, filled=mask), stick_length=9)
    assert out.filled[gap, 0, 0] == filled
    if filled:
        assert out.voxels[gap, 0, 0] == 4.0


def test_stick_needs_both_ends():
    vals = np.zeros((5, 1, 1))
    mask = np.zeros((5, 1, 1), bool)
    mask[0] = True
    out = stick_hole_fill(Volume(vals, filled=mask))
    assert not out.filled[1:].any()


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 0.9), st.integers(1, 4))
def test_stick_matches_brute_force_small(seed, hole_frac, L):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0, 1, (7, 6, 5))
    mask = rng.uniform(size=vals.shape) > hole_frac
    out = stick_hole_fill(Volume(vals, filled=mask), L)
    ref, ref_mask = brute_force_fill(vals, mask, L)
    assert np.array_equal(out.filled, ref_mask)
    assert np.allclose(out.voxels[ref_mask], ref[ref_mask], rtol=0, atol=1e-12)


def test_directions_cover_all_lines():
    lines = {tuple(d) for d in STICK_DIRECTIONS} | {tuple(-d) for d in STICK_DIRECTIONS}
    assert lines == set(itertools.product((-1, 0, 1), repeat=3)) - {(0, 0, 0)}
