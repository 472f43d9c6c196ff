import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from usnav.evaluate import compute_tre
from usnav.geometry import AffineTransform, Frame, rotation_about
from usnav.mvreg import (
    AffineParams,
    LC2Config,
    NoOverlapError,
    OptimizerOptions,
    lc2_metric,
    register_affine_lc2,
)
from usnav.phantom import gen_multimodal_pair
from usnav.volume import Volume

I = AffineTransform(np.eye(4), Frame.VOLUME, Frame.MRI)


def _smooth_volume(seed, n=24, sigma=2.5):
    rng = np.random.default_rng(seed)
    return Volume(ndimage.gaussian_filter(rng.normal(size=(n,) * 3), sigma))


def _about_centre(c, t, deg, axis):
    R = rotation_about(axis, np.radians(deg))
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = c + np.asarray(t, float) - R @ c
    return AffineTransform(M, Frame.VOLUME, Frame.MRI)


def test_self_similarity():
    m = _smooth_volume(0)
    assert abs(lc2_metric(m, m, I, LC2Config(patch_radius=3)) - 1.0) < 1e-6


def test_linear_intensity_map():
    m = _smooth_volume(1)
    us = m.with_voxels(2.0 * m.voxels + 5.0)
    assert abs(lc2_metric(us, m, I, LC2Config(patch_radius=3)) - 1.0) < 1e-6


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_linear_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    m = _smooth_volume(seed % 1000)
    us = Volume(rng.uniform(size=m.dims))
    cfg = LC2Config(patch_radius=3)
    base = lc2_metric(us, m, I, cfg)
    scaled = lc2_metric(us.with_voxels(a * us.voxels + b), m, I, cfg)
    assert abs(base - scaled) < 1e-6


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_metric_bounds(seed):
    rng = np.random.default_rng(seed)
    us = Volume(rng.uniform(size=(16, 16, 16)) ** rng.uniform(0.5, 3))
    mri = Volume(ndimage.gaussian_filter(rng.normal(size=(16, 16, 16)), rng.uniform(0.5, 3)))
    v = lc2_metric(us, mri, I, LC2Config(patch_radius=2))
    assert 0.0 <= v <= 1.0 + 1e-9


def test_noise_scores_low():
    mri = _smooth_volume(2, n=64, sigma=4.0)
    scores = [lc2_metric(Volume(np.random.default_rng(s).uniform(size=(64,) * 3)), mri, I) for s in range(20)]
    assert max(scores) < 0.2


def test_no_overlap():
    m = _smooth_volume(3)
    far = AffineTransform(np.eye(4) + np.pad(np.array([[1000.0], [0], [0]]), ((0, 1), (3, 0))),
                          Frame.VOLUME, Frame.MRI)
    with pytest.raises(NoOverlapError):
        lc2_metric(m, m, far)
    with pytest.raises(NoOverlapError):
        register_affine_lc2(m, m, far)


def test_affine_params_round_trip():
    x = np.arange(12) * 0.01
    p = AffineParams.from_vector(x)
    assert np.array_equal(p.to_vector(), x)
    assert np.allclose(AffineParams().to_matrix([3, 4, 5]), np.eye(4))


def test_multimodal_fixture_sanity():
    pair = gen_multimodal_pair(48, None, seed=0, speckle=0.0)
    assert lc2_metric(pair.us, pair.mri, I) > 0.8
    assert compute_tre(pair.landmarks, pair.truth).total.mean == 0.0


def test_register_fixed_point():
    pair = gen_multimodal_pair(32, seed=1)
    res = register_affine_lc2(pair.mri, pair.mri, I)
    assert np.abs(res.transform.translation).max() < 0.1
    assert res.metric == pytest.approx(1.0, abs=1e-6)


def test_register_never_worse_than_init():
    pair = gen_multimodal_pair(32, seed=2)
    res = register_affine_lc2(pair.us, pair.mri, I, opt=OptimizerOptions(levels=1, max_iter=20, restarts=0))
    assert res.metric >= res.initial_metric
    for lvl in res.trace:
        assert all(b >= a for a, b in zip(lvl[:-1], lvl[1:]))


@pytest.mark.slow
def test_capture_range():
    """Init 10 mm / 10 deg away from a (5, -3, 2) mm / 5 deg truth; landmark TRE must drop below a voxel."""
    c = np.full(3, 31.5)
    truth = _about_centre(c, (5, -3, 2), 5.0, (1, 2, 3))
    pair = gen_multimodal_pair(64, truth, seed=0)
    off = _about_centre(c, np.array([1, 1, -1]) / np.sqrt(3) * 10, 10.0, (-2, 1, 1))
    init = AffineTransform(truth.matrix @ off.matrix, Frame.VOLUME, Frame.MRI)
    assert compute_tre(pair.landmarks, init).total.mean > 5.0
    res = register_affine_lc2(pair.us, pair.mri, init)
    assert compute_tre(pair.landmarks, res.transform).total.mean < 1.0
