import numpy as np
import pytest
from hypothesis import given, strategies as st

from usnav.geometry import RigidTransform, SimilarityTransform, random_rigid, random_rotation, rotation_about
from usnav.phantom import gen_pivot_poses
from usnav.pointreg import (
    CorrespondencePairs,
    DegenerateConfigurationError,
    IllConditionedError,
    TimeSeries,
    UndefinedCorrelationError,
    fit_rigid,
    fit_similarity,
    pivot_calibrate,
    stylus_correspondences,
    temporal_align,
)

seeds = st.integers(0, 2**32 - 1)


def test_rigid_identity():
    p = np.random.default_rng(0).normal(size=(10, 3))
    T, rep = fit_rigid(CorrespondencePairs(p, p))
    assert np.allclose(T.matrix, np.eye(4), atol=1e-12)
    assert rep.rms_residual < 1e-12


def test_rigid_known_motion():
    p = np.random.default_rng(1).uniform(-50, 50, (10, 3))
    truth = RigidTransform.from_rt(rotation_about([0, 0, 1], np.pi / 2), [1, 2, 3])
    T, rep = fit_rigid(CorrespondencePairs(truth.apply(p), p))
    assert np.abs(T.matrix - truth.matrix).max() < 1e-9
    assert rep.rms_residual < 1e-9


@given(seeds)
def test_rigid_recovers_random_motion(seed):
    rng = np.random.default_rng(seed)
    truth = random_rigid(rng, 50.0)
    p = rng.uniform(-40, 40, (8, 3))
    T, _ = fit_rigid(CorrespondencePairs(truth.apply(p), p))
    assert np.abs(T.matrix - truth.matrix).max() < 1e-8


def test_rigid_collinear_refused():
    p = np.outer(np.arange(6.0), [1, 2, 3])
    with pytest.raises(DegenerateConfigurationError):
        fit_rigid(CorrespondencePairs(p, p))


def test_rigid_reflection_flagged():
    p = np.random.default_rng(2).normal(size=(12, 3))
    mirrored = p * [1, 1, -1]
    T, rep = fit_rigid(CorrespondencePairs(mirrored, p))
    assert rep.reflection_corrected
    assert np.linalg.det(T.rotation) > 0


def test_pairs_length_mismatch():
    with pytest.raises(ValueError):
        CorrespondencePairs(np.zeros((4, 3)), np.zeros((5, 3)))


def test_similarity_identity():
    p = np.random.default_rng(3).normal(size=(10, 3))
    T, _ = fit_similarity(CorrespondencePairs(p, p))
    assert np.allclose(T.scale, 1.0)
    assert np.allclose(T.matrix, np.eye(4), atol=1e-12)


def test_similarity_pixel_scale():
    rng = np.random.default_rng(4)
    px = np.column_stack([rng.uniform(0, 640, 20), rng.uniform(0, 480, 20), np.zeros(20)])
    truth = SimilarityTransform.from_rst(random_rotation(rng), 0.077, [5.0, -3.0, 40.0])
    T, _ = fit_similarity(CorrespondencePairs(truth.apply(px), px))
    assert np.all(np.abs(T.scale / 0.077 - 1) < 1e-6)


def test_anisotropic_similarity():
    rng = np.random.default_rng(5)
    p = rng.uniform(-30, 30, (20, 3))
    truth = SimilarityTransform.from_rst(random_rotation(rng), [0.5, 0.7, 1.2], [1.0, 2.0, 3.0])
    T, rep = fit_similarity(CorrespondencePairs(truth.apply(p), p), isotropic=False)
    assert np.allclose(T.scale, [0.5, 0.7, 1.2], rtol=1e-6)
    assert rep.rms_residual < 1e-6


def test_anisotropic_coplanar_refused():
    rng = np.random.default_rng(6)
    px = np.column_stack([rng.uniform(0, 100, 10), rng.uniform(0, 100, 10), np.zeros(10)])
    with pytest.raises(DegenerateConfigurationError):
        fit_similarity(CorrespondencePairs(px * 0.1, px), isotropic=False)


def test_stylus_correspondences_recover_calibration():
    rng = np.random.default_rng(7)
    probe_T_us = SimilarityTransform.from_rst(random_rotation(rng), 0.1, [10.0, 0.0, 5.0])
    tip = np.array([0.0, 0.0, 120.0])
    px = np.column_stack([rng.uniform(0, 400, 15), rng.uniform(0, 300, 15)])
    probes, styli = [], []
    for uv in px:
        P = random_rigid(rng, 200.0)
        tip_ot = (P @ probe_T_us).apply([uv[0], uv[1], 0.0])
        R = random_rotation(rng)
        styli.append(RigidTransform.from_rt(R, tip_ot - R @ tip))
        probes.append(P)
    pairs = stylus_correspondences(styli, tip, probes, px)
    T, rep = fit_similarity(pairs)
    assert np.abs(T.matrix - probe_T_us.matrix).max() < 1e-9


def test_pivot_pure_rotations():
    rng = np.random.default_rng(8)
    poses = [RigidTransform.from_rt(rotation_about(rng.normal(size=3), np.radians(a)))
             for a in np.linspace(5, 60, 10)]
    res = pivot_calibrate(poses)
    assert np.allclose(res.pivot_point, 0, atol=1e-9)
    assert np.allclose(res.tip_offset, 0, atol=1e-9)


def test_pivot_noiseless():
    rng = np.random.default_rng(9)
    tip, piv = np.array([1.0, -2.0, 130.0]), np.array([5.0, 6.0, -200.0])
    res = pivot_calibrate(gen_pivot_poses(tip, piv, 12, 0.0, rng))
    assert np.allclose(res.tip_offset, tip, atol=1e-8)
    assert np.allclose(res.pivot_point, piv, atol=1e-8)
    assert res.rms < 1e-8


def test_pivot_narrow_range_refused():
    rng = np.random.default_rng(10)
    with pytest.raises(IllConditionedError):
        pivot_calibrate(gen_pivot_poses([0, 0, 100], [0, 0, 0], 10, 0.0, rng, max_angle_deg=5.0))


def test_pivot_needs_six_poses():
    with pytest.raises(ValueError):
        pivot_calibrate([RigidTransform.identity()] * 5)


def _sweep(t):
    return np.sin(2 * np.pi * (0.2 * t + 0.15 * t * t))


def test_temporal_identical():
    t = np.linspace(0, 10, 501)
    r = temporal_align(TimeSeries(t, _sweep(t)), TimeSeries(t, _sweep(t)), 1.0)
    assert abs(r.lag) < 1e-12
    assert r.peak_ncc == pytest.approx(1.0)


def test_temporal_shift():
    t = np.linspace(0, 10, 501)
    a = TimeSeries(t, _sweep(t))
    b = TimeSeries(t, _sweep(t - 0.30))  # b delayed by 0.3 s
    r = temporal_align(a, b, 1.0)
    assert abs(r.lag - 0.30) <= r.grid_step / 2


def test_temporal_white_noise():
    rng = np.random.default_rng(11)
    t = np.arange(1000) * 0.01
    r = temporal_align(TimeSeries(t, rng.normal(size=1000)), TimeSeries(t, rng.normal(size=1000)), 0.5)
    assert abs(r.peak_ncc) < 0.2


def test_temporal_constant_refused():
    t = np.linspace(0, 1, 20)
    with pytest.raises(UndefinedCorrelationError):
        temporal_align(TimeSeries(t, np.ones(20)), TimeSeries(t, t), 0.1)


def test_temporal_no_overlap():
    a = TimeSeries(np.linspace(0, 1, 20), np.arange(20.0))
    b = TimeSeries(np.linspace(5, 6, 20), np.arange(20.0))
    with pytest.raises(ValueError):
        temporal_align(a, b, 0.5)
