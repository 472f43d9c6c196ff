import numpy as np
import pytest
from hypothesis import given, strategies as st

from usnav.geometry import (
    AffineTransform,
    Frame,
    FrameMismatchError,
    ProjectionMatrix,
    RigidTransform,
    SimilarityTransform,
    SingularTransformError,
    compose,
    compose_chain,
    invert,
    ortho_error,
    polar_orthonormalize,
    project_points,
    random_rigid,
    random_rotation,
    rotation_about,
    rotation_angle,
)

seeds = st.integers(0, 2**32 - 1)


def test_identity_apply():
    p = np.array([[1.0, -2.0, 3.5]])
    assert np.array_equal(RigidTransform.identity().apply(p), p)


def test_quarter_turn_about_z():
    T = RigidTransform.from_rt(rotation_about([0, 0, 1], np.pi / 2))
    assert np.allclose(T.apply([1.0, 0, 0]), [0, 1, 0], atol=1e-15)


def test_invert_translation():
    T = RigidTransform.from_rt(None, [1, 2, 3])
    assert np.allclose(invert(T).translation, [-1, -2, -3])
    assert np.allclose(invert(RigidTransform.identity()).matrix, np.eye(4))


@given(seeds)
def test_invert_keeps_kind_and_swaps_frames(seed):
    rng = np.random.default_rng(seed)
    R = random_rigid(rng, source=Frame.US_IMAGE, target=Frame.PROBE)
    S = SimilarityTransform.from_rst(random_rotation(rng), rng.uniform(0.05, 2), rng.normal(size=3),
                                     Frame.US_IMAGE, Frame.PROBE)
    for T in (R, S):
        Ti = invert(T)
        assert type(Ti) is type(T)
        assert (Ti.source, Ti.target) == (T.target, T.source)
        assert np.allclose((Ti @ T).matrix, np.eye(4), atol=1e-10)


def test_anisotropic_similarity_inverse_is_affine():
    S = SimilarityTransform.from_rst(np.eye(3), [1.0, 2.0, 3.0])
    Si = invert(S)
    assert isinstance(Si, AffineTransform)
    assert np.allclose(Si.matrix @ S.matrix, np.eye(4))


def test_singular_affine_refused():
    M = np.eye(4)
    M[2, 2] = 0.0
    with pytest.raises(SingularTransformError):
        invert(AffineTransform(M))


def test_compose_checks_frames():
    a = RigidTransform.identity(Frame.PROBE, Frame.TRACKER)
    b = RigidTransform.identity(Frame.US_IMAGE, Frame.ROBOT)
    with pytest.raises(FrameMismatchError) as err:
        compose(a, b)
    assert "ProbeMarker" in str(err.value) and "RobotBase" in str(err.value)


def test_compose_rigid_similarity_kind():
    a = RigidTransform.identity(Frame.PROBE, Frame.TRACKER)
    b = SimilarityTransform.from_rst(None, 0.1, None, Frame.US_IMAGE, Frame.PROBE)
    assert isinstance(a @ b, SimilarityTransform)


def test_canonical_projection():
    M = ProjectionMatrix(np.hstack([np.eye(3), np.zeros((3, 1))]))
    assert np.allclose(project_points(M, [[0, 0, 2]]), [[0, 0]])
    assert np.allclose(project_points(M, [[1, 1, 2]]), [[0.5, 0.5]])


def test_chain_all_identity():
    M = ProjectionMatrix(np.hstack([np.eye(3), np.zeros((3, 1))]))
    P = compose_chain(
        M,
        RigidTransform.identity(Frame.ENDOSCOPE, Frame.ROBOT),
        RigidTransform.identity(Frame.TRACKER, Frame.ROBOT),
        RigidTransform.identity(Frame.PROBE, Frame.TRACKER),
        SimilarityTransform.from_rst(None, 1.0, None, Frame.US_IMAGE, Frame.PROBE),
    )
    assert P.source == Frame.US_IMAGE
    assert np.allclose(project_points(P, [[0, 0, 1]]), [[0, 0]])


def test_chain_pure_scaling():
    M = ProjectionMatrix(np.hstack([np.eye(3), np.zeros((3, 1))]))
    P = compose_chain(
        M,
        RigidTransform.identity(Frame.ENDOSCOPE, Frame.ROBOT),
        RigidTransform.identity(Frame.TRACKER, Frame.ROBOT),
        RigidTransform.identity(Frame.PROBE, Frame.TRACKER),
        SimilarityTransform.from_rst(None, 0.1, None, Frame.US_IMAGE, Frame.PROBE),
    )
    # pixel (10, 0) at z = 10 px -> 1 mm deep, x = 1 mm
    assert np.allclose(project_points(P, [[10, 0, 10]]), [[1.0, 0.0]])


def test_chain_frame_mismatch():
    M = ProjectionMatrix(np.hstack([np.eye(3), np.zeros((3, 1))]))
    with pytest.raises(FrameMismatchError):
        compose_chain(
            M,
            RigidTransform.identity(Frame.ENDOSCOPE, Frame.ROBOT),
            RigidTransform.identity(Frame.TRACKER, Frame.ROBOT),
            RigidTransform.identity(Frame.STYLUS, Frame.TRACKER),
            SimilarityTransform.from_rst(None, 0.1, None, Frame.US_IMAGE, Frame.PROBE),
        )


@given(seeds)
def test_polar_orthonormalize_repairs_drift(seed):
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    noisy = R + rng.normal(scale=1e-8, size=(3, 3))
    Q = polar_orthonormalize(noisy)
    assert ortho_error(Q) < 1e-12
    assert np.linalg.det(Q) > 0
    assert np.abs(Q - R).max() < 1e-7


def test_rigid_rejects_reflection():
    M = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(ValueError):
        RigidTransform(M)


@given(st.floats(0.0, np.pi - 1e-3), seeds)
def test_rotation_angle_roundtrip(angle, seed):
    axis = np.random.default_rng(seed).normal(size=3)
    assert abs(rotation_angle(rotation_about(axis, angle)) - angle) < 1e-7
