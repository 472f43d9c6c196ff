"""Homogeneous 3D transforms between named coordinate frames.

Every transform carries its ``source`` and ``target`` frame. Composition
``A @ B`` means "apply B, then A" and requires ``B.target == A.source``.
All lengths are millimetres; the only pixel-to-mm conversion in the chain
is the per-axis scale of a :class:`SimilarityTransform` whose source is
``Frame.US_IMAGE``.

The 4x4 (or 3x4) matrix is the canonical storage for every kind, so a
transform written to text with ``repr`` precision reads back bit-exact.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9
# Rotations drifting further than this are rejected outright, not repaired.
ORTHO_REJECT_TOL = 1e-6
SINGULAR_TOL = 1e-12


class Frame(str, enum.Enum):
    US_IMAGE = "USImage"
    PROBE = "ProbeMarker"
    TRACKER = "OpticalTracker"
    ROBOT = "RobotBase"
    ENDOSCOPE = "Endoscope"
    CAMERA_IMAGE = "CameraImage"
    STYLUS = "Stylus"
    STYLUS_TIP = "StylusTip"
    TOOL_MARKER = "ToolMarker"
    MRI = "MRI"
    VOLUME = "Volume"

    def __str__(self) -> str:
        return self.value


class FrameMismatchError(ValueError):
    """Raised when two transforms are chained across incompatible frames."""

    def __init__(self, expected: Frame, got: Frame):
        super().__init__(f"frame chain broken: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class SingularTransformError(ValueError):
    pass


def _as_frame(f) -> Frame:
    return f if isinstance(f, Frame) else Frame(f)


def ortho_error(R: np.ndarray) -> float:
    """Max-abs deviation of ``R.T @ R`` from identity."""
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


def polar_orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation to ``R`` in the Frobenius sense (polar factor)."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def _checked_rotation(R: np.ndarray) -> np.ndarray:
    err = max(ortho_error(R), abs(np.linalg.det(R) - 1.0))
    if not np.isfinite(err) or err > ORTHO_REJECT_TOL:
        raise ValueError(f"not a proper rotation (deviation {err:.3g})")
    if err > ORTHO_TOL:
        R = polar_orthonormalize(R)
    return R


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * angle).as_matrix()


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle of ``R`` in radians, in [0, pi]."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class Transform:
    """Base for homogeneous 3D maps; ``matrix`` is 4x4 with last row (0,0,0,1)."""

    matrix: np.ndarray
    source: Frame = Frame.VOLUME
    target: Frame = Frame.VOLUME

    kind = "AFFINE"

    def __post_init__(self):
        M = np.array(self.matrix, dtype=float)
        if M.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {M.shape}")
        if not np.all(np.isfinite(M)):
            raise ValueError("transform matrix has non-finite entries")
        M[3] = (0.0, 0.0, 0.0, 1.0)
        M = self._validate(M)
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "source", _as_frame(self.source))
        object.__setattr__(self, "target", _as_frame(self.target))

    def _validate(self, M: np.ndarray) -> np.ndarray:
        if abs(np.linalg.det(M[:3, :3])) <= SINGULAR_TOL:
            raise SingularTransformError("affine transform is singular")
        return M

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def apply(self, points, frame: Frame | None = None) -> np.ndarray:
        """Map an (N,3) or (3,) array of points; optional frame check."""
        if frame is not None and _as_frame(frame) != self.source:
            raise FrameMismatchError(self.source, _as_frame(frame))
        p = np.asarray(points, dtype=float)
        return p @ self.linear.T + self.translation

    def apply_vectors(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.linear.T

    def inverse(self) -> "Transform":
        return invert(self)

    def __matmul__(self, other: "Transform") -> "Transform":
        return compose(self, other)

    def with_frames(self, source, target) -> "Transform":
        return type(self)(self.matrix, source, target)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.source}->{self.target},\n{self.matrix})"


class AffineTransform(Transform):
    kind = "AFFINE"


class RigidTransform(Transform):
    kind = "RIGID"

    def _validate(self, M):
        M[:3, :3] = _checked_rotation(M[:3, :3])
        return M

    @classmethod
    def from_rt(cls, R=None, t=None, source=Frame.VOLUME, target=Frame.VOLUME):
        M = np.eye(4)
        if R is not None:
            M[:3, :3] = R
        if t is not None:
            M[:3, 3] = t
        return cls(M, source, target)

    @classmethod
    def identity(cls, source=Frame.VOLUME, target=None):
        return cls(np.eye(4), source, source if target is None else target)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]


class SimilarityTransform(Transform):
    """``p -> R @ diag(scale) @ p + t`` with positive per-axis scale."""

    kind = "SIMILARITY"

    def _validate(self, M):
        L = M[:3, :3]
        s = np.linalg.norm(L, axis=0)
        if np.any(s <= 0):
            raise ValueError("similarity scale factors must be positive")
        R = L / s
        err = max(ortho_error(R), abs(np.linalg.det(R) - 1.0))
        if err > ORTHO_REJECT_TOL:
            raise ValueError(f"similarity rotation part is not a rotation ({err:.3g})")
        if err > ORTHO_TOL:
            M[:3, :3] = polar_orthonormalize(R) * s
        return M

    @classmethod
    def from_rst(cls, R=None, scale=1.0, t=None, source=Frame.VOLUME, target=Frame.VOLUME):
        s = np.broadcast_to(np.asarray(scale, dtype=float), (3,))
        M = np.eye(4)
        M[:3, :3] = (np.eye(3) if R is None else np.asarray(R, dtype=float)) * s
        if t is not None:
            M[:3, 3] = t
        return cls(M, source, target)

    @property
    def scale(self) -> np.ndarray:
        return np.linalg.norm(self.linear, axis=0)

    @property
    def rotation(self) -> np.ndarray:
        return self.linear / self.scale

    @property
    def is_isotropic(self) -> bool:
        s = self.scale
        return bool(np.ptp(s) <= 1e-12 * s.max())


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """3x4 pinhole projection from a 3D frame to camera pixels."""

    matrix: np.ndarray
    source: Frame = Frame.ENDOSCOPE
    target: Frame = Frame.CAMERA_IMAGE

    kind = "PROJECTION"

    def __post_init__(self):
        M = np.array(self.matrix, dtype=float)
        if M.shape != (3, 4):
            raise ValueError(f"projection must be 3x4, got {M.shape}")
        if np.linalg.matrix_rank(M[:, :3]) < 3:
            raise SingularTransformError("projection 3x3 block is rank deficient")
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "source", _as_frame(self.source))
        object.__setattr__(self, "target", _as_frame(self.target))

    @classmethod
    def from_krt(cls, K, R, t, source=Frame.ENDOSCOPE):
        Rt = np.hstack([np.asarray(R, float), np.asarray(t, float).reshape(3, 1)])
        return cls(np.asarray(K, float) @ Rt, source, Frame.CAMERA_IMAGE)

    def __matmul__(self, other: Transform) -> "ProjectionMatrix":
        if other.target != self.source:
            raise FrameMismatchError(self.source, other.target)
        return ProjectionMatrix(self.matrix @ other.matrix, other.source, self.target)


def _result_kind(a: Transform, b: Transform) -> type:
    if isinstance(a, RigidTransform) and isinstance(b, RigidTransform):
        return RigidTransform
    # R1 (R2 S2 p + t2) + t1 keeps the scale on the source side.
    if isinstance(a, RigidTransform) and isinstance(b, SimilarityTransform):
        return SimilarityTransform
    if isinstance(a, SimilarityTransform) and isinstance(b, (RigidTransform, SimilarityTransform)):
        sa = a.scale
        if np.ptp(sa) <= 1e-12 * sa.max():
            return SimilarityTransform
    return AffineTransform


def compose(a: Transform, b: Transform) -> Transform:
    """``a @ b``: apply ``b`` first. Frames must chain."""
    if b.target != a.source:
        raise FrameMismatchError(a.source, b.target)
    return _result_kind(a, b)(a.matrix @ b.matrix, b.source, a.target)


def invert(T):
    """Inverse with source/target swapped; the kind is preserved."""
    if isinstance(T, RigidTransform):
        R = T.rotation
        M = np.eye(4)
        M[:3, :3] = R.T
        M[:3, 3] = -R.T @ T.translation
        return RigidTransform(M, T.target, T.source)
    if isinstance(T, SimilarityTransform):
        # (R S)^-1 = S^-1 R^T, which is not of the form R' S' unless S is isotropic.
        s, R = T.scale, T.rotation
        if not T.is_isotropic:
            L = (R.T) / s[:, None]
            M = np.eye(4)
            M[:3, :3] = L
            M[:3, 3] = -L @ T.translation
            return AffineTransform(M, T.target, T.source)
        return SimilarityTransform.from_rst(R.T, 1.0 / s, -(R.T @ T.translation) / s, T.target, T.source)
    if abs(np.linalg.det(T.linear)) <= SINGULAR_TOL:
        raise SingularTransformError("cannot invert a singular affine transform")
    return AffineTransform(np.linalg.inv(T.matrix), T.target, T.source)


def apply(T: Transform, points, frame: Frame | None = None) -> np.ndarray:
    return T.apply(points, frame)


def compose_chain(
    M: ProjectionMatrix,
    dv_T_ecm: RigidTransform,
    dv_T_ot: RigidTransform,
    ot_T_probe: RigidTransform,
    probe_T_us: SimilarityTransform,
) -> ProjectionMatrix:
    """US-image pixels to camera pixels: ``M (dv_T_ecm)^-1 dv_T_ot ot_T_probe probe_T_us``.

    The result is returned as a :class:`ProjectionMatrix` whose source is
    the US image frame; its third homogeneous coordinate is the divisor.
    """
    ecm_T_us = invert(dv_T_ecm) @ dv_T_ot @ ot_T_probe @ probe_T_us
    return M @ ecm_T_us


def project_points(P: ProjectionMatrix, points) -> np.ndarray:
    """Homogeneous multiply and perspective divide; (N,3) -> (N,2)."""
    p = np.asarray(points, dtype=float)
    h = p @ P.matrix[:, :3].T + P.matrix[:, 3]
    return h[..., :2] / h[..., 2:3]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def random_rigid(rng: np.random.Generator, t_scale=10.0, source=Frame.VOLUME, target=Frame.VOLUME):
    return RigidTransform.from_rt(random_rotation(rng), rng.normal(scale=t_scale, size=3), source, target)
