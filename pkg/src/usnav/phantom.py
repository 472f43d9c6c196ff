"""Synthetic ground-truth fixtures.

* :func:`gen_wire_grid_run` / :func:`evaluate_waterbath` -- the water-bath
  wire-grid accuracy experiment: tracked sweeps over a 5x5 grid with
  10 mm pitch, calibration errors injected from an :class:`ErrorBudget`,
  projected to a 960x540 stereo rig.
* :func:`gen_multimodal_pair` -- MRI-like/US-like volume pair related by
  a known affine, with landmarks and a vessel centreline.
* :func:`gen_smooth_deformation` -- Gaussian-bump displacement fields.
* :func:`gen_point_pairs`, :func:`gen_pixel_pairs`, :func:`gen_pivot_poses`,
  :func:`holdout_residual` -- Monte-Carlo calibration protocols.

Every generator is deterministic given its inputs and seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .camera import StereoRig, match_points, project, projection_error_stats, triangulate
from .compound import TrackedFrame, TrackedSequence, compound
from .defreg import DisplacementField, field_stats
from .evaluate import LandmarkSet, Polyline
from .geometry import (
    AffineTransform,
    Frame,
    ProjectionMatrix,
    RigidTransform,
    SimilarityTransform,
    Transform,
    invert,
    random_rigid,
    rotation_about,
)
from .pointreg import CorrespondencePairs, fit_rigid, fit_similarity, residuals
from .volume import Volume

# Perturbation rotations produce the stated error at this distance (mm).
LEVER_ARM_MM = 100.0
# Simulated US frame (W, H) in pixels of 0.4 mm: 48 x 20 mm.
US_FRAME_SIZE = (120, 50)


class CoverageError(ValueError):
    pass


class ConstraintError(ValueError):
    pass


def random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturbation(rng: np.random.Generator, magnitude_mm: float, source, target) -> RigidTransform:
    """Translation of length ``magnitude_mm`` in a random direction plus a random-axis
    rotation of ``magnitude_mm / 100 mm`` radians."""
    t = magnitude_mm * random_unit(rng)
    R = rotation_about(random_unit(rng), magnitude_mm / LEVER_ARM_MM)
    return RigidTransform.from_rt(R, t, source, target)


# ---------------------------------------------------------------------------
# Water-bath wire grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorBudget:
    tracker_noise_sigma: float = 0.25
    us_calib_error: float = 0.8
    robot_calib_error: float = 2.0
    camera_calib_error: float = 4.5
    label_noise_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "seed" and v < 0:
                raise ValueError(f"{k} must be >= 0")

    @classmethod
    def zero(cls, seed: int = 0) -> "ErrorBudget":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, seed)

    @classmethod
    def from_json(cls, path) -> "ErrorBudget":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class WireGridScene:
    """5x5 grid of wire crossings, 10 mm pitch, in its own frame (z = 0 plane)."""

    pose: RigidTransform
    spacing: float = 10.0
    n: int = 5
    wire_radius: float = 0.5

    def local_points(self) -> np.ndarray:
        ax = (np.arange(self.n) - (self.n - 1) / 2.0) * self.spacing
        gx, gy = np.meshgrid(ax, ax, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])

    def points(self) -> np.ndarray:
        """Grid points in the tracker frame."""
        return self.pose.apply(self.local_points())


@dataclass(frozen=True)
class SweepSpec:
    """Linear probe sweep; the probe's image plane is swept along its elevation axis."""

    length: float = 48.0
    step: float = 0.4
    frame_size: tuple = US_FRAME_SIZE  # (W, H) pixels
    wobble_deg: float = 1.0
    frame_rate: float = 30.0
    dropout: float = 0.0


@dataclass(frozen=True)
class WaterbathSetup:
    """Ground-truth geometry of the simulated system (all mm)."""

    probe_T_us: SimilarityTransform
    dv_T_ot: RigidTransform
    dv_T_ecm: RigidTransform
    rig: StereoRig
    scene_poses: tuple


def default_rig(focal: float = 800.0, baseline: float = 20.0, image_size=(960, 540)) -> StereoRig:
    w, h = image_size
    K = np.array([[focal, 0, w / 2.0], [0, focal, h / 2.0], [0, 0, 1.0]])
    left = ProjectionMatrix.from_krt(K, np.eye(3), [baseline / 2.0, 0, 0])
    right = ProjectionMatrix.from_krt(K, np.eye(3), [-baseline / 2.0, 0, 0])
    return StereoRig(left, right, tuple(image_size))


def default_setup(placements: int = 3) -> WaterbathSetup:
    """Probe looking down into a water bath seen by an endoscope ~150 mm away."""
    px_mm = 0.4
    # US image: u lateral (x), v depth (-z), image plane normal along y.
    R_us = np.array([[1.0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]])
    probe_T_us = SimilarityTransform.from_rst(R_us, px_mm, [-30.0, 0.0, -5.0], Frame.US_IMAGE, Frame.PROBE)
    # Robot base ~250 mm from the scene, tracker 1 m away: only the composite matters.
    dv_T_ot = RigidTransform.from_rt(rotation_about([0, 0, 1], np.radians(150)), [-400.0, 900.0, -100.0],
                                     Frame.TRACKER, Frame.ROBOT)
    ot_T_dv = invert(dv_T_ot)
    scene_centre_ot = ot_T_dv.apply([150.0, 120.0, -80.0])
    # Endoscope 150 mm above the bath, optical axis (z) looking down.
    R_cam = rotation_about([1, 0, 0], np.pi) @ rotation_about([0, 0, 1], np.radians(20))
    cam_centre_dv = dv_T_ot.apply(scene_centre_ot) + np.array([0.0, 0.0, 150.0])
    dv_T_ecm = RigidTransform.from_rt(R_cam, cam_centre_dv, Frame.ENDOSCOPE, Frame.ROBOT)
    poses = []
    R_scene = ot_T_dv.rotation
    offsets = [(0.0, 0.0, 0.0), (-15.0, 10.0, 3.0), (15.0, -10.0, -3.0), (5.0, 15.0, 0.0), (-10.0, -15.0, 2.0)]
    for k in range(placements):
        off = np.array(offsets[k % len(offsets)])
        yaw = rotation_about([0, 0, 1], np.radians(10.0 * k))
        poses.append(RigidTransform.from_rt(R_scene @ yaw, scene_centre_ot + R_scene @ off, Frame.VOLUME, Frame.TRACKER))
    return WaterbathSetup(probe_T_us, dv_T_ot, dv_T_ecm, default_rig(), tuple(poses))


@dataclass
class WireGridTruth:
    grid_points: np.ndarray  # tracker frame
    probe_T_us: SimilarityTransform
    dv_T_ot: RigidTransform
    dv_T_ecm: RigidTransform
    rig: StereoRig
    true_px_left: np.ndarray
    true_px_right: np.ndarray
    true_poses: list


@dataclass
class WireGridRun:
    """Observable data (corrupted) plus the uncorrupted truth of one placement."""

    sequence: TrackedSequence
    truth: WireGridTruth
    probe_T_us: SimilarityTransform  # as calibrated (perturbed)
    dv_T_ot: RigidTransform  # as calibrated (perturbed)
    dv_T_ecm: RigidTransform  # read from the robot, exact
    rig: StereoRig  # as calibrated (perturbed)
    labeled_px_left: np.ndarray
    labeled_px_right: np.ndarray
    projected_px_left: np.ndarray
    projected_px_right: np.ndarray
    wire_radius: float = 0.5


@dataclass
class CalibratedSystem:
    """Perturbed calibrations shared by all placements of one simulated session."""

    probe_T_us: SimilarityTransform
    dv_T_ot: RigidTransform
    rig: StereoRig
    stylus_pairs: CorrespondencePairs
    robot_pairs: CorrespondencePairs


def perturb_system(setup: WaterbathSetup, budget: ErrorBudget, rng: np.random.Generator) -> CalibratedSystem:
    """Apply the budget's calibration errors and emit matching calibration data.

    The correspondences are exact under the perturbed transforms, so the
    least-squares calibrations recover precisely the injected error.
    """
    d_us = perturbation(rng, budget.us_calib_error, Frame.PROBE, Frame.PROBE)
    d_robot = perturbation(rng, budget.robot_calib_error, Frame.ROBOT, Frame.ROBOT)
    d_cam = perturbation(rng, budget.camera_calib_error, Frame.ENDOSCOPE, Frame.ENDOSCOPE)
    # Rotations act about the point the transform's error is measured at:
    # the US image centre, the scene, and the scene as seen by the camera.
    w, h = US_FRAME_SIZE
    us_c = setup.probe_T_us.apply([w / 2.0, h / 2.0, 0.0])
    scene_dv = setup.dv_T_ot.apply(setup.scene_poses[0].translation)
    scene_ecm = invert(setup.dv_T_ecm).apply(scene_dv)
    probe_T_us = _about(d_us, us_c) @ setup.probe_T_us
    dv_T_ot = _about(d_robot, scene_dv + np.array([0, 0, -LEVER_ARM_MM])) @ setup.dv_T_ot
    dcam = _about(d_cam, scene_ecm - np.array([0, 0, LEVER_ARM_MM]))
    rig = StereoRig(setup.rig.left @ dcam, setup.rig.right @ dcam, setup.rig.image_size)

    probe_T_us = SimilarityTransform(probe_T_us.matrix, Frame.US_IMAGE, Frame.PROBE)
    px = np.column_stack([rng.uniform(5, w - 5, 25), rng.uniform(5, h - 5, 25), np.zeros(25)])
    stylus_pairs = CorrespondencePairs(probe_T_us.apply(px), px, Frame.US_IMAGE, Frame.PROBE)
    tips_dv = scene_dv + rng.uniform(-60, 60, (50, 3))
    robot_pairs = CorrespondencePairs(invert(dv_T_ot).apply(tips_dv), tips_dv, Frame.ROBOT, Frame.TRACKER)
    return CalibratedSystem(probe_T_us, dv_T_ot, rig, stylus_pairs, robot_pairs)


def _about(d: RigidTransform, centre) -> RigidTransform:
    """Same perturbation with its rotation taken about ``centre``."""
    c = np.asarray(centre, float)
    R = d.rotation
    return RigidTransform.from_rt(R, d.translation + c - R @ c, d.source, d.target)


def render_frame(us_to_ot: Transform, size, points_ot: np.ndarray, sigma: float) -> np.ndarray:
    """Wire crossings as isotropic Gaussian blobs (std ``sigma`` mm) in one US image."""
    w, h = size
    v, u = np.mgrid[0:h, 0:w]
    pix = np.column_stack([u.ravel(), v.ravel(), np.zeros(u.size)]).astype(float)
    world = us_to_ot.apply(pix)
    img = np.zeros(len(pix))
    # Only blobs within 4 sigma of the plane can light up the frame.
    n = us_to_ot.linear[:, 2] / np.linalg.norm(us_to_ot.linear[:, 2])
    c0 = us_to_ot.translation
    for p in points_ot:
        if abs(np.dot(p - c0, n)) > 4 * sigma:
            continue
        d2 = np.sum((world - p) ** 2, axis=1)
        img = np.maximum(img, np.exp(-d2 / (2 * sigma * sigma)))
    return img.reshape(h, w)


def _sweep_poses(setup: WaterbathSetup, scene: WireGridScene, sweep: SweepSpec, rng) -> list:
    """Probe poses ``OT <- Probe`` moving along the grid's y axis above it."""
    R_scene = scene.pose.rotation
    grid_c = scene.pose.translation
    depth = 16.0  # grid plane sits this deep in the image
    us_centre = np.array([(sweep.frame_size[0] - 1) / 2.0, 0.0, 0.0])
    poses = []
    n = int(np.floor(sweep.length / sweep.step)) + 1
    for k in range(n):
        y = -sweep.length / 2.0 + k * sweep.step
        wob = rotation_about(random_unit(rng), np.radians(sweep.wobble_deg) * rng.uniform(-1, 1))
        # Probe frame: x along grid x, -z towards the grid (depth), y elevation.
        R = R_scene @ wob
        # Place the US image centre column above the grid line at height `depth`.
        p_c = setup.probe_T_us.apply(us_centre)
        target = grid_c + R_scene @ np.array([0.0, y, depth])
        t = target - R @ p_c
        poses.append(RigidTransform.from_rt(R, t, Frame.PROBE, Frame.TRACKER))
    return poses


def gen_wire_grid_run(
    scene: WireGridScene,
    budget: ErrorBudget,
    rig: StereoRig | None = None,
    sweep: SweepSpec = SweepSpec(),
    setup: WaterbathSetup | None = None,
    system: CalibratedSystem | None = None,
    rng: np.random.Generator | None = None,
) -> WireGridRun:
    """Simulate one tracked sweep over the wire grid plus the camera observations."""
    rng = np.random.default_rng(budget.seed) if rng is None else rng
    setup = default_setup() if setup is None else setup
    if rig is not None:
        setup = replace(setup, rig=rig)
    if system is None:
        system = perturb_system(setup, budget, rng)

    pts = scene.points()
    true_poses = _sweep_poses(setup, scene, sweep, rng)
    frames = []
    seen = np.zeros(len(pts), bool)
    for k, P in enumerate(true_poses):
        us_to_ot = P @ setup.probe_T_us
        # 8-bit quantised like a real scanner, so the sequence file is lossless.
        img = np.round(render_frame(us_to_ot, sweep.frame_size, pts, scene.wire_radius) * 255.0) / 255.0
        local = invert(us_to_ot).apply(pts)
        w, h = sweep.frame_size
        seen |= (np.abs(local[:, 2]) * float(setup.probe_T_us.scale[2]) < scene.wire_radius) & (
            local[:, 0] >= 0) & (local[:, 0] <= w - 1) & (local[:, 1] >= 0) & (local[:, 1] <= h - 1)
        noisy = P
        if budget.tracker_noise_sigma > 0:
            dt = rng.normal(scale=budget.tracker_noise_sigma, size=3)
            dR = rotation_about(random_unit(rng), rng.normal(scale=budget.tracker_noise_sigma / LEVER_ARM_MM))
            noisy = RigidTransform.from_rt(dR @ P.rotation, P.translation + dt, Frame.PROBE, Frame.TRACKER)
        valid = not (sweep.dropout > 0 and rng.uniform() < sweep.dropout)
        frames.append(TrackedFrame(k / sweep.frame_rate, noisy, img, (float(setup.probe_T_us.scale[0]),) * 2, valid))
    if not seen.all():
        raise CoverageError(f"sweep misses {int((~seen).sum())} of {len(pts)} grid points")

    ecm_T_dv = invert(setup.dv_T_ecm)
    true_ecm = ecm_T_dv.apply(setup.dv_T_ot.apply(pts))
    tl = project(setup.rig.left, true_ecm)[0]
    tr = project(setup.rig.right, true_ecm)[0]
    noise = rng.normal(scale=budget.label_noise_sigma, size=(2,) + tl.shape) if budget.label_noise_sigma > 0 else 0.0
    est_ecm = ecm_T_dv.apply(system.dv_T_ot.apply(pts))
    truth = WireGridTruth(pts, setup.probe_T_us, setup.dv_T_ot, setup.dv_T_ecm, setup.rig, tl, tr, true_poses)
    return WireGridRun(
        sequence=TrackedSequence(frames, frames[0].pixel_spacing),
        truth=truth,
        probe_T_us=system.probe_T_us,
        dv_T_ot=system.dv_T_ot,
        dv_T_ecm=setup.dv_T_ecm,
        rig=system.rig,
        labeled_px_left=tl + (noise[0] if np.ndim(noise) else 0.0),
        labeled_px_right=tr + (noise[1] if np.ndim(noise) else 0.0),
        projected_px_left=project(system.rig.left, est_ecm)[0],
        projected_px_right=project(system.rig.right, est_ecm)[0],
        wire_radius=scene.wire_radius,
    )


def gen_waterbath_session(budget: ErrorBudget, placements: int = 3, sweep: SweepSpec = SweepSpec(),
                          setup: WaterbathSetup | None = None) -> tuple[CalibratedSystem, list]:
    """One calibration, several grid placements (3 x 25 points by default)."""
    rng = np.random.default_rng(budget.seed)
    setup = default_setup(placements) if setup is None else setup
    system = perturb_system(setup, budget, rng)
    runs = [
        gen_wire_grid_run(WireGridScene(pose), budget, sweep=sweep, setup=setup, system=system, rng=rng)
        for pose in setup.scene_poses[:placements]
    ]
    return system, runs


def segment_blobs(vol: Volume, count: int, threshold: float = 0.25, smooth: float = 1.5) -> np.ndarray:
    """World centroids of the ``count`` heaviest connected components above
    ``threshold * max``; intensity-weighted.

    The volume is first blurred by ``smooth`` voxels, which removes the
    ripple that trilinear splatting leaves on small blobs.
    """
    data = np.where(vol.filled, np.asarray(vol.voxels, float), 0.0)
    if smooth > 0:
        data = ndimage.gaussian_filter(data, smooth)
    mask = data > threshold * data.max()
    labels, n = ndimage.label(mask)
    if n < count:
        raise CoverageError(f"found {n} bright components, expected {count}")
    lab = labels.ravel()
    w = data.ravel()
    mass = np.bincount(lab, weights=w, minlength=n + 1)
    mass[0] = -np.inf
    keep = np.argsort(-mass, kind="stable")[:count]
    idx = np.indices(data.shape).reshape(3, -1)
    cents = np.column_stack(
        [np.bincount(lab, weights=w * idx[a], minlength=n + 1)[keep] for a in range(3)]
    ) / mass[keep, None]
    return vol.index_to_world(cents)


@dataclass
class WaterbathResult:
    pixel_left: object
    pixel_right: object
    error_3d: object
    predicted_left: np.ndarray
    predicted_right: np.ndarray
    points_ecm_predicted: np.ndarray
    points_ecm_labeled: np.ndarray

    def summary(self) -> dict:
        return {
            "pixel_left": {"mean": self.pixel_left.mean, "std": self.pixel_left.std},
            "pixel_right": {"mean": self.pixel_right.mean, "std": self.pixel_right.std},
            "error_3d": {"mean": self.error_3d.mean, "std": self.error_3d.std},
            "n": int(len(self.error_3d.per_point)),
        }


def compound_spacing(probe_T_us: SimilarityTransform) -> float:
    """Voxel size matching the US pixel size (mm)."""
    return float(probe_T_us.scale[0])


def predict_pixels(points_ot, dv_T_ecm, dv_T_ot, rig: StereoRig):
    ecm_T_ot = invert(dv_T_ecm) @ dv_T_ot
    ecm = ecm_T_ot.apply(points_ot)
    return project(rig.left, ecm)[0], project(rig.right, ecm)[0]


def evaluate_detections(points_ot, dv_T_ecm, dv_T_ot, rig: StereoRig, labeled_left, labeled_right) -> WaterbathResult:
    """Project detected wire points, pair them with labels, and score pixels and 3D."""
    pl, pr = predict_pixels(points_ot, dv_T_ecm, dv_T_ot, rig)
    lab = np.hstack([labeled_left, labeled_right])
    order = match_points(np.hstack([pl, pr]), lab)
    pl, pr = pl[order], pr[order]
    tri_pred = triangulate(rig, pl, pr).points
    tri_lab = triangulate(rig, labeled_left, labeled_right).points
    return WaterbathResult(
        projection_error_stats(pl, labeled_left),
        projection_error_stats(pr, labeled_right),
        projection_error_stats(tri_pred, tri_lab),
        pl,
        pr,
        tri_pred,
        tri_lab,
    )


def calibrate_system(system: CalibratedSystem) -> tuple[SimilarityTransform, RigidTransform]:
    """Re-estimate probe and robot calibrations from the emitted correspondences."""
    probe_T_us, _ = fit_similarity(system.stylus_pairs, isotropic=True)
    ot_T_dv, _ = fit_rigid(system.robot_pairs)
    return probe_T_us, invert(ot_T_dv)


def evaluate_waterbath(run: WireGridRun, probe_T_us=None, dv_T_ot=None, spacing: float | None = None,
                       threshold: float = 0.25) -> WaterbathResult:
    """End-to-end: compound with the calibrated probe transform, segment the
    wires, project through the calibrated chain and compare with labels."""
    probe_T_us = run.probe_T_us if probe_T_us is None else probe_T_us
    dv_T_ot = run.dv_T_ot if dv_T_ot is None else dv_T_ot
    vol, _ = compound(run.sequence, probe_T_us, spacing or compound_spacing(probe_T_us))
    pts = segment_blobs(vol, len(run.truth.grid_points), threshold)
    return evaluate_detections(pts, run.dv_T_ecm, dv_T_ot, run.rig, run.labeled_px_left, run.labeled_px_right)


def simulate_waterbath(budget: ErrorBudget, placements: int = 3, sweep: SweepSpec = SweepSpec()) -> WaterbathResult:
    """Full simulated experiment: calibrate, then compound/segment/project every placement."""
    system, runs = gen_waterbath_session(budget, placements, sweep)
    probe_T_us, dv_T_ot = calibrate_system(system)
    return pooled([evaluate_waterbath(r, probe_T_us, dv_T_ot) for r in runs])


def camera_attributed_error(camera_calib_error: float, seed: int, placements: int = 1) -> WaterbathResult:
    """Error caused by the camera calibration alone.

    Every other budget component is zero and the true grid points stand in
    for the segmented ones, so the remaining error is the camera's share.
    """
    budget = replace(ErrorBudget.zero(seed), camera_calib_error=camera_calib_error)
    setup = default_setup(placements)
    system = perturb_system(setup, budget, np.random.default_rng(seed))
    results = []
    for pose in setup.scene_poses[:placements]:
        pts = WireGridScene(pose).points()
        ecm = invert(setup.dv_T_ecm).apply(setup.dv_T_ot.apply(pts))
        tl, tr = project(setup.rig.left, ecm)[0], project(setup.rig.right, ecm)[0]
        results.append(evaluate_detections(pts, setup.dv_T_ecm, system.dv_T_ot, system.rig, tl, tr))
    return pooled(results)


def pooled(results: list) -> WaterbathResult:
    """Concatenate several placements into one set of statistics."""
    from .camera import error_stats

    cat = lambda f: np.concatenate([f(r) for r in results])  # noqa: E731
    return WaterbathResult(
        error_stats(cat(lambda r: r.pixel_left.per_point)),
        error_stats(cat(lambda r: r.pixel_right.per_point)),
        error_stats(cat(lambda r: r.error_3d.per_point)),
        cat(lambda r: r.predicted_left),
        cat(lambda r: r.predicted_right),
        cat(lambda r: r.points_ecm_predicted),
        cat(lambda r: r.points_ecm_labeled),
    )


# ---------------------------------------------------------------------------
# Multimodal volume pair
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MultimodalPair:
    us: Volume
    mri: Volume
    truth: AffineTransform  # US mm -> MRI mm
    landmarks: LandmarkSet  # fixed = MRI, moving = US
    centerline_us: Polyline
    centerline_mri: Polyline


class _MRIModel:
    """Analytic MRI-like intensity: soft ellipsoids, a dark tube, gentle texture."""

    def __init__(self, extent: float, rng: np.random.Generator):
        c = extent / 2.0
        self.blobs = []
        for _ in range(7):
            centre = c + rng.uniform(-0.28, 0.28, 3) * extent
            axes = rng.uniform(0.08, 0.2, 3) * extent
            R = rotation_about(random_unit(rng), rng.uniform(0, np.pi))
            self.blobs.append((centre, axes, R, rng.uniform(0.25, 0.6)))
        s = np.linspace(0, 1, 400)
        a = rng.uniform(0.15, 0.22) * extent
        path = np.column_stack(
            [c + (s - 0.5) * 0.75 * extent, c + a * np.sin(2.2 * s + 0.3), c + 0.5 * a * np.cos(1.7 * s)]
        )
        self.centerline = path
        self.tube_radius = 0.045 * extent
        self.tree = cKDTree(path)
        self.waves = [(random_unit(rng) * rng.uniform(0.1, 0.3), rng.uniform(0, 2 * np.pi)) for _ in range(4)]

    def __call__(self, p: np.ndarray) -> np.ndarray:
        shape = p.shape[:-1]
        p = p.reshape(-1, 3)
        val = np.full(len(p), 0.15)
        for centre, axes, R, inten in self.blobs:
            loc = (p - centre) @ R / axes
            r = np.sqrt(np.sum(loc * loc, axis=1))
            val += inten * _sigmoid((1.0 - r) * 12.0)
        for k, ph in self.waves:
            val += 0.03 * np.sin(p @ k + ph)
        d, _ = self.tree.query(p)
        val = val * (1.0 - 0.8 * _sigmoid((self.tube_radius - d) * 3.0))
        return val.reshape(shape)


def gen_multimodal_pair(size: int | tuple = 64, truth: Transform | None = None, seed: int = 0,
                        spacing: float = 1.0, speckle: float = 0.25) -> MultimodalPair:
    """MRI-like volume and a US-like rendering of it through ``truth`` (US -> MRI).

    The US intensity is a nonlinear function of MRI intensity, brightened
    at MRI edges, times spatially correlated Rayleigh-like speckle.
    """
    dims = (size,) * 3 if np.isscalar(size) else tuple(size)
    if min(dims) < 32:
        raise ValueError("multimodal fixtures need at least 32 voxels per axis")
    rng = np.random.default_rng(seed)
    truth = AffineTransform(np.eye(4) if truth is None else truth.matrix, Frame.VOLUME, Frame.MRI)
    extent = float(min(dims) - 1) * spacing
    model = _MRIModel(extent, rng)

    mri = Volume(np.zeros(dims), (spacing,) * 3)
    mri = mri.with_voxels(model(mri.grid_points()))
    us_grid = Volume(np.zeros(dims), (spacing,) * 3)
    m_us = model(truth.apply(us_grid.grid_points()))
    # |grad m| in MRI space from the US-space gradient: A^-T grad_x.
    gx = np.stack(np.gradient(m_us, *us_grid.spacing), axis=-1)
    g = np.linalg.norm(gx @ np.linalg.inv(truth.linear), axis=-1)
    us = 0.1 + 0.7 * m_us**2 + 1.5 * g
    if speckle > 0:
        r = rng.rayleigh(1.0, dims) / np.sqrt(np.pi / 2.0)
        r = ndimage.gaussian_filter(r, 0.6)
        r /= r.mean()
        us = us * ((1.0 - speckle) + speckle * r)
    us_vol = us_grid.with_voxels(us)

    inv = invert(truth)
    marks = [b[0] for b in model.blobs] + list(model.centerline[::80])
    mri_marks = np.array(marks)
    lm = LandmarkSet(mri_marks, inv.apply(mri_marks), tuple(f"lm{i}" for i in range(len(marks))))
    cl_mri = Polyline(model.centerline)
    cl_us = Polyline(inv.apply(model.centerline))
    return MultimodalPair(us_vol, mri, truth, lm, cl_us, cl_mri)


# ---------------------------------------------------------------------------
# Smooth deformation
# ---------------------------------------------------------------------------


def gen_smooth_deformation(grid: Volume, max_mm: float, seed: int = 0, n_bumps: int | None = None,
                           min_jacobian: float = 0.2, attempts: int = 8) -> DisplacementField:
    """Sum of 3-6 Gaussian bumps rescaled so the largest displacement is ``max_mm``.

    Bumps are widened until the Jacobian determinant stays above
    ``min_jacobian``; if that fails, a :class:`ConstraintError` is raised.
    """
    if max_mm <= 0:
        raise ValueError("max_mm must be > 0")
    rng = np.random.default_rng(seed)
    pts = grid.grid_points()
    extent = (np.array(grid.dims) - 1) * np.array(grid.spacing)
    lo = np.asarray(grid.origin) + 0.2 * extent
    k = int(rng.integers(3, 7)) if n_bumps is None else int(n_bumps)
    bumps = [
        (lo + rng.uniform(0, 0.6, 3) * extent, random_unit(rng), rng.uniform(0.5, 1.0), rng.uniform(0.15, 0.25))
        for _ in range(k)
    ]
    widen = 1.0
    for _ in range(attempts):
        u = np.zeros(grid.dims + (3,))
        for c, d, a, w in bumps:
            sig = w * widen * extent.min()
            r2 = np.sum((pts - c) ** 2, axis=-1)
            u += (a * np.exp(-r2 / (2 * sig * sig)))[..., None] * d
        u *= max_mm / np.linalg.norm(u, axis=-1).max()
        fld = DisplacementField(u, grid.spacing, grid.origin, grid.orientation)
        if field_stats(fld).jacobian_min > min_jacobian:
            return fld
        widen *= 1.25
    raise ConstraintError(
        f"cannot reach {max_mm} mm with Jacobian > {min_jacobian} on this grid; try a smaller max_mm"
    )


def warp_volume(vol: Volume, fld: DisplacementField) -> Volume:
    """``out(y) = vol(y + d(y))`` on the field's grid, zero outside ``vol``."""
    pts = fld.grid().grid_points()
    vals, _ = vol.sample(pts + fld.vectors)
    return Volume(vals, fld.spacing, fld.origin)


# ---------------------------------------------------------------------------
# Calibration Monte-Carlo protocols
# ---------------------------------------------------------------------------


def gen_point_pairs(n: int, noise: float, rng: np.random.Generator, extent: float = 100.0,
                    source=Frame.TRACKER, target=Frame.ROBOT) -> tuple[CorrespondencePairs, RigidTransform]:
    """Random points in a cube of side ``extent`` mapped by a random rigid
    transform; isotropic Gaussian noise of std ``noise`` on the fixed side only."""
    truth = random_rigid(rng, 100.0, source, target)
    moving = rng.uniform(-extent / 2, extent / 2, (n, 3))
    fixed = truth.apply(moving) + rng.normal(scale=noise, size=(n, 3))
    return CorrespondencePairs(fixed, moving, source, target), truth


def gen_pixel_pairs(n: int, noise: float, rng: np.random.Generator, mm_per_px: float = 0.077,
                    size=(640, 480)) -> tuple[CorrespondencePairs, SimilarityTransform]:
    """Stylus-tip style pairs: US pixels (z = 0) against probe-frame mm."""
    R = random_rigid(rng).rotation
    truth = SimilarityTransform.from_rst(R, mm_per_px, rng.normal(scale=30.0, size=3), Frame.US_IMAGE, Frame.PROBE)
    px = np.column_stack([rng.uniform(0, size[0], n), rng.uniform(0, size[1], n), np.zeros(n)])
    fixed = truth.apply(px) + rng.normal(scale=noise, size=(n, 3))
    return CorrespondencePairs(fixed, px, Frame.US_IMAGE, Frame.PROBE), truth


def holdout_residual(pairs: CorrespondencePairs, n_fit: int, fit) -> float:
    """Fit on the first ``n_fit`` pairs; mean residual on the rest."""
    T, _ = fit(pairs.subset(slice(0, n_fit)))
    return float(residuals(T, pairs.subset(slice(n_fit, None))).mean())


def gen_pivot_poses(tip_offset, pivot_point, n: int, noise: float, rng: np.random.Generator,
                    max_angle_deg: float = 60.0) -> list:
    """Stylus poses rotating about ``pivot_point`` with the tip fixed there.

    Orientations are random tilts of up to ``max_angle_deg``; ``noise`` is
    the std (mm) of Gaussian noise on each pose translation.
    """
    tip = np.asarray(tip_offset, float)
    pivot = np.asarray(pivot_point, float)
    poses = []
    for _ in range(n):
        R = rotation_about(random_unit(rng), np.radians(rng.uniform(0, max_angle_deg)))
        t = pivot - R @ tip + rng.normal(scale=noise, size=3)
        poses.append(RigidTransform.from_rt(R, t, Frame.STYLUS, Frame.TRACKER))
    return poses
