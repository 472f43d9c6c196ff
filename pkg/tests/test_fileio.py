import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from usnav import fileio as fio
from usnav.compound import TrackedFrame, TrackedSequence
from usnav.defreg import DisplacementField
from usnav.evaluate import LandmarkSet, Polyline
from usnav.geometry import AffineTransform, Frame, RigidTransform, SimilarityTransform, random_rigid, random_rotation
from usnav.phantom import default_rig
from usnav.pointreg import CorrespondencePairs, TimeSeries
from usnav.volume import Volume

seeds = st.integers(0, 2**32 - 1)


def _twice(write, read, obj, tmp_path, name):
    """write -> read -> write must reproduce the first file byte for byte."""
    a, b = tmp_path / ("a_" + name), tmp_path / ("b_" + name)
    write(obj, a)
    back = read(a)
    write(back, b)
    assert a.read_bytes() == b.read_bytes()
    return back


@settings(max_examples=20)
@given(seeds)
def test_transform_round_trip(tmp_path_factory, seed):
    tmp = tmp_path_factory.mktemp("tf")
    rng = np.random.default_rng(seed)
    for T in (
        random_rigid(rng, 50.0, Frame.PROBE, Frame.TRACKER),
        SimilarityTransform.from_rst(random_rotation(rng), rng.uniform(0.01, 1), rng.normal(size=3),
                                     Frame.US_IMAGE, Frame.PROBE),
        AffineTransform(np.vstack([rng.normal(size=(3, 4)) + np.hstack([np.eye(3), np.zeros((3, 1))]),
                                   [0, 0, 0, 1]]), Frame.VOLUME, Frame.MRI),
    ):
        back = _twice(fio.write_transform, fio.read_transform, T, tmp, "t.txt")
        assert type(back) is type(T)
        assert np.array_equal(back.matrix, T.matrix)
        assert (back.source, back.target) == (T.source, T.target)


def test_rig_round_trip(tmp_path):
    rig = default_rig()
    back = _twice(fio.write_rig, fio.read_rig, rig, tmp_path, "rig.txt")
    assert np.array_equal(back.left.matrix, rig.left.matrix)
    assert back.image_size == rig.image_size


def test_pose_list_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    poses = [random_rigid(rng, 30.0, Frame.STYLUS, Frame.TRACKER) for _ in range(8)]
    back = _twice(fio.write_pose_list, fio.read_pose_list, poses, tmp_path, "p.txt")
    assert all(np.array_equal(a.matrix, b.matrix) for a, b in zip(poses, back))


def test_volume_round_trip_with_mask(tmp_path):
    rng = np.random.default_rng(1)
    v = rng.uniform(size=(5, 4, 3)).astype(np.float32).astype(float)
    vol = Volume(v, (0.5, 0.25, 2.0), (1.0, -2.0, 3.5), rng.uniform(size=v.shape) > 0.3)
    back = _twice(fio.write_volume, fio.read_volume, vol, tmp_path, "v.vol")
    assert np.array_equal(back.voxels, vol.voxels)
    assert np.array_equal(back.filled, vol.filled)
    assert back.spacing == vol.spacing and back.origin == vol.origin
    assert fio.mask_path(tmp_path / "a_v.vol").exists()


def test_volume_layout_x_fastest(tmp_path):
    v = np.arange(24, dtype=float).reshape(4, 3, 2)
    fio.write_volume(Volume(v), tmp_path / "v.vol")
    payload = (tmp_path / "v.vol").read_bytes().split(b"data raw\n", 1)[1]
    assert np.array_equal(np.frombuffer(payload, "<f4")[:4], v[:, 0, 0])


def test_full_mask_removes_stale_sibling(tmp_path):
    p = tmp_path / "v.vol"
    fio.write_volume(Volume(np.ones((2, 2, 2)), filled=np.eye(2, dtype=bool)[:, :, None].repeat(2, 2)), p)
    assert fio.mask_path(p).exists()
    fio.write_volume(Volume(np.ones((2, 2, 2))), p)
    assert not fio.mask_path(p).exists()


def test_volume_short_payload(tmp_path):
    p = tmp_path / "bad.vol"
    head = b"VOLUME v1\ndims 3 3 3\nspacing 1.0 1.0 1.0\norigin 0.0 0.0 0.0\ndtype f32\ndata raw\n"
    p.write_bytes(head + np.zeros(26, "<f4").tobytes())
    with pytest.raises(fio.LengthError) as err:
        fio.read_volume(p)
    assert "108" in str(err.value) and "104" in str(err.value)
    assert (err.value.expected, err.value.actual) == (108, 104)


def test_volume_bad_magic(tmp_path):
    p = tmp_path / "bad.vol"
    p.write_bytes(b"NOTAVOLUME\n")
    with pytest.raises(fio.FormatError):
        fio.read_volume(p)


def test_volume_rotated_refused(tmp_path):
    from usnav.geometry import rotation_about
    vol = Volume(np.zeros((2, 2, 2)), orientation=rotation_about([0, 0, 1], 0.3))
    with pytest.raises(fio.FormatError):
        fio.write_volume(vol, tmp_path / "r.vol")


def test_field_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    u = rng.normal(size=(4, 3, 5, 3)).astype(np.float32).astype(float)
    fld = DisplacementField(u, (1.0, 2.0, 0.5), (3.0, 0.0, -1.0))
    back = _twice(fio.write_field, fio.read_field, fld, tmp_path, "f.fld")
    assert np.array_equal(back.vectors, fld.vectors)


def _sequence(n, rng, w=12, h=7):
    frames = []
    for k in range(n):
        img = rng.integers(0, 256, (h, w)) / 255.0
        pose = random_rigid(rng, 40.0, Frame.PROBE, Frame.TRACKER)
        frames.append(TrackedFrame(k / 30.0, pose, img, (0.3, 0.3), bool(k % 7)))
    return TrackedSequence(frames, (0.3, 0.3))


def test_sequence_round_trip_200_frames(tmp_path):
    seq = _sequence(200, np.random.default_rng(3))
    back = _twice(fio.write_sequence, fio.read_sequence, seq, tmp_path, "s.seq")
    assert len(back) == 200
    for a, b in zip(seq, back):
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.pose.matrix, b.pose.matrix)
        assert (a.timestamp, a.valid) == (b.timestamp, b.valid)


def test_sequence_reflection_pose(tmp_path):
    p = tmp_path / "s.seq"
    fio.write_sequence(_sequence(2, np.random.default_rng(4)), p)
    text = p.read_bytes()
    lines = text.split(b"\n")
    # first pose row of frame 0 sits right after the 't ... valid' line
    i = next(k for k, ln in enumerate(lines) if ln.startswith(b"t "))
    rows = [np.array(lines[i + r].split(), float) for r in (1, 2, 3)]
    rows[2][:3] *= -1  # flip the third axis -> det = -1
    for r in (0, 1, 2):
        lines[i + 1 + r] = " ".join(repr(float(x)) for x in rows[r]).encode()
    p.write_bytes(b"\n".join(lines))
    with pytest.raises(fio.PoseError) as err:
        fio.read_sequence(p)
    assert err.value.frame == 0


def test_sequence_truncated(tmp_path):
    p = tmp_path / "s.seq"
    fio.write_sequence(_sequence(3, np.random.default_rng(5)), p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(fio.LengthError):
        fio.read_sequence(p)


def test_csv_round_trips(tmp_path):
    rng = np.random.default_rng(6)
    pairs = CorrespondencePairs(rng.normal(size=(9, 3)), rng.normal(size=(9, 3)), Frame.US_IMAGE, Frame.PROBE)
    back = _twice(fio.write_pairs, lambda p: fio.read_pairs(p, Frame.US_IMAGE, Frame.PROBE), pairs, tmp_path,
                  "pairs.csv")
    assert np.array_equal(back.fixed, pairs.fixed) and np.array_equal(back.moving, pairs.moving)

    lm = LandmarkSet(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), ("a", "b", "c", "d"))
    back = _twice(fio.write_landmarks, fio.read_landmarks, lm, tmp_path, "lm.csv")
    assert back.labels == lm.labels and np.array_equal(back.fixed, lm.fixed)

    line = Polyline(rng.normal(size=(30, 3)))
    back = _twice(fio.write_polyline, fio.read_polyline, line, tmp_path, "cl.csv")
    assert np.array_equal(back.vertices, line.vertices)

    ts = TimeSeries(np.cumsum(rng.uniform(0.01, 0.1, 50)), rng.normal(size=50))
    back = _twice(fio.write_timeseries, fio.read_timeseries, ts, tmp_path, "ts.csv")
    assert np.array_equal(back.values, ts.values)

    px = rng.uniform(0, 960, (25, 2))
    back = _twice(fio.write_pixels, fio.read_pixels, px, tmp_path, "px.csv")
    assert np.array_equal(back, px)

    pts = rng.normal(size=(5, 3))
    back = _twice(fio.write_polyline_points, fio.read_points, pts, tmp_path, "pts.csv")
    assert np.array_equal(back, pts)


def test_csv_bad_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(fio.FormatError):
        fio.read_landmarks(p)


def test_json_handles_numpy_and_nan(tmp_path):
    p = tmp_path / "r.json"
    fio.write_json({"b": np.float64(1.5), "a": np.arange(3), "c": float("nan")}, p)
    assert fio.read_json(p) == {"a": [0, 1, 2], "b": 1.5, "c": None}


def test_report_records_checksums(tmp_path):
    f = tmp_path / "in.txt"
    f.write_text("hello")
    rep = fio.RunReport(command="x", seed=3)
    rep.add_input(f)
    rep.write(tmp_path / "rep.json")
    d = fio.read_json(tmp_path / "rep.json")
    assert d["inputs"][str(f)] == fio.sha256(f)
    assert d["seed"] == 3


def test_zero_volume_round_trip(tmp_path):
    back = _twice(fio.write_volume, fio.read_volume, Volume(np.zeros((2, 2, 2))), tmp_path, "z.vol")
    assert np.array_equal(back.voxels, np.zeros((2, 2, 2)))


def test_random_volume_checksum_stable(tmp_path):
    vol = Volume(np.random.default_rng(9).uniform(size=(64, 64, 64)))
    fio.write_volume(vol, tmp_path / "a.vol")
    fio.write_volume(fio.read_volume(tmp_path / "a.vol"), tmp_path / "b.vol")
    assert fio.sha256(tmp_path / "a.vol") == fio.sha256(tmp_path / "b.vol")


def test_single_identity_frame(tmp_path):
    seq = TrackedSequence([TrackedFrame(0.0, RigidTransform.identity(Frame.PROBE, Frame.TRACKER), np.zeros((3, 4)))])
    back = _twice(fio.write_sequence, fio.read_sequence, seq, tmp_path, "one.seq")
    assert np.array_equal(back.frames[0].pose.matrix, np.eye(4))
