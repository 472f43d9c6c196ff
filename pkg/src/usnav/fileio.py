"""Readers and writers for the toolkit's plain file formats.

Text is UTF-8 with ``\\n`` newlines, floats are written with ``repr`` so
they read back bit-exact, and binary payloads are little-endian. Volumes
and fields store x as the fastest-varying axis.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import StereoRig
from .compound import TrackedFrame, TrackedSequence
from .defreg import DisplacementField
from .evaluate import LandmarkSet, Polyline
from .geometry import (
    ORTHO_REJECT_TOL,
    AffineTransform,
    Frame,
    ProjectionMatrix,
    RigidTransform,
    SimilarityTransform,
    ortho_error,
)
from .pointreg import CorrespondencePairs, TimeSeries
from .volume import Volume


class FormatError(ValueError):
    """Malformed header, bad magic or unparsable content."""


class LengthError(FormatError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"{path}: payload is {actual} bytes, expected {expected} bytes")
        self.expected = expected
        self.actual = actual


class PoseError(FormatError):
    def __init__(self, path, frame: int, why: str):
        super().__init__(f"{path}: invalid pose at frame {frame}: {why}")
        self.frame = frame


_KINDS = {"RIGID": RigidTransform, "SIMILARITY": SimilarityTransform, "AFFINE": AffineTransform}


def _f(x) -> str:
    return repr(float(x))


def _floats(tokens, path, what) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(f"{path}: bad number in {what}: {exc}") from None


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- transforms --------------------------------------------------------------


def format_transform(T) -> str:
    rows = [" ".join(_f(x) for x in row) for row in np.asarray(T.matrix)]
    return "\n".join([f"TRANSFORM v1 {T.kind} {T.source} {T.target}", *rows]) + "\n"


def parse_transform(lines: list[str], path="<text>"):
    head = lines[0].split() if lines else []
    if len(head) != 5 or head[:2] != ["TRANSFORM", "v1"]:
        raise FormatError(f"{path}: expected 'TRANSFORM v1 <kind> <source> <target>'")
    kind, src, dst = head[2:]
    try:
        src, dst = Frame(src), Frame(dst)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    nrows = 3 if kind == "PROJECTION" else 4
    if kind != "PROJECTION" and kind not in _KINDS:
        raise FormatError(f"{path}: unknown transform kind {kind!r}")
    if len(lines) < 1 + nrows:
        raise FormatError(f"{path}: expected {nrows} matrix rows")
    M = np.array([_floats(line.split(), path, "matrix") for line in lines[1 : 1 + nrows]])
    if M.shape != (nrows, 4):
        raise FormatError(f"{path}: matrix rows must have 4 entries")
    if kind == "PROJECTION":
        return ProjectionMatrix(M, src, dst)
    if not np.array_equal(M[3], [0.0, 0.0, 0.0, 1.0]):
        raise FormatError(f"{path}: last matrix row must be 0 0 0 1")
    return _KINDS[kind](M, src, dst)


def _blocks(text: str) -> list[list[str]]:
    out, cur = [], []
    for line in text.split("\n"):
        if line.strip():
            cur.append(line)
        elif cur:
            out.append(cur)
            cur = []
    if cur:
        out.append(cur)
    return out


def write_transform(T, path) -> None:
    Path(path).write_text(format_transform(T), encoding="utf-8")


def read_transform(path):
    blocks = _blocks(Path(path).read_text(encoding="utf-8"))
    if len(blocks) != 1:
        raise FormatError(f"{path}: expected exactly one TRANSFORM block")
    return parse_transform(blocks[0], path)


def write_pose_list(poses, path) -> None:
    Path(path).write_text("\n".join(format_transform(T) for T in poses), encoding="utf-8")


def read_pose_list(path) -> list:
    return [parse_transform(b, path) for b in _blocks(Path(path).read_text(encoding="utf-8"))]


def write_rig(rig: StereoRig, path) -> None:
    w, h = rig.image_size
    text = format_transform(rig.left) + "\n" + format_transform(rig.right) + f"\nimage_size {w} {h}\n"
    Path(path).write_text(text, encoding="utf-8")


def read_rig(path) -> StereoRig:
    blocks = _blocks(Path(path).read_text(encoding="utf-8"))
    if len(blocks) != 3 or not blocks[2][0].startswith("image_size"):
        raise FormatError(f"{path}: expected two PROJECTION blocks and an image_size line")
    left, right = (parse_transform(b, path) for b in blocks[:2])
    if not (isinstance(left, ProjectionMatrix) and isinstance(right, ProjectionMatrix)):
        raise FormatError(f"{path}: rig blocks must be PROJECTION transforms")
    size = blocks[2][0].split()[1:]
    if len(size) != 2:
        raise FormatError(f"{path}: image_size needs W H")
    return StereoRig(left, right, (int(size[0]), int(size[1])))


# --- volumes and fields ------------------------------------------------------


def _grid_header(magic: str, dims, spacing, origin, dtype: str) -> bytes:
    lines = [
        magic,
        "dims " + " ".join(str(int(n)) for n in dims),
        "spacing " + " ".join(_f(s) for s in spacing),
        "origin " + " ".join(_f(o) for o in origin),
        f"dtype {dtype}",
        "data raw",
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _read_header(fh, path, nlines: int) -> list[str]:
    out = []
    for _ in range(nlines):
        line = fh.readline()
        if not line.endswith(b"\n"):
            raise FormatError(f"{path}: truncated header")
        try:
            out.append(line.decode("utf-8").rstrip("\n"))
        except UnicodeDecodeError:
            raise FormatError(f"{path}: header is not UTF-8") from None
    return out


def _keyed(line: str, key: str, n: int, path) -> list[str]:
    parts = line.split()
    if len(parts) != n + 1 or parts[0] != key:
        raise FormatError(f"{path}: expected '{key}' with {n} values, got {line!r}")
    return parts[1:]


def _read_grid(path, magic: str):
    with open(path, "rb") as fh:
        first = fh.readline()
        if first.rstrip(b"\n") != magic.encode():
            raise FormatError(f"{path}: bad magic {first[:20]!r}, expected {magic!r}")
        h = _read_header(fh, path, 5)
        payload = fh.read()
    try:
        dims = tuple(int(x) for x in _keyed(h[0], "dims", 3, path))
    except ValueError:
        raise FormatError(f"{path}: dims must be integers") from None
    if min(dims) < 1:
        raise FormatError(f"{path}: dims must be positive")
    spacing = tuple(_floats(_keyed(h[1], "spacing", 3, path), path, "spacing"))
    origin = tuple(_floats(_keyed(h[2], "origin", 3, path), path, "origin"))
    dtype = _keyed(h[3], "dtype", 1, path)[0]
    if h[4].strip() != "data raw":
        raise FormatError(f"{path}: expected 'data raw'")
    return dims, spacing, origin, dtype, payload


def mask_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".mask" + p.suffix)


def _check_axes(vol) -> None:
    if not np.array_equal(vol.orientation, np.eye(3)):
        raise FormatError("the volume format stores axis-aligned grids only")


def write_volume(vol: Volume, path) -> None:
    """Voxels as f32; a non-trivial filled mask goes to a sibling u8 volume."""
    _check_axes(vol)
    data = np.asarray(vol.voxels, dtype="<f4").ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(_grid_header("VOLUME v1", vol.dims, vol.spacing, vol.origin, "f32"))
        fh.write(data.tobytes())
    mp = mask_path(path)
    if not vol.filled.all():
        with open(mp, "wb") as fh:
            fh.write(_grid_header("VOLUME v1", vol.dims, vol.spacing, vol.origin, "u8"))
            fh.write(vol.filled.astype(np.uint8).ravel(order="F").tobytes())
    elif mp.exists():
        mp.unlink()


def _volume_payload(path):
    dims, spacing, origin, dtype, payload = _read_grid(path, "VOLUME v1")
    if dtype not in ("f32", "u8"):
        raise FormatError(f"{path}: unsupported dtype {dtype!r}")
    item = 4 if dtype == "f32" else 1
    expected = int(np.prod(dims)) * item
    if len(payload) != expected:
        raise LengthError(path, expected, len(payload))
    arr = np.frombuffer(payload, dtype="<f4" if dtype == "f32" else np.uint8)
    return arr.reshape(dims, order="F"), spacing, origin, dtype


def read_volume(path) -> Volume:
    arr, spacing, origin, dtype = _volume_payload(path)
    if dtype != "f32":
        raise FormatError(f"{path}: image volumes must be f32")
    mask = None
    mp = mask_path(path)
    if mp.exists():
        m, ms, mo, mdt = _volume_payload(mp)
        if mdt != "u8" or m.shape != arr.shape or ms != spacing or mo != origin:
            raise FormatError(f"{mp}: mask volume does not match {path}")
        mask = m.astype(bool)
    return Volume(arr.astype(float), spacing, origin, mask)


def write_field(fld: DisplacementField, path) -> None:
    _check_axes(fld)
    v = np.asarray(fld.vectors, dtype="<f4")
    data = np.transpose(v, (3, 0, 1, 2)).reshape(3, -1, order="F").T
    with open(path, "wb") as fh:
        fh.write(_grid_header("FIELD v1", fld.dims, fld.spacing, fld.origin, "f32x3"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_field(path) -> DisplacementField:
    dims, spacing, origin, dtype, payload = _read_grid(path, "FIELD v1")
    if dtype != "f32x3":
        raise FormatError(f"{path}: field dtype must be f32x3")
    expected = int(np.prod(dims)) * 12
    if len(payload) != expected:
        raise LengthError(path, expected, len(payload))
    trip = np.frombuffer(payload, dtype="<f4").reshape(-1, 3)
    vec = np.stack([trip[:, c].reshape(dims, order="F") for c in range(3)], axis=-1)
    return DisplacementField(vec.astype(float), spacing, origin)


# --- tracked sequences -------------------------------------------------------


def _check_pose(M: np.ndarray, path, k: int) -> RigidTransform:
    R = M[:3, :3]
    if not np.array_equal(M[3], [0.0, 0.0, 0.0, 1.0]):
        raise PoseError(path, k, "last row must be 0 0 0 1")
    if np.linalg.det(R) < 0:
        raise PoseError(path, k, "rotation has det < 0 (reflection)")
    err = ortho_error(R)
    if err > ORTHO_REJECT_TOL:
        raise PoseError(path, k, f"rotation is not orthonormal (error {err:.3g})")
    return RigidTransform(M, Frame.PROBE, Frame.TRACKER)


def write_sequence(seq: TrackedSequence, path) -> None:
    """Pixels stored as 8-bit levels ``round(255 * I)``."""
    w, h = seq.size
    out = io.BytesIO()
    px, py = seq.pixel_spacing
    head = ["SEQ v1", f"frames {len(seq)}", f"size {w} {h}", f"pixel_spacing {_f(px)} {_f(py)}", "dtype u8"]
    out.write(("\n".join(head) + "\n").encode("utf-8"))
    for f in seq:
        if f.pixels.shape != (h, w):
            raise FormatError("all frames of a sequence must share one size")
        lines = [f"t {_f(f.timestamp)} valid {int(bool(f.valid))}"]
        lines += [" ".join(_f(x) for x in row) for row in f.pose.matrix]
        out.write(("\n".join(lines) + "\n").encode("utf-8"))
        levels = np.round(np.clip(f.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
        out.write(levels.tobytes())
    Path(path).write_bytes(out.getvalue())


def read_sequence(path) -> TrackedSequence:
    with open(path, "rb") as fh:
        first = fh.readline()
        if first.rstrip(b"\n") != b"SEQ v1":
            raise FormatError(f"{path}: bad magic {first[:20]!r}, expected 'SEQ v1'")
        h = _read_header(fh, path, 4)
        try:
            n = int(_keyed(h[0], "frames", 1, path)[0])
            w, hh = (int(x) for x in _keyed(h[1], "size", 2, path))
        except ValueError:
            raise FormatError(f"{path}: frame count and size must be integers") from None
        sp = tuple(_floats(_keyed(h[2], "pixel_spacing", 2, path), path, "pixel_spacing"))
        if _keyed(h[3], "dtype", 1, path)[0] != "u8":
            raise FormatError(f"{path}: sequence dtype must be u8")
        frames = []
        for k in range(n):
            lines = _read_header(fh, path, 5)
            parts = lines[0].split()
            if len(parts) != 4 or parts[0] != "t" or parts[2] != "valid" or parts[3] not in ("0", "1"):
                raise FormatError(f"{path}: bad frame line {lines[0]!r} at frame {k}")
            t = _floats([parts[1]], path, "timestamp")[0]
            M = np.array([_floats(line.split(), path, "pose") for line in lines[1:]])
            if M.shape != (4, 4):
                raise PoseError(path, k, "pose needs 4 rows of 4 numbers")
            pose = _check_pose(M, path, k)
            raw = fh.read(w * hh)
            if len(raw) != w * hh:
                raise LengthError(path, w * hh, len(raw))
            img = np.frombuffer(raw, dtype=np.uint8).reshape(hh, w) / 255.0
            frames.append(TrackedFrame(t, pose, img, sp, parts[3] == "1"))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {n} frames")
    return TrackedSequence(frames, sp)


# --- CSV tables --------------------------------------------------------------


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([x if isinstance(x, str) else _f(x) for x in r])


def _read_csv(path, header) -> list[list[str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != list(header):
        raise FormatError(f"{path}: expected header {','.join(header)}")
    body = [r for r in rows[1:] if r]
    for r in body:
        if len(r) != len(header):
            raise FormatError(f"{path}: row {r} has {len(r)} fields, expected {len(header)}")
    return body


def _numeric(path, rows, start: int) -> np.ndarray:
    return np.array([_floats(r[start:], path, "row") for r in rows], dtype=float).reshape(len(rows), -1)


def write_pairs(pairs: CorrespondencePairs, path) -> None:
    _write_csv(path, ["id", "fx", "fy", "fz", "mx", "my", "mz"],
               ([str(i), *f, *m] for i, (f, m) in enumerate(zip(pairs.fixed, pairs.moving))))


def read_pairs(path, source=Frame.VOLUME, target=Frame.VOLUME) -> CorrespondencePairs:
    rows = _read_csv(path, ["id", "fx", "fy", "fz", "mx", "my", "mz"])
    a = _numeric(path, rows, 1)
    return CorrespondencePairs(a[:, :3], a[:, 3:], source, target)


def write_pixels(px, path, ids=None) -> None:
    px = np.asarray(px, float)
    ids = [str(i) for i in range(len(px))] if ids is None else [str(i) for i in ids]
    _write_csv(path, ["id", "u", "v"], ([i, *p] for i, p in zip(ids, px)))


def read_pixels(path) -> np.ndarray:
    rows = _read_csv(path, ["id", "u", "v"])
    return _numeric(path, rows, 1)


def write_landmarks(lm: LandmarkSet, path) -> None:
    _write_csv(path, ["label", "fx", "fy", "fz", "mx", "my", "mz"],
               ([lab, *f, *m] for lab, f, m in zip(lm.labels, lm.fixed, lm.moving)))


def read_landmarks(path) -> LandmarkSet:
    rows = _read_csv(path, ["label", "fx", "fy", "fz", "mx", "my", "mz"])
    a = _numeric(path, rows, 1)
    return LandmarkSet(a[:, :3], a[:, 3:], tuple(r[0] for r in rows))


def write_polyline(line: Polyline, path) -> None:
    _write_csv(path, ["x", "y", "z"], line.vertices)


def read_polyline(path) -> Polyline:
    return Polyline(_numeric(path, _read_csv(path, ["x", "y", "z"]), 0))


def write_timeseries(ts: TimeSeries, path) -> None:
    _write_csv(path, ["t", "value"], zip(ts.timestamps, ts.values))


def read_timeseries(path) -> TimeSeries:
    a = _numeric(path, _read_csv(path, ["t", "value"]), 0)
    return TimeSeries(a[:, 0], a[:, 1])


# --- JSON --------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, Frame):
        return str(x)
    return x


def write_json(obj, path) -> None:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None


@dataclass
class RunReport:
    command: str
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    seed: int | None = None
    converged: bool | None = None
    error: str | None = None
    exit_code: int = 0

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256(path)

    def add_output(self, path) -> None:
        if os.path.isfile(path):
            self.outputs[str(path)] = sha256(path)

    def write(self, path) -> None:
        write_json(asdict(self), path)


def write_polyline_points(points, path) -> None:
    """Any (N, 3) point list in the ``x,y,z`` CSV layout."""
    _write_csv(path, ["x", "y", "z"], np.asarray(points, float).reshape(-1, 3))


def read_points(path) -> np.ndarray:
    return _numeric(path, _read_csv(path, ["x", "y", "z"]), 0).reshape(-1, 3)
