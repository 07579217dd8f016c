"""File formats: trajectories, detections, calibration, scale tables, maps.

Text formats are line-oriented and whitespace-separated; every parse
error names the offending line. Floats are written with repr so a
save/load cycle reproduces the exact double. Loaders reject malformed
input outright; the only tolerated irregularities are duplicate scale
labels (last wins) and unmatched detection frames, both of which warn.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .factors import ScaleRatio, ScaleRatioTable
from .geometry import (
    BBox,
    CameraIntrinsics,
    Ellipsoid,
    GeometryError,
    Plane,
    Pose,
)

Array = np.ndarray


class DataError(Exception):
    pass


@dataclass(frozen=True)
class TrajectoryRecord:
    timestamp: float
    pose: Pose  # world <- camera


@dataclass(frozen=True)
class DetectionRecord:
    frame_id: int
    object_id: int
    label: str
    bbox: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"score {self.score} outside [0, 1]")


@dataclass
class MapDocument:
    """Estimated objects plus the trajectory they were estimated from."""

    objects: dict = field(default_factory=dict)  # object_id -> Ellipsoid
    trajectory: list = field(default_factory=list)  # TrajectoryRecord
    metadata: dict = field(default_factory=dict)


def _data_lines(path):
    """(line_number, stripped_text) for non-blank, non-comment lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for num, raw in enumerate(fh, start=1):
            text = raw.strip()
            if text and not text.startswith("#"):
                yield num, text


def _floats(fields, path, num):
    try:
        return [float(f) for f in fields]
    except ValueError as ex:
        raise DataError(f"{path}:{num}: {ex}") from None


# ---------------------------------------------------------------------------
# trajectories (timestamp tx ty tz qx qy qz qw)


def _pose_from_tum(vals):
    t = np.array(vals[1:4])
    q = np.array(vals[4:8])
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > 1e-3:
        raise DataError(f"quaternion norm {norm:.6f} deviates from 1")
    r = Rotation.from_quat(q / norm).as_matrix()
    return Pose(r, t)


def load_trajectory(path) -> list:
    records = []
    last_t = None
    for num, text in _data_lines(path):
        fields = text.split()
        if len(fields) != 8:
            raise DataError(f"{path}:{num}: expected 8 fields, got {len(fields)}")
        vals = _floats(fields, path, num)
        try:
            pose = _pose_from_tum(vals)
        except DataError as ex:
            raise DataError(f"{path}:{num}: {ex}") from None
        if last_t is not None and vals[0] <= last_t:
            raise DataError(f"{path}:{num}: timestamp {vals[0]!r} not increasing")
        last_t = vals[0]
        records.append(TrajectoryRecord(vals[0], pose))
    return records


def tum_line(record: TrajectoryRecord) -> str:
    q = Rotation.from_matrix(record.pose.rotation).as_quat()
    vals = [record.timestamp, *record.pose.translation, *q]
    return " ".join(repr(float(v)) for v in vals)


def save_trajectory(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for rec in records:
            fh.write(tum_line(rec) + "\n")


# ---------------------------------------------------------------------------
# detections (frame_id object_id label x_min y_min x_max y_max score)


def load_detections(path, filter_partial: bool = True, margin: float = 30.0,
                    image_size: tuple = (640, 480)) -> list:
    """Detection records, optionally dropping boxes close to the image edge.

    A bbox is partial when any side comes within margin pixels of the
    image border; such detections are unreliable and excluded by default.
    """
    records = []
    w, h = image_size
    for num, text in _data_lines(path):
        fields = text.split()
        if len(fields) != 8:
            raise DataError(f"{path}:{num}: expected 8 fields, got {len(fields)}")
        vals = _floats(fields[3:], path, num)
        try:
            frame_id, object_id = int(fields[0]), int(fields[1])
        except ValueError:
            raise DataError(f"{path}:{num}: non-integer id") from None
        try:
            bbox = BBox(vals[0], vals[1], vals[2], vals[3])
            rec = DetectionRecord(frame_id, object_id, fields[2], bbox, vals[4])
        except (GeometryError, DataError) as ex:
            raise DataError(f"{path}:{num}: {ex}") from None
        if filter_partial and (bbox.x_min < margin or bbox.y_min < margin
                               or bbox.x_max > w - margin
                               or bbox.y_max > h - margin):
            continue
        records.append(rec)
    return records


def save_detections(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# frame_id object_id label x_min y_min x_max y_max score\n")
        for r in records:
            b = r.bbox
            fh.write(f"{r.frame_id} {r.object_id} {r.label} "
                     f"{float(b.x_min)!r} {float(b.y_min)!r} "
                     f"{float(b.x_max)!r} {float(b.y_max)!r} "
                     f"{float(r.score)!r}\n")


# ---------------------------------------------------------------------------
# scale ratio tables (label sigma beta)


def load_scale_table(path) -> ScaleRatioTable:
    table: ScaleRatioTable = {}
    for num, text in _data_lines(path):
        fields = text.split()
        if len(fields) != 3:
            raise DataError(f"{path}:{num}: expected 3 fields, got {len(fields)}")
        vals = _floats(fields[1:], path, num)
        if fields[0] in table:
            warnings.warn(f"{path}:{num}: duplicate label {fields[0]!r}, "
                          f"last entry wins")
        try:
            table[fields[0]] = ScaleRatio(vals[0], vals[1])
        except ValueError as ex:
            raise DataError(f"{path}:{num}: {ex}") from None
    return table


def save_scale_table(table: ScaleRatioTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# label sigma beta\n")
        for label in sorted(table):
            r = table[label]
            fh.write(f"{label} {float(r.sigma)!r} {float(r.beta)!r}\n")


# ---------------------------------------------------------------------------
# calibration (tagged lines: plane / intrinsics)


def load_planes_intrinsics(path) -> tuple:
    """World support planes and the shared pinhole model.

    Lines are tagged: `plane nx ny nz d` (repeatable) and
    `intrinsics fx fy cx cy` (required exactly once). Planes come back
    normalized.
    """
    planes = []
    intrinsics = None
    for num, text in _data_lines(path):
        fields = text.split()
        tag = fields[0]
        if tag == "plane":
            if len(fields) != 5:
                raise DataError(f"{path}:{num}: plane needs 4 numbers")
            vals = _floats(fields[1:], path, num)
            n = np.array(vals[:3])
            if float(np.linalg.norm(n)) < 1e-12:
                raise DataError(f"{path}:{num}: zero plane normal")
            planes.append(Plane(n, vals[3]).normalized())
        elif tag == "intrinsics":
            if len(fields) != 5:
                raise DataError(f"{path}:{num}: intrinsics needs 4 numbers")
            if intrinsics is not None:
                raise DataError(f"{path}:{num}: duplicate intrinsics line")
            vals = _floats(fields[1:], path, num)
            try:
                intrinsics = CameraIntrinsics(*vals)
            except GeometryError as ex:
                raise DataError(f"{path}:{num}: {ex}") from None
        else:
            raise DataError(f"{path}:{num}: unknown tag {tag!r}")
    if intrinsics is None:
        raise DataError(f"{path}: no intrinsics line")
    return planes, intrinsics


def save_planes_intrinsics(planes, intrinsics: CameraIntrinsics, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"intrinsics {float(intrinsics.fx)!r} {float(intrinsics.fy)!r} "
                 f"{float(intrinsics.cx)!r} {float(intrinsics.cy)!r}\n")
        for pl in planes:
            n = pl.normal
            fh.write(f"plane {float(n[0])!r} {float(n[1])!r} "
                     f"{float(n[2])!r} {float(pl.offset)!r}\n")


# ---------------------------------------------------------------------------
# frame index (frame_id timestamp) and pose lookup


def load_frame_index(path) -> dict:
    index = {}
    for num, text in _data_lines(path):
        fields = text.split()
        if len(fields) != 2:
            raise DataError(f"{path}:{num}: expected 2 fields, got {len(fields)}")
        try:
            frame_id = int(fields[0])
        except ValueError:
            raise DataError(f"{path}:{num}: non-integer frame id") from None
        if frame_id in index:
            raise DataError(f"{path}:{num}: duplicate frame id {frame_id}")
        index[frame_id] = _floats(fields[1:], path, num)[0]
    return index


def save_frame_index(index: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# frame_id timestamp\n")
        for frame_id in sorted(index):
            fh.write(f"{frame_id} {float(index[frame_id])!r}\n")


def poses_for_frames(index: dict, records, tol: float = 1e-9) -> dict:
    """frame_id -> Pose by matching index timestamps into the trajectory.

    Frames whose timestamp has no trajectory record within tol are
    dropped with a warning; detections on them cannot be used.
    """
    times = np.array([rec.timestamp for rec in records])
    out = {}
    for frame_id in sorted(index):
        t = index[frame_id]
        if len(times) == 0:
            warnings.warn(f"frame {frame_id}: no trajectory records")
            continue
        i = int(np.argmin(np.abs(times - t)))
        if abs(times[i] - t) > tol:
            warnings.warn(f"frame {frame_id}: no pose at timestamp {t!r}")
            continue
        out[frame_id] = records[i].pose
    return out


# ---------------------------------------------------------------------------
# map documents (JSON)


def _require(cond, msg):
    if not cond:
        raise DataError(msg)


def save_map(doc: MapDocument, path) -> None:
    payload = {
        "objects": [
            {
                "id": int(oid),
                "label": e.label,
                "center": [float(v) for v in e.center],
                "rotation": [float(v) for v in e.rotation.reshape(-1)],
                "half_axes": [float(v) for v in e.half_axes],
            }
            for oid, e in sorted(doc.objects.items())
        ],
        "trajectory": [tum_line(rec) for rec in doc.trajectory],
        "metadata": doc.metadata,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_map(path) -> MapDocument:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as ex:
            raise DataError(f"{path}: invalid JSON: {ex}") from None
    _require(isinstance(payload, dict), f"{path}: top level must be an object")
    for key in ("objects", "trajectory", "metadata"):
        _require(key in payload, f"{path}: missing key {key!r}")
    objects = {}
    for k, entry in enumerate(payload["objects"]):
        where = f"{path}: objects[{k}]"
        _require(isinstance(entry, dict), f"{where}: must be an object")
        for key, length in (("center", 3), ("rotation", 9), ("half_axes", 3)):
            _require(key in entry, f"{where}: missing key {key!r}")
            _require(isinstance(entry[key], list) and len(entry[key]) == length,
                     f"{where}: {key} must hold {length} numbers")
        _require("id" in entry, f"{where}: missing key 'id'")
        r = np.array(entry["rotation"], dtype=np.float64).reshape(3, 3)
        _require(np.abs(r @ r.T - np.eye(3)).max() < 1e-6,
                 f"{where}: rotation not orthonormal")
        _require(np.linalg.det(r) > 0.0, f"{where}: rotation not proper")
        axes = np.array(entry["half_axes"], dtype=np.float64)
        _require(np.all(axes > 0.0), f"{where}: half_axes must be positive")
        oid = int(entry["id"])
        _require(oid not in objects, f"{where}: duplicate object id {oid}")
        objects[oid] = Ellipsoid(np.array(entry["center"], dtype=np.float64),
                                 r, axes, label=str(entry.get("label", "")))
    trajectory = []
    last_t = None
    for k, line in enumerate(payload["trajectory"]):
        where = f"{path}: trajectory[{k}]"
        fields = str(line).split()
        _require(len(fields) == 8, f"{where}: expected 8 fields")
        try:
            vals = [float(f) for f in fields]
            pose = _pose_from_tum(vals)
        except (ValueError, DataError) as ex:
            raise DataError(f"{where}: {ex}") from None
        _require(last_t is None or vals[0] > last_t,
                 f"{where}: timestamp not increasing")
        last_t = vals[0]
        trajectory.append(TrajectoryRecord(vals[0], pose))
    _require(isinstance(payload["metadata"], dict),
             f"{path}: metadata must be an object")
    return MapDocument(objects, trajectory, payload["metadata"])


# ---------------------------------------------------------------------------
# PGM (P5 binary grayscale)


def load_pgm(path) -> Array:
    """Grayscale image as float64, native 0..maxval range preserved."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(data):
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        tokens.append(data[start:i])
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if maxval <= 0 or maxval > 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    raster = data[i + 1:i + 1 + w * h]
    if len(raster) != w * h:
        raise DataError(f"{path}: truncated raster "
                        f"({len(raster)} of {w * h} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64)


def save_pgm(image: Array, path) -> None:
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = arr.astype(np.float64) * 255.0
    arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if arr.ndim != 2:
        raise DataError("PGM image must be 2-D")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# PLY export


def _uv_sphere(subdivisions: int):
    """Unit-sphere vertex grid and quad index list (lat-long tiling)."""
    stacks = slices = subdivisions
    theta = np.linspace(0.0, np.pi, stacks + 1)
    phi = np.linspace(0.0, 2.0 * np.pi, slices, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    verts = np.column_stack([
        (np.sin(tt) * np.cos(pp)).reshape(-1),
        (np.sin(tt) * np.sin(pp)).reshape(-1),
        np.cos(tt).reshape(-1),
    ])
    quads = []
    for i in range(stacks):
        for j in range(slices):
            jn = (j + 1) % slices
            quads.append((i * slices + j, (i + 1) * slices + j,
                          (i + 1) * slices + jn, i * slices + jn))
    return verts, quads


def export_ply(doc: MapDocument, path, subdivisions: int = 12,
               axis_length: float = 0.1) -> None:
    """ASCII PLY: one UV-sphere mesh per ellipsoid, a tripod per pose."""
    if subdivisions < 2:
        raise DataError("subdivisions must be at least 2")
    sphere, quads = _uv_sphere(subdivisions)
    verts = []
    faces = []
    edges = []
    for _, e in sorted(doc.objects.items()):
        base = len(verts)
        world = (e.rotation @ (sphere * e.half_axes).T).T + e.center
        verts.extend(world)
        faces.extend(tuple(base + i for i in quad) for quad in quads)
    for rec in doc.trajectory:
        base = len(verts)
        c = rec.pose.translation
        verts.append(c)
        for axis in range(3):
            verts.append(c + axis_length * rec.pose.rotation[:, axis])
            edges.append((base, base + 1 + axis))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(verts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(faces)}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write(f"element edge {len(edges)}\n")
        fh.write("property int vertex1\nproperty int vertex2\n")
        fh.write("end_header\n")
        for v in verts:
            fh.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in faces:
            fh.write("4 " + " ".join(str(i) for i in f) + "\n")
        for a, b in edges:
            fh.write(f"{a} {b}\n")
