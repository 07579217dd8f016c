"""Synthetic scenes with exact ground truth.

Objects are ellipsoids resting on a support plane (Z axis along the
normal, bottom tangent), viewed from an orbit or a straight forward
trajectory. Detections are the analytic projected bboxes, optionally
with Gaussian corner noise. Everything is a pure function of the seed.

The edge renderer draws mirror-paired surface curves: a texture point is
rasterized only when it and its reflection across the object's symmetry
plane are both visible, so the pattern on the image is an exact fixed
set of the symmetry map and lifts of its pixels land on the true
surface. The silhouette rim is drawn the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import DetectionRecord, TrajectoryRecord
from .factors import ScaleRatio, ScaleRatioTable
from .geometry import (
    BBox,
    CameraIntrinsics,
    Ellipsoid,
    GeometryError,
    Plane,
    Pose,
    camera_center,
    compose_projection,
    project_dual_conic_bbox,
    project_points,
    raycast_ellipsoid_batch,
    reflect_point,
    rotation_about_axis,
)
from .symmetry import EdgeMap

Array = np.ndarray

_FPS = 30.0
_PLACEMENT_ATTEMPTS = 200
_PLACEMENT_MARGIN = 0.05


class SynthError(Exception):
    pass


def _default_plane() -> Plane:
    return Plane(np.array([0.0, 0.0, 1.0]), 0.0)


def _default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(525.0, 525.0, 319.5, 239.5)


@dataclass
class SceneConfig:
    n_objects: int = 5
    axis_ranges: tuple = ((0.08, 0.35), (0.08, 0.35), (0.12, 0.45))
    plane: Plane = field(default_factory=_default_plane)
    trajectory: str = "orbit"
    radius: float = 3.0
    length: float = 4.0
    n_frames: int = 36
    intrinsics: CameraIntrinsics = field(default_factory=_default_intrinsics)
    image_size: tuple = (640, 480)
    bbox_noise: float = 2.0
    stride: int = 1
    spread: float = 1.1
    seed: int = 0

    def __post_init__(self):
        if self.n_objects < 1:
            raise ValueError("need at least one object")
        for lo, hi in self.axis_ranges:
            if not 0.0 < lo <= hi:
                raise ValueError("half-axis ranges must be positive intervals")
        if self.trajectory not in ("orbit", "forward"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.n_frames < 3:
            raise ValueError("need at least 3 frames")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if self.bbox_noise < 0.0:
            raise ValueError("bbox noise must be non-negative")
        for name in ("radius", "length", "spread"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Scene:
    config: SceneConfig
    objects: dict              # object_id -> ground-truth Ellipsoid
    trajectory: list           # TrajectoryRecord per frame
    detections: list           # DetectionRecord
    frame_index: dict          # frame_id -> timestamp
    table: ScaleRatioTable     # exact half-axis ratios per label

    def poses(self) -> dict:
        return {k: rec.pose for k, rec in enumerate(self.trajectory)}


def _plane_basis(normal: Array) -> Array:
    """Columns (e1, e2, n): a deterministic in-plane frame."""
    ref = np.array([1.0, 0.0, 0.0])
    if abs(normal @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ normal) * normal
    e1 /= np.linalg.norm(e1)
    return np.column_stack([e1, np.cross(normal, e1), normal])


def _look_at(eye: Array, target: Array) -> Pose:
    """Camera pose with z toward target and image up along world +z."""
    z = target - eye
    nz = float(np.linalg.norm(z))
    if nz < 1e-12:
        raise SynthError("camera target coincides with eye")
    z = z / nz
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    nx = float(np.linalg.norm(x))
    if nx < 1e-9:
        raise SynthError("view direction parallel to world up")
    x = x / nx
    return Pose(np.column_stack([x, np.cross(z, x), z]), eye.copy())


def _place_objects(cfg: SceneConfig, rng) -> tuple:
    plane = cfg.plane.normalized()
    basis = _plane_basis(plane.normal)
    anchor = -plane.offset * plane.normal
    objects = {}
    table: ScaleRatioTable = {}
    footprints = []
    for oid in range(cfg.n_objects):
        for _ in range(_PLACEMENT_ATTEMPTS):
            axes = np.array([rng.uniform(lo, hi) for lo, hi in cfg.axis_ranges])
            yaw = rng.uniform(0.0, 2.0 * math.pi)
            u, v = rng.uniform(-cfg.spread, cfg.spread, 2)
            r_plan = float(np.hypot(axes[0], axes[1]))
            if all(math.hypot(u - pu, v - pv) > r_plan + pr + _PLACEMENT_MARGIN
                   for pu, pv, pr in footprints):
                break
        else:
            raise SynthError(f"placement failed for object {oid}")
        footprints.append((u, v, r_plan))
        center = anchor + u * basis[:, 0] + v * basis[:, 1] \
            + axes[2] * plane.normal
        rot = rotation_about_axis(plane.normal, yaw) @ basis
        label = f"class{oid}"
        objects[oid] = Ellipsoid(center, rot, axes, label=label)
        table[label] = ScaleRatio(float(axes[0] / axes[2]),
                                  float(axes[1] / axes[2]))
    return objects, table


def _trajectory(cfg: SceneConfig, objects: dict) -> list:
    centroid = np.mean([e.center for e in objects.values()], axis=0)
    records = []
    if cfg.trajectory == "orbit":
        height = centroid[2] + 0.3 * cfg.radius
        for k in range(cfg.n_frames):
            ang = 2.0 * math.pi * k / cfg.n_frames
            eye = centroid + np.array([cfg.radius * math.cos(ang),
                                       cfg.radius * math.sin(ang),
                                       height - centroid[2]])
            records.append(TrajectoryRecord(k / _FPS, _look_at(eye, centroid)))
    else:
        # straight route toward the objects, fixed forward orientation
        direction = np.array([0.0, 1.0, 0.0])
        height = centroid[2] + 0.25
        start = centroid + np.array([0.0, -(cfg.radius + cfg.length),
                                     height - centroid[2]])
        pose0 = _look_at(start, start + direction)
        for k in range(cfg.n_frames):
            eye = start + direction * (cfg.length * k / (cfg.n_frames - 1))
            records.append(TrajectoryRecord(
                k / _FPS, Pose(pose0.rotation.copy(), eye)))
    return records


def _noisy_bbox(b: BBox, sigma: float, rng) -> BBox:
    if sigma == 0.0:
        return b
    dx = rng.normal(0.0, sigma, 2)
    dy = rng.normal(0.0, sigma, 2)
    x_lo, x_hi = sorted((b.x_min + dx[0], b.x_max + dx[1]))
    y_lo, y_hi = sorted((b.y_min + dy[0], b.y_max + dy[1]))
    if x_hi - x_lo < 1e-9 or y_hi - y_lo < 1e-9:
        x_hi, y_hi = x_lo + 1e-6, y_lo + 1e-6
    return BBox(x_lo, y_lo, x_hi, y_hi)


def generate_scene(cfg: SceneConfig) -> Scene:
    """Deterministic scene: objects, trajectory, detections, GT table."""
    rng = np.random.default_rng(cfg.seed)
    objects, table = _place_objects(cfg, rng)
    records = _trajectory(cfg, objects)
    w, h = cfg.image_size
    detections = []
    for k, rec in enumerate(records):
        if k % cfg.stride != 0:
            continue
        p = compose_projection(rec.pose, cfg.intrinsics)
        for oid in sorted(objects):
            e = objects[oid]
            try:
                b = project_dual_conic_bbox(e, p)
            except GeometryError:
                continue
            if b.x_max < 0.0 or b.x_min > w or b.y_max < 0.0 or b.y_min > h:
                continue
            noisy = _noisy_bbox(b, cfg.bbox_noise, rng)
            score = 1.0 if cfg.bbox_noise == 0.0 else float(rng.uniform(0.6, 1.0))
            detections.append(DetectionRecord(k, oid, e.label, noisy, score))
    frame_index = {k: rec.timestamp for k, rec in enumerate(records)}
    return Scene(cfg, objects, records, detections, frame_index, table)


# ---------------------------------------------------------------------------
# symmetric edge rendering


def _surface_curves(e: Ellipsoid, rng, n_curves: int, pts_per_curve: int) -> Array:
    """Random great-circle arcs on the unit sphere, scaled to the surface.

    No hemisphere restriction: the pair-visibility gate decides what is
    drawn, and each arc's mirror image is added there anyway.
    """
    unit = []
    for _ in range(n_curves):
        d0 = rng.standard_normal(3)
        d0 /= np.linalg.norm(d0)
        w_axis = rng.standard_normal(3)
        w_axis /= np.linalg.norm(w_axis)
        ts = np.linspace(0.0, rng.uniform(0.8, 2.2), pts_per_curve)
        cross = np.cross(w_axis, d0)
        arc = (d0[None, :] * np.cos(ts)[:, None]
               + cross[None, :] * np.sin(ts)[:, None]
               + w_axis[None, :] * (w_axis @ d0) * (1.0 - np.cos(ts))[:, None])
        unit.append(arc)
    d = np.vstack(unit)
    return e.center + (d * e.half_axes) @ e.rotation.T


def _rim_points(e: Ellipsoid, p: Array, n: int = 720,
                inset: float = 1e-3) -> Array:
    """Points just inside the visibility rim, exact up to the inset.

    In the unit-sphere frame the rim is the circle u . w_hat = 1/|w|
    with w the transformed camera position; pulling the cap angle in by
    a hair keeps the raycast of every sample numerically well-posed.
    """
    cam = camera_center(p)
    m = e.rotation.T @ (cam - e.center)
    w_vec = m / e.half_axes
    wn = float(np.linalg.norm(w_vec))
    if wn <= 1.0:
        raise SynthError("not visible: camera inside the object")
    w_hat = w_vec / wn
    cos_a = min(1.0, (1.0 + inset) / wn)
    sin_a = math.sqrt(max(0.0, 1.0 - cos_a * cos_a))
    ref = np.array([1.0, 0.0, 0.0])
    if abs(w_hat @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ w_hat) * w_hat
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(w_hat, e1)
    th = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    u = (cos_a * w_hat[None, :]
         + sin_a * (np.cos(th)[:, None] * e1 + np.sin(th)[:, None] * e2))
    return e.center + (u * e.half_axes) @ e.rotation.T


def _pair_visible_pixels(pts: Array, e: Ellipsoid, p: Array) -> Array:
    """Rounded pixels of mirror pairs, kept only when the whole pair
    survives rasterization.

    Two gates: the continuous projection of each point must see its own
    surface point (front side), and the rounded integer pixel must still
    raycast onto the ellipsoid (rounding near the silhouette can push a
    pixel off the body). Either failure drops both ends of the pair, so
    the emitted set stays symmetric in 3D and every emitted pixel lifts
    onto the surface.
    """
    both = np.vstack([pts, reflect_point(pts, e)])
    uv, depth = project_points(p, both)
    hit, near = raycast_ellipsoid_batch(uv, p, e)
    visible = hit & (np.linalg.norm(near - both, axis=1) < 1e-6) & (depth > 0)
    rounded = np.rint(uv)
    hit_r, _ = raycast_ellipsoid_batch(rounded, p, e)
    visible &= hit_r
    n_half = len(pts)
    paired = visible[:n_half] & visible[n_half:]
    keep = np.concatenate([paired, paired])
    return rounded[keep]


def render_symmetric_edges(e: Ellipsoid, p: Array, window: BBox,
                           pattern_seed: int, n_curves: int = 7,
                           pts_per_curve: int = 400) -> EdgeMap:
    """Edge map of mirror-paired texture curves plus the silhouette rim.

    The raster is exactly invariant under the object's symmetry map by
    construction; raises "not visible" when nothing of the object can
    be drawn inside the window.
    """
    try:
        footprint = project_dual_conic_bbox(e, p)
    except GeometryError as ex:
        raise SynthError(f"not visible: {ex}") from None
    if (footprint.x_max < window.x_min or footprint.x_min > window.x_max
            or footprint.y_max < window.y_min
            or footprint.y_min > window.y_max):
        raise SynthError("not visible: projection outside window")
    rng = np.random.default_rng(pattern_seed)
    pts = np.vstack([_surface_curves(e, rng, n_curves, pts_per_curve),
                     _rim_points(e, p)])
    uv = _pair_visible_pixels(pts, e, p)
    x0 = int(math.floor(window.x_min))
    y0 = int(math.floor(window.y_min))
    width = int(math.ceil(window.x_max)) - x0
    height = int(math.ceil(window.y_max)) - y0
    cols = uv[:, 0].astype(int) - x0
    rows = uv[:, 1].astype(int) - y0
    ok = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    mask = np.zeros((height, width), dtype=bool)
    mask[rows[ok], cols[ok]] = True
    if not mask.any():
        raise SynthError("not visible: no edge pixels in window")
    return EdgeMap(mask, origin=(x0, y0))


def render_window(e: Ellipsoid, p: Array, pad: int = 12) -> BBox:
    """Window around the projected silhouette with integer padding."""
    b = project_dual_conic_bbox(e, p)
    return BBox(math.floor(b.x_min) - pad, math.floor(b.y_min) - pad,
                math.ceil(b.x_max) + pad, math.ceil(b.y_max) + pad)


# ---------------------------------------------------------------------------
# perturbations


def perturb_ellipsoid(e: Ellipsoid, yaw_err: float = 0.0,
                      center_err: float = 0.0, scale_err: float = 0.0,
                      seed: int = 0) -> Ellipsoid:
    """Controlled corruption for convergence-basin experiments.

    yaw_err degrees rotate about the object's own Z axis (the support
    normal for resting objects) with random sign; center_err meters move
    the center along a random direction with that exact norm; scale_err
    scales each half-axis by an independent factor in [1-s, 1+s].
    """
    rng = np.random.default_rng(seed)
    rotation = e.rotation
    center = e.center.copy()
    axes = e.half_axes.copy()
    if yaw_err != 0.0:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        rotation = rotation_about_axis(
            e.rotation[:, 2], sign * math.radians(yaw_err)) @ rotation
    if center_err != 0.0:
        d = rng.standard_normal(3)
        center = center + d / np.linalg.norm(d) * center_err
    if scale_err != 0.0:
        if not 0.0 <= scale_err < 1.0:
            raise ValueError("scale_err must be in [0, 1)")
        axes = axes * rng.uniform(1.0 - scale_err, 1.0 + scale_err, 3)
    return Ellipsoid(center, rotation, axes, label=e.label,
                     symmetry_axis_fixed=e.symmetry_axis_fixed)
