"""Projective and quadric geometry primitives for ellipsoid landmarks.

Conventions used throughout the package:

* Pixel coordinates are continuous (sub-pixel), origin at the image
  top-left, +x right, +y down.
* Camera frame: x right, y down, z forward (optical axis).
* Planes are stored as homogeneous 4-vectors (n, d); normalization to
  ``|n| = 1`` is explicit, never implicit.
* Dual quadrics are normalized so ``Q*[3,3] = -1``; the primal matrix is
  the exact inverse of the normalized dual, which makes the quadratic
  form equal -1 at the ellipsoid center.
* Homogeneous 2D lines l satisfy ``l . (x, y, 1) = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Array = np.ndarray

ORTHONORMAL_TOL = 1e-9
RAY_DISCRIMINANT_CLAMP = 1e-12
RAY_DEGENERATE_TOL = 1e-12


class GeometryError(Exception):
    """Invalid geometric input (degenerate bbox, bad rotation, ...)."""


def _as_vec(v, n: int) -> Array:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (n,):
        raise GeometryError(f"expected shape ({n},), got {a.shape}")
    return a


def _as_mat(m, rows: int, cols: int) -> Array:
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (rows, cols):
        raise GeometryError(f"expected shape ({rows}, {cols}), got {a.shape}")
    return a


def check_rotation(r: Array, tol: float = ORTHONORMAL_TOL) -> None:
    """Raise unless r is orthonormal with determinant +1."""
    err = np.abs(r @ r.T - np.eye(3)).max()
    if err > tol:
        raise GeometryError(f"rotation not orthonormal (|RR^T - I| = {err:.3e})")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise GeometryError("rotation has determinant != +1")


# ---------------------------------------------------------------------------
# rotations


def rotation_x(angle: float) -> Array:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> Array:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle: float) -> Array:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_ypr(yaw: float, pitch: float, roll: float) -> Array:
    """ZYX convention: R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    return rotation_z(yaw) @ rotation_y(pitch) @ rotation_x(roll)


def ypr_from_rotation(r: Array) -> tuple[float, float, float]:
    """Inverse of rotation_from_ypr; pitch returned in [-pi/2, pi/2]."""
    pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    if abs(r[2, 0]) < 1.0 - 1e-12:
        yaw = math.atan2(r[1, 0], r[0, 0])
        roll = math.atan2(r[2, 1], r[2, 2])
    else:
        # gimbal lock: yaw/roll coupled, put everything in yaw
        yaw = math.atan2(-r[0, 1], r[1, 1])
        roll = 0.0
    return yaw, pitch, roll


def rotation_about_axis(axis: Array, angle: float) -> Array:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(a)
    if norm < 1e-15:
        return np.eye(3)
    a = a / norm
    k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotvec_to_matrix(v: Array) -> Array:
    angle = float(np.linalg.norm(v))
    if angle < 1e-15:
        return np.eye(3)
    return rotation_about_axis(v, angle)


def matrix_to_rotvec(r: Array) -> Array:
    """Log map of SO(3), stable near 0 and pi."""
    trace = float(np.trace(r))
    cos_theta = max(-1.0, min(1.0, (trace - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-8:
        return 0.5 * skew
    if theta > math.pi - 1e-6:
        # axis from the dominant diagonal entry of (R + I) / 2
        m = (r + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(m)))
        axis = m[:, i] / math.sqrt(max(m[i, i], 1e-30))
        axis = axis / np.linalg.norm(axis)
        # fix sign so that it matches the skew part where meaningful
        if np.dot(axis, skew) < 0.0:
            axis = -axis
        return theta * axis
    return (theta / (2.0 * math.sin(theta))) * skew


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Pose:
    """Rigid transform; maps local coordinates into the parent frame.

    Used both as world<-camera (camera pose) and world<-object.
    """

    rotation: Array
    translation: Array

    def __post_init__(self):
        r = _as_mat(self.rotation, 3, 3)
        t = _as_vec(self.translation, 3)
        check_rotation(r)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def matrix(self) -> Array:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: Array) -> "Pose":
        m = _as_mat(m, 4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def transform(self, v: Array) -> Array:
        """Apply to one or many 3D points (local -> parent frame)."""
        v = np.asarray(v, dtype=np.float64)
        return v @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise GeometryError("focal lengths must be positive")

    def matrix(self) -> Array:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Plane:
    """Plane n . v + d = 0 stored as the homogeneous 4-vector (n, d)."""

    normal: Array
    offset: float

    def __post_init__(self):
        n = _as_vec(self.normal, 3)
        if np.linalg.norm(n) <= 0.0:
            raise GeometryError("plane normal must be nonzero")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_homogeneous(cls, pi: Array) -> "Plane":
        pi = _as_vec(pi, 4)
        return cls(pi[:3], pi[3])

    def homogeneous(self) -> Array:
        return np.append(self.normal, self.offset)

    def normalized(self) -> "Plane":
        scale = np.linalg.norm(self.normal)
        return Plane(self.normal / scale, self.offset / scale)

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.offset)

    def signed_distance(self, v: Array) -> float:
        """For a normalized plane this is the metric distance with sign."""
        return float(np.dot(self.normal, v) + self.offset)


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(
                f"degenerate bbox ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def center(self) -> Array:
        return np.array([0.5 * (self.x_min + self.x_max),
                         0.5 * (self.y_min + self.y_max)])

    def contains(self, u: Array, margin: float = 0.0) -> bool:
        return bool(self.x_min + margin <= u[0] <= self.x_max - margin
                    and self.y_min + margin <= u[1] <= self.y_max - margin)


@dataclass(frozen=True)
class Cuboid:
    center: Array
    rotation: Array
    half_extents: Array

    def __post_init__(self):
        c = _as_vec(self.center, 3)
        r = _as_mat(self.rotation, 3, 3)
        h = _as_vec(self.half_extents, 3)
        check_rotation(r)
        if np.any(h <= 0.0):
            raise GeometryError("half extents must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "half_extents", h)

    def corners(self) -> Array:
        """All 8 corners, shape (8, 3)."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                          for sz in (-1, 1)], dtype=np.float64)
        return self.center + (signs * self.half_extents) @ self.rotation.T

    def contains(self, points: Array) -> Array:
        """Boolean mask of points inside (inclusive)."""
        local = (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents, axis=-1)


@dataclass(frozen=True)
class Ellipsoid:
    """9-DoF object landmark: center, orientation, half axes.

    The object's symmetry plane is its XZ plane (normal = local Y axis);
    the local Z axis points away from the supporting plane.
    """

    center: Array
    rotation: Array
    half_axes: Array
    label: str = ""
    symmetry_axis_fixed: bool = False

    def __post_init__(self):
        c = _as_vec(self.center, 3)
        r = _as_mat(self.rotation, 3, 3)
        s = _as_vec(self.half_axes, 3)
        check_rotation(r)
        if np.any(s <= 0.0):
            raise GeometryError("half axes must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "half_axes", s)


@dataclass(frozen=True)
class QuadricMatrix:
    """4x4 symmetric quadric matrix, either primal (points) or dual (planes)."""

    matrix: Array
    dual: bool

    def __post_init__(self):
        m = _as_mat(self.matrix, 4, 4)
        if np.abs(m - m.T).max() > 1e-12:
            raise GeometryError("quadric matrix must be symmetric")
        object.__setattr__(self, "matrix", m)

    def evaluate(self, v: Array) -> float:
        """Quadratic form at a 3D point (primal only)."""
        h = np.append(np.asarray(v, dtype=np.float64), 1.0)
        return float(h @ self.matrix @ h)


# ---------------------------------------------------------------------------
# array-level builders (hot path, no dataclass overhead)


def dual_quadric_mat(center: Array, rotation: Array, half_axes: Array) -> Array:
    """Dual quadric Z diag(a^2,b^2,c^2,-1) Z^T; bottom-right entry is -1."""
    rd = rotation * (half_axes ** 2)
    top = rd @ rotation.T - np.outer(center, center)
    q = np.empty((4, 4))
    q[:3, :3] = top
    q[:3, 3] = -center
    q[3, :3] = -center
    q[3, 3] = -1.0
    return q


def primal_quadric_mat(center: Array, rotation: Array, half_axes: Array) -> Array:
    """Exact inverse of the normalized dual; value -1 at the center, 0 on the surface."""
    ri = rotation / (half_axes ** 2)
    a33 = ri @ rotation.T
    at = a33 @ center
    q = np.empty((4, 4))
    q[:3, :3] = a33
    q[:3, 3] = -at
    q[3, :3] = -at
    q[3, 3] = float(center @ at) - 1.0
    return q


def projection_mat(k: Array, rotation_wc: Array, translation_wc: Array) -> Array:
    """P = K [R^T | -R^T t] for a world<-camera pose (R, t)."""
    rt = rotation_wc.T
    return k @ np.hstack([rt, (-rt @ translation_wc)[:, None]])


def bbox_edge_lines(b: BBox) -> Array:
    """Homogeneous lines of the four bbox edges, order (x_min, x_max, y_min, y_max)."""
    return np.array([
        [1.0, 0.0, -b.x_min],
        [1.0, 0.0, -b.x_max],
        [0.0, 1.0, -b.y_min],
        [0.0, 1.0, -b.y_max],
    ])


def camera_center(p: Array) -> Array:
    """Center of a finite projective camera (inhomogeneous 3-vector)."""
    m = p[:, :3]
    if abs(np.linalg.det(m)) < 1e-15:
        raise GeometryError("projection matrix has singular left 3x3 block")
    return -np.linalg.solve(m, p[:, 3])


def pixel_rays(p: Array, pixels: Array) -> tuple[Array, Array]:
    """Camera center and unit ray directions for pixels, shape (n, 2).

    Directions are oriented so that points `center + s * dir` with s > 0
    have positive depth under p.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    m = p[:, :3]
    center = camera_center(p)
    dirs = np.linalg.solve(m, np.column_stack(
        [pixels[:, 0], pixels[:, 1], np.ones(len(pixels))]).T).T
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    return center, dirs / norms


def project_points(p: Array, points: Array) -> tuple[Array, Array]:
    """Project world points; returns (pixels (n,2), depths (n,))."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    h = p[:, :3] @ pts.T + p[:, 3:4]
    depth = h[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = (h[:2] / depth).T
    return uv, depth


# ---------------------------------------------------------------------------
# operations


def compose_projection(pose: Pose, intr: CameraIntrinsics) -> Array:
    """3x4 projection matrix mapping homogeneous world points to pixels."""
    return projection_mat(intr.matrix(), pose.rotation, pose.translation)


def ellipsoid_to_dual(e: Ellipsoid) -> QuadricMatrix:
    return QuadricMatrix(dual_quadric_mat(e.center, e.rotation, e.half_axes), dual=True)


def ellipsoid_to_primal(e: Ellipsoid) -> QuadricMatrix:
    return QuadricMatrix(primal_quadric_mat(e.center, e.rotation, e.half_axes), dual=False)


def backproject_bbox_planes(p: Array, b: BBox) -> list[Plane]:
    """Back-project the four bbox edge lines to planes pi = P^T l.

    Each plane contains the camera center and the preimage of its edge.
    Planes are returned unnormalized, in edge order (x_min, x_max, y_min, y_max).
    """
    lines = bbox_edge_lines(b)
    pis = lines @ p  # (4, 3) @ (3, 4) -> each row is P^T l
    return [Plane.from_homogeneous(pi) for pi in pis]


def plane_tangency_residual(plane: Plane, q: QuadricMatrix) -> float:
    """pi^T Q* pi; zero iff the plane is tangent to the ellipsoid.

    Callers are expected to pass a normalized plane (|n| = 1) and the
    normalized dual (Q*[3,3] = -1); the value is scale-sensitive.
    """
    if not q.dual:
        raise GeometryError("tangency residual needs the dual quadric")
    pi = plane.homogeneous()
    return float(pi @ q.matrix @ pi)


def object_axis(e: Ellipsoid, axis: str) -> Array:
    """Unit direction of the object's X, Y or Z axis in world coordinates."""
    idx = {"X": 0, "Y": 1, "Z": 2}[axis.upper()]
    return e.rotation[:, idx].copy()


def reflect_point(v: Array, e: Ellipsoid) -> Array:
    """Mirror a world point across the object's XZ symmetry plane."""
    v = np.asarray(v, dtype=np.float64)
    local = (v - e.center) @ e.rotation  # R^T (v - t), supports (n,3)
    local = local * np.array([1.0, -1.0, 1.0])
    return local @ e.rotation.T + e.center


def raycast_ellipsoid_batch(pixels: Array, p: Array, e: Ellipsoid) -> tuple[Array, Array]:
    """Nearest visible ellipsoid intersection per pixel ray.

    Returns (hit mask (n,), points (n, 3)); rows with no intersection in
    front of the camera are left as NaN. Substituting the ray into the
    primal quadratic form gives a scalar quadratic in the ray parameter;
    the smaller positive root is the visible surface point.
    """
    q = primal_quadric_mat(e.center, e.rotation, e.half_axes)
    center, dirs = pixel_rays(p, pixels)
    a33 = q[:3, :3]
    qv = q[:3, 3]
    ca = a33 @ center + qv
    a = np.einsum("ni,ij,nj->n", dirs, a33, dirs)
    bq = 2.0 * dirs @ ca
    ch = np.append(center, 1.0)
    c = float(ch @ q @ ch)
    disc = bq * bq - 4.0 * a * c
    disc = np.where((disc < 0.0) & (disc >= -RAY_DISCRIMINANT_CLAMP), 0.0, disc)
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = (-bq - sq) / (2.0 * a)
        s2 = (-bq + sq) / (2.0 * a)
    s = np.where(s1 > 0.0, s1, s2)
    hit = hit & (s > 0.0)
    pts = np.full((len(dirs), 3), np.nan)
    pts[hit] = center + s[hit, None] * dirs[hit]
    return hit, pts


def raycast_ellipsoid(u: Array, p: Array, e: Ellipsoid) -> Array | None:
    """Single-pixel raycast; None when the ray misses the silhouette."""
    hit, pts = raycast_ellipsoid_batch(np.asarray(u, dtype=np.float64)[None, :], p, e)
    if not hit[0]:
        return None
    return pts[0]


def raycast_tangent_plane(u: Array, p: Array, e: Ellipsoid, v0: Array) -> Array:
    """Intersect the pixel ray with the ellipsoid's tangent plane at v0.

    Linear stand-in for the exact raycast, valid for pixels near the
    projection of v0. Raises GeometryError when the ray is parallel to
    the tangent plane.
    """
    q = primal_quadric_mat(e.center, e.rotation, e.half_axes)
    h0 = np.append(np.asarray(v0, dtype=np.float64), 1.0)
    pi = q @ h0
    n_norm = np.linalg.norm(pi[:3])
    if n_norm < 1e-15:
        raise GeometryError("degenerate tangent plane")
    pi = pi / n_norm
    center, dirs = pixel_rays(p, np.asarray(u, dtype=np.float64)[None, :])
    d = dirs[0]
    denom = float(pi[:3] @ d)
    if abs(denom) < RAY_DEGENERATE_TOL:
        raise GeometryError("ray parallel to tangent plane")
    s = -float(pi[:3] @ center + pi[3]) / denom
    return center + s * d


def raycast_tangent_plane_batch(pixels: Array, p: Array, e: Ellipsoid,
                                v0s: Array) -> tuple[Array, Array]:
    """Vectorized raycast_tangent_plane; per-row v0 tangent planes.

    Returns (valid mask, points); rows where the ray is (near) parallel
    to the tangent plane are invalid.
    """
    q = primal_quadric_mat(e.center, e.rotation, e.half_axes)
    v0s = np.atleast_2d(v0s)
    h = np.column_stack([v0s, np.ones(len(v0s))])
    pis = h @ q  # (n, 4) tangent planes
    n_norms = np.linalg.norm(pis[:, :3], axis=1, keepdims=True)
    ok = n_norms[:, 0] > 1e-15
    pis = np.divide(pis, n_norms, out=np.zeros_like(pis), where=n_norms > 0)
    center, dirs = pixel_rays(p, pixels)
    denom = np.einsum("ni,ni->n", pis[:, :3], dirs)
    ok = ok & (np.abs(denom) >= RAY_DEGENERATE_TOL)
    num = -(pis[:, :3] @ center + pis[:, 3])
    with np.errstate(divide="ignore", invalid="ignore"):
        s = num / denom
    pts = np.full((len(dirs), 3), np.nan)
    pts[ok] = center + s[ok, None] * dirs[ok]
    return ok, pts


def symmetric_pixel(u: Array, p: Array, e: Ellipsoid) -> Array | None:
    """Pixel of the mirrored surface point: project(reflect(raycast(u))).

    None when the raycast misses or the mirrored point falls behind the
    camera.
    """
    v = raycast_ellipsoid(u, p, e)
    if v is None:
        return None
    vs = reflect_point(v, e)
    uv, depth = project_points(p, vs[None, :])
    if depth[0] <= 0.0:
        return None
    return uv[0]


def symmetric_pixel_batch(pixels: Array, p: Array, e: Ellipsoid
                          ) -> tuple[Array, Array, Array, Array]:
    """Vectorized symmetric-pixel map.

    Returns (valid, surface points v, mirrored points v_s, mirrored
    pixels u_s). Invalid rows missed the silhouette or mirror behind the
    camera.
    """
    hit, v = raycast_ellipsoid_batch(pixels, p, e)
    vs = np.full_like(v, np.nan)
    vs[hit] = reflect_point(v[hit], e)
    us = np.full((len(v), 2), np.nan)
    valid = hit.copy()
    if np.any(hit):
        uv, depth = project_points(p, vs[hit])
        front = depth > 0.0
        idx = np.flatnonzero(hit)
        us[idx[front]] = uv[front]
        valid[idx[~front]] = False
    return valid, v, vs, us


def circumscribed_cuboid(e: Ellipsoid) -> Cuboid:
    """Oriented box sharing the ellipsoid's center, rotation and half axes."""
    return Cuboid(e.center, e.rotation, e.half_axes)


def project_dual_conic_bbox(e: Ellipsoid, p: Array) -> BBox:
    """Axis-aligned pixel bbox of the projected silhouette conic C* = P Q* P^T.

    Requires the object entirely in front of the camera (checked via the
    circumscribed cuboid corners); raises GeometryError otherwise.
    """
    corners = circumscribed_cuboid(e).corners()
    _, depth = project_points(p, corners)
    if np.any(depth <= 0.0):
        raise GeometryError("object not entirely in front of camera")
    q = dual_quadric_mat(e.center, e.rotation, e.half_axes)
    c = p @ q @ p.T
    # tangent lines x = x0: quadratic c22 x0^2 - 2 c02 x0 + c00 = 0
    if abs(c[2, 2]) < 1e-15:
        raise GeometryError("degenerate projected conic")
    dx = c[0, 2] * c[0, 2] - c[0, 0] * c[2, 2]
    dy = c[1, 2] * c[1, 2] - c[1, 1] * c[2, 2]
    if dx < 0.0 or dy < 0.0:
        raise GeometryError("projected conic is not a real ellipse")
    sx, sy = math.sqrt(dx), math.sqrt(dy)
    x0, x1 = (c[0, 2] - sx) / c[2, 2], (c[0, 2] + sx) / c[2, 2]
    y0, y1 = (c[1, 2] - sy) / c[2, 2], (c[1, 2] + sy) / c[2, 2]
    return BBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))


def transform_plane(plane: Plane, pose: Pose) -> Plane:
    """Express a parent-frame plane in the child frame of the pose.

    For a world<-camera pose this takes a world plane to camera
    coordinates: pi_cam = T_wc^T pi_world (point membership preserved).
    """
    return Plane.from_homogeneous(pose.matrix().T @ plane.homogeneous())
