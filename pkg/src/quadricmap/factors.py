"""Residual blocks for the camera-object cost.

Every residual is a plain float vector already divided by its standard
deviation; a factor contributes huber(|r|) to the total objective, so the
inlier regime is the usual half squared norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    BBox,
    CameraIntrinsics,
    Ellipsoid,
    Plane,
    Pose,
    compose_projection,
    dual_quadric_mat,
    matrix_to_rotvec,
)
from .symmetry import DistanceField, SampleSet, SymmetryError, symmetry_residuals

Array = np.ndarray

# residual standard deviations used when none are supplied explicitly
DEFAULT_SIGMA_DET = 10.0
DEFAULT_SIGMA_THETA = 10.0
DEFAULT_SIGMA_PI = 10.0
DEFAULT_SIGMA_SSC = 1.0
DEFAULT_SIGMA_SYM = 1.0


@dataclass(frozen=True)
class ScaleRatio:
    """Half-axis ratios (a/c, b/c) of an object class."""

    sigma: float
    beta: float

    def __post_init__(self):
        if self.sigma <= 0.0 or self.beta <= 0.0:
            raise ValueError("scale ratios must be positive")


ScaleRatioTable = dict  # label -> ScaleRatio


@dataclass(frozen=True)
class NoiseModel:
    sigma_det: float = DEFAULT_SIGMA_DET
    sigma_theta: float = DEFAULT_SIGMA_THETA
    sigma_pi: float = DEFAULT_SIGMA_PI
    sigma_ssc: float = DEFAULT_SIGMA_SSC
    sigma_odom_rot: float = 0.01
    sigma_odom_trans: float = 0.01
    sigma_sym: float = DEFAULT_SIGMA_SYM
    huber_delta: float = 1.0

    def __post_init__(self):
        for name in ("sigma_det", "sigma_theta", "sigma_pi", "sigma_ssc",
                     "sigma_odom_rot", "sigma_odom_trans", "sigma_sym",
                     "huber_delta"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Observation:
    frame_id: int
    object_id: int
    bbox: BBox
    label: str = ""


@dataclass(frozen=True)
class OdometryFactor:
    frame_i: int
    frame_j: int
    measured: Pose  # relative pose, frame_i <- frame_j


@dataclass(frozen=True)
class SupportFactor:
    object_id: int
    plane: Plane  # world frame, normalized


@dataclass(frozen=True)
class ScaleFactor:
    object_id: int
    label: str


@dataclass(frozen=True)
class SymmetryFactor:
    """Texture-symmetry term, attached to one observation of one object."""

    object_id: int
    frame_id: int
    dfield: DistanceField
    samples: SampleSet


@dataclass
class FactorGraph:
    """Pose and object nodes plus the factors connecting them.

    Current estimates live in poses/objects; the factor lists reference
    them by frame_id / object_id. One shared camera model covers all
    frames.
    """

    intrinsics: CameraIntrinsics
    poses: dict
    objects: dict
    observations: list
    odometry: list
    support: list
    scale: list
    symmetry: list
    table: ScaleRatioTable

    def validate(self) -> None:
        for ob in self.observations:
            if ob.frame_id not in self.poses or ob.object_id not in self.objects:
                raise ValueError(f"observation references missing node "
                                 f"({ob.frame_id}, {ob.object_id})")
        for od in self.odometry:
            if od.frame_i not in self.poses or od.frame_j not in self.poses:
                raise ValueError(f"odometry references missing pose "
                                 f"({od.frame_i}, {od.frame_j})")
        for fac in self.support + self.scale + self.symmetry:
            if fac.object_id not in self.objects:
                raise ValueError(f"factor references missing object {fac.object_id}")


# ---------------------------------------------------------------------------
# residual kernels


def normalized_bbox_planes(p: Array, b: BBox) -> Array:
    """Back-projected bbox edge planes as rows, unit normals.

    Row order matches the edge order (x_min, x_max, y_min, y_max).
    """
    lines = np.array([[1.0, 0.0, -b.x_min], [1.0, 0.0, -b.x_max],
                      [0.0, 1.0, -b.y_min], [0.0, 1.0, -b.y_max]])
    pis = lines @ p
    return pis / np.linalg.norm(pis[:, :3], axis=1, keepdims=True)


def tangency_values(planes: Array, q_dual: Array) -> Array:
    """pi^T Q* pi for each plane row."""
    return np.einsum("ij,jk,ik->i", planes, q_dual, planes)


def bbox_residual(e: Ellipsoid, b: BBox, p: Array,
                  sigma_det: float = DEFAULT_SIGMA_DET) -> Array:
    """Tangency mismatch of the four back-projected bbox edge planes."""
    q = dual_quadric_mat(e.center, e.rotation, e.half_axes)
    return tangency_values(normalized_bbox_planes(p, b), q) / sigma_det


def support_residual(e: Ellipsoid, plane: Plane,
                     sigma_theta: float = DEFAULT_SIGMA_THETA,
                     sigma_pi: float = DEFAULT_SIGMA_PI) -> Array:
    """Resting constraint against a normalized support plane.

    Components: local X and Y axes against the plane normal (zero when
    the object's Z axis is parallel to it) and the plane's tangency to
    the ellipsoid (zero when the bottom touches).
    """
    n = plane.normal
    pi = plane.homogeneous()
    q = dual_quadric_mat(e.center, e.rotation, e.half_axes)
    return np.array([
        float(e.rotation[:, 0] @ n) / sigma_theta,
        float(e.rotation[:, 1] @ n) / sigma_theta,
        float(pi @ q @ pi) / sigma_pi,
    ])


def scale_ratio(e: Ellipsoid) -> ScaleRatio:
    a, b, c = e.half_axes
    return ScaleRatio(a / c, b / c)


def ssc_residual(e: Ellipsoid, table: ScaleRatioTable,
                 sigma_ssc: float = DEFAULT_SIGMA_SSC,
                 unknown_label: str = "skip") -> Array | None:
    """Deviation of the object's axis ratios from its class prior.

    Unknown labels either drop the factor (None, the default) or fall
    back to a 1:1:1 prior when unknown_label="unit".
    """
    prior = table.get(e.label)
    if prior is None:
        if unknown_label == "skip":
            return None
        if unknown_label == "unit":
            prior = ScaleRatio(1.0, 1.0)
        else:
            raise ValueError(f"unknown fallback policy {unknown_label!r}")
    r = scale_ratio(e)
    return np.array([r.sigma - prior.sigma, r.beta - prior.beta]) / sigma_ssc


def odometry_residual(pose_i: Pose, pose_j: Pose, measured_ij: Pose,
                      sigma_rot: float = 0.01, sigma_trans: float = 0.01) -> Array:
    """Relative-pose error measured_ij^-1 (pose_i^-1 pose_j), as
    (axis-angle / sigma_rot, translation / sigma_trans)."""
    rel = pose_i.inverse().compose(pose_j)
    err = measured_ij.inverse().compose(rel)
    return np.concatenate([matrix_to_rotvec(err.rotation) / sigma_rot,
                           err.translation / sigma_trans])


def huber(r: float, delta: float) -> float:
    """Robust kernel: quadratic inside delta, linear outside, C1 at the knee."""
    a = abs(r)
    if a <= delta:
        return 0.5 * r * r
    return delta * (a - 0.5 * delta)


def robustify(r: Array, delta: float) -> Array:
    """Rescale a residual block so 0.5|r'|^2 equals huber(|r|).

    Identity inside the inlier region, so least-squares machinery sees
    the robust cost without special-casing.
    """
    n = float(np.linalg.norm(r))
    if n <= delta or n == 0.0:
        return r
    return r * (math.sqrt(2.0 * huber(n, delta)) / n)


# ---------------------------------------------------------------------------
# whole-graph evaluation


def _canonical_factors(g: FactorGraph):
    """Factors in a fixed order so sums are bitwise reproducible."""
    obs = sorted(g.observations, key=lambda o: (o.frame_id, o.object_id))
    odom = sorted(g.odometry, key=lambda o: (o.frame_i, o.frame_j))
    sup = sorted(g.support, key=lambda f: f.object_id)
    sca = sorted(g.scale, key=lambda f: f.object_id)
    sym = sorted(g.symmetry, key=lambda f: (f.object_id, f.frame_id))
    return obs, odom, sup, sca, sym


def graph_residual_blocks(g: FactorGraph, noise: NoiseModel,
                          projections: dict | None = None) -> list:
    """Robustified residual vectors, one per active factor, canonical order.

    projections optionally maps frame_id -> precomputed 3x4 projection
    matrix; callers that evaluate repeatedly should supply it to skip
    the per-call recomputation.
    """
    if projections is None:
        projections = {f: compose_projection(pose, g.intrinsics)
                       for f, pose in g.poses.items()}
    obs, odom, sup, sca, sym = _canonical_factors(g)
    blocks = []
    d = noise.huber_delta
    for ob in obs:
        p = projections[ob.frame_id]
        e = g.objects[ob.object_id]
        blocks.append(robustify(bbox_residual(e, ob.bbox, p, noise.sigma_det), d))
    for od in odom:
        blocks.append(robustify(
            odometry_residual(g.poses[od.frame_i], g.poses[od.frame_j], od.measured,
                              noise.sigma_odom_rot, noise.sigma_odom_trans), d))
    for fac in sup:
        blocks.append(robustify(
            support_residual(g.objects[fac.object_id], fac.plane,
                             noise.sigma_theta, noise.sigma_pi), d))
    for fac in sca:
        e = g.objects[fac.object_id]
        labeled = Ellipsoid(e.center, e.rotation, e.half_axes, label=fac.label)
        r = ssc_residual(labeled, g.table, noise.sigma_ssc)
        if r is not None:
            blocks.append(robustify(r, d))
    for fac in sym:
        p = projections[fac.frame_id]
        try:
            r = symmetry_residuals(g.objects[fac.object_id], fac.samples,
                                   fac.dfield, p, noise.sigma_sym)
        except SymmetryError:
            continue
        blocks.append(robustify(r, d))
    return blocks


def graph_total_cost(g: FactorGraph, noise: NoiseModel,
                     projections: dict | None = None) -> float:
    """Sum of huber(|r|) over all factors at the current node values."""
    total = 0.0
    for block in graph_residual_blocks(g, noise, projections):
        total += 0.5 * float(block @ block)
    return total
