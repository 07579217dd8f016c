"""Levenberg-Marquardt core and the three solves built on it.

Ellipsoids travel through the optimizer as 9-vectors (center, yaw-pitch-
roll, log half-axes) so positivity of the axes is structural; poses as
6-vectors (axis-angle, translation). The damped normal equations use
lambda * diag(J^T J) scaling and steps are only ever accepted when the
cost drops, which keeps every reported trace non-increasing.

The whole-map solve exploits the factor graph's sparsity: a parameter
column of the Jacobian only touches the factors adjacent to its node,
so finite differencing re-evaluates those factors alone instead of the
full residual stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .factors import (
    FactorGraph,
    NoiseModel,
    ScaleRatio,
    ScaleRatioTable,
    _canonical_factors,
    bbox_residual,
    odometry_residual,
    robustify,
    ssc_residual,
    support_residual,
)
from .geometry import (
    BBox,
    Ellipsoid,
    Plane,
    Pose,
    camera_center,
    compose_projection,
    matrix_to_rotvec,
    pixel_rays,
    rotation_about_axis,
    rotation_from_ypr,
    rotvec_to_matrix,
    ypr_from_rotation,
)
from .symmetry import (
    DistanceField,
    SampleSet,
    symmetry_residuals_padded,
)

Array = np.ndarray

_LAMBDA_CEILING = 1e12
_DIAG_FLOOR = 1e-12


class SolverError(Exception):
    pass


@dataclass(frozen=True)
class LMConfig:
    max_iterations: int = 100
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.3
    cost_tol: float = 1e-10
    step_tol: float = 1e-12
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        for name in ("lambda0", "lambda_up", "lambda_down", "cost_tol",
                     "step_tol", "fd_step"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if not (self.lambda_up > 1.0 > self.lambda_down):
            raise ValueError("need lambda_up > 1 > lambda_down")


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    initial_cost: float
    final_cost: float
    cost_trace: list = field(default_factory=list)
    message: str = ""


# ---------------------------------------------------------------------------
# parameter vectors


def ellipsoid_to_params(e: Ellipsoid) -> Array:
    return np.concatenate([e.center, ypr_from_rotation(e.rotation),
                           np.log(e.half_axes)])


def ellipsoid_from_params(x: Array, label: str = "",
                          symmetry_axis_fixed: bool = False) -> Ellipsoid:
    x = np.asarray(x, dtype=np.float64)
    return Ellipsoid(x[:3].copy(), rotation_from_ypr(x[3], x[4], x[5]),
                     np.exp(x[6:9]), label=label,
                     symmetry_axis_fixed=symmetry_axis_fixed)


def pose_to_params(pose: Pose) -> Array:
    return np.concatenate([matrix_to_rotvec(pose.rotation), pose.translation])


def pose_from_params(x: Array) -> Pose:
    x = np.asarray(x, dtype=np.float64)
    return Pose(rotvec_to_matrix(x[:3]), x[3:6].copy())


# ---------------------------------------------------------------------------
# LM core


def _numeric_jacobian(residual_fn, x: Array, n_res: int, rel_step: float) -> Array:
    j = np.empty((n_res, len(x)))
    for i in range(len(x)):
        h = rel_step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        j[:, i] = (residual_fn(xp) - residual_fn(xm)) / (2.0 * h)
    return j


def lm_minimize(residual_fn, x0: Array, cfg: LMConfig = LMConfig(),
                jacobian_fn=None) -> tuple[Array, SolveReport]:
    """Damped least squares on 0.5 |residual_fn(x)|^2.

    jacobian_fn, when given, must return d residual / d x at x and is
    trusted verbatim; otherwise central differences with the config's
    relative step are used. A trial step that makes the residual
    non-finite is treated like any uphill step: rejected, damping up.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    with np.errstate(invalid="ignore"):
        r = np.asarray(residual_fn(x), dtype=np.float64)
    if not np.all(np.isfinite(r)):
        report = SolveReport(False, 0, math.nan, math.nan,
                             message="non-finite residual at start")
        return x, report
    cost = 0.5 * float(r @ r)
    trace = [cost]
    lam = cfg.lambda0
    accepted = 0
    converged = False
    message = ""
    for _ in range(cfg.max_iterations):
        # trial points may momentarily push parameters somewhere wild
        # (exp overflow, rays behind camera); non-finite residuals are
        # rejected below, so the fp warnings carry no information
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if jacobian_fn is not None:
                j = np.asarray(jacobian_fn(x), dtype=np.float64)
            else:
                j = _numeric_jacobian(residual_fn, x, len(r), cfg.fd_step)
        a = j.T @ j
        g = j.T @ r
        stepped = False
        while lam <= _LAMBDA_CEILING:
            damped = a + lam * np.diag(np.maximum(np.diag(a), _DIAG_FLOOR))
            try:
                dx = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                continue
            if not np.all(np.isfinite(dx)):
                lam *= cfg.lambda_up
                continue
            x_try = x + dx
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                r_try = np.asarray(residual_fn(x_try), dtype=np.float64)
            if np.all(np.isfinite(r_try)):
                cost_try = 0.5 * float(r_try @ r_try)
                if cost_try < cost:
                    drop = cost - cost_try
                    x, r, cost = x_try, r_try, cost_try
                    trace.append(cost)
                    accepted += 1
                    lam = max(lam * cfg.lambda_down, 1e-15)
                    stepped = True
                    if drop <= cfg.cost_tol * max(cost, 1.0) \
                            or float(np.linalg.norm(dx)) \
                            <= cfg.step_tol * (1.0 + float(np.linalg.norm(x))):
                        converged = True
                    break
            lam *= cfg.lambda_up
        if not stepped:
            converged = True
            message = "no improving step"
            break
        if converged:
            break
    return x, SolveReport(converged, accepted, trace[0], cost, trace, message)


# ---------------------------------------------------------------------------
# single-frame initialization


def _plane_frame(normal: Array) -> Array:
    """Deterministic rotation whose third column is the plane normal."""
    ref = np.array([1.0, 0.0, 0.0])
    if abs(normal @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    x_axis = ref - (ref @ normal) * normal
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(normal, x_axis)
    return np.column_stack([x_axis, y_axis, normal])


def _focal_y(p: Array) -> float:
    # for P = K [R^T | -R^T t], M M^T = K K^T up to scale, so the pinhole
    # entries can be read back without a full decomposition
    m = p[:, :3]
    b = m @ m.T
    b = b / b[2, 2]
    return math.sqrt(max(b[1, 1] - b[1, 2] ** 2, _DIAG_FLOOR))


def init_single_frame(b: BBox, plane: Plane, label: str,
                      table: ScaleRatioTable, p: Array, noise: NoiseModel,
                      cfg: LMConfig = LMConfig()) -> Ellipsoid:
    """Ellipsoid from one detection: bbox tangency + support + ratio prior.

    The seed drops the bbox-center ray onto the support plane, sizes the
    vertical half-axis so the projected height matches the bbox height
    at that depth, lifts the center half an object up, and aligns the
    axes with the plane at zero yaw. LM then polishes all 9 DoF.
    """
    if b.width <= 0.0 or b.height <= 0.0:
        raise ValueError("degenerate bbox")
    plane = plane.normalized()
    cam = camera_center(p)
    if plane.signed_distance(cam) < 0.0:
        plane = plane.flipped()
    normal = plane.normal

    _, dirs = pixel_rays(p, b.center()[None, :])
    ray = dirs[0]
    along = normal @ ray
    if abs(along) < 1e-12:
        raise SolverError("view ray parallel to support plane")
    s = -plane.signed_distance(cam) / along
    if s <= 0.0:
        raise SolverError("support plane behind camera")
    hit = cam + s * ray

    depth = float(p[2, :3] @ hit + p[2, 3])
    half_height = b.height * depth / (2.0 * _focal_y(p))
    prior = table.get(label) if table else None
    if prior is None:
        prior = ScaleRatio(1.0, 1.0)
    center0 = hit + normal * half_height
    axes0 = np.array([prior.sigma * half_height, prior.beta * half_height,
                      half_height])
    x0 = np.concatenate([center0, ypr_from_rotation(_plane_frame(normal)),
                         np.log(axes0)])

    def residual_fn(x):
        e = ellipsoid_from_params(x)
        ratios = np.array([e.half_axes[0] / e.half_axes[2] - prior.sigma,
                           e.half_axes[1] / e.half_axes[2] - prior.beta])
        return np.concatenate([
            bbox_residual(e, b, p, noise.sigma_det),
            support_residual(e, plane, noise.sigma_theta, noise.sigma_pi),
            ratios / noise.sigma_ssc,
        ])

    x_star, report = lm_minimize(residual_fn, x0, cfg)
    if not np.all(np.isfinite(x_star)) or math.isnan(report.final_cost) \
            or report.final_cost > report.initial_cost:
        raise SolverError("initialization diverged")
    e = ellipsoid_from_params(x_star, label=label)
    if float(e.rotation[:, 2] @ normal) < 0.0:
        # same shape, axes relabeled so local Z points out of the plane
        flip = e.rotation @ np.diag([1.0, -1.0, -1.0])
        e = Ellipsoid(e.center, flip, e.half_axes, label=label)
    return e


# ---------------------------------------------------------------------------
# yaw refinement against the texture term


def refine_orientation(e: Ellipsoid, samples: SampleSet, dfield: DistanceField,
                       p: Array, plane: Plane, noise: NoiseModel,
                       cfg: LMConfig = LMConfig()) -> Ellipsoid:
    """Spin e about the support normal to the symmetry cost minimum.

    Coarse scan first (the cost is far from convex in yaw), then an LM
    polish from the best cell; the input orientation wins whenever no
    candidate beats its cost, so a misleading edge map cannot make the
    estimate worse. With no usable samples e is returned unchanged.
    """
    plane = plane.normalized()
    normal = plane.normal

    def apply(theta: float) -> Ellipsoid:
        if theta == 0.0:
            return e
        return Ellipsoid(e.center, rotation_about_axis(normal, theta) @ e.rotation,
                         e.half_axes, label=e.label,
                         symmetry_axis_fixed=e.symmetry_axis_fixed)

    def cost(theta: float) -> float | None:
        et = apply(theta)
        r_sym, n_valid = symmetry_residuals_padded(et, samples, dfield, p,
                                                   noise.sigma_sym)
        if n_valid == 0:
            return None
        r_sup = support_residual(et, plane, noise.sigma_theta, noise.sigma_pi)
        total = 0.0
        for block in (r_sym, r_sup):
            rb = robustify(block, noise.huber_delta)
            total += 0.5 * float(rb @ rb)
        return total

    base = cost(0.0)
    if base is None:
        return e

    best_theta, best_cost = 0.0, base
    for step in range(-15, 16):
        theta = math.radians(3.0 * step)
        c = cost(theta)
        if c is not None and c < best_cost:
            best_theta, best_cost = theta, c

    def residual_fn(x):
        et = apply(float(x[0]))
        r_sym, n_valid = symmetry_residuals_padded(et, samples, dfield, p,
                                                   noise.sigma_sym)
        if n_valid == 0:
            r_sym = np.full(len(samples.pixels), 1e3)
        r_sup = support_residual(et, plane, noise.sigma_theta, noise.sigma_pi)
        return np.concatenate([robustify(r_sym, noise.huber_delta),
                               robustify(r_sup, noise.huber_delta)])

    x_star, _ = lm_minimize(residual_fn, np.array([best_theta]), cfg)
    polished = cost(float(x_star[0]))
    if polished is not None and polished < best_cost:
        best_theta, best_cost = float(x_star[0]), polished
    if best_cost >= base:
        return e
    return apply(best_theta)


# ---------------------------------------------------------------------------
# whole-map optimization


class _GraphProblem:
    """Flattens a factor graph into (x, residual, sparse-FD jacobian).

    Parameter layout: non-anchor poses in frame order (6 each), then
    objects in id order (9 each). The first frame is the gauge anchor
    and never enters x.
    """

    def __init__(self, g: FactorGraph, noise: NoiseModel):
        self.g = g
        self.noise = noise
        obs, odom, sup, sca, sym = _canonical_factors(g)
        sca = [f for f in sca if f.label in g.table]
        self.factors = [("obs", f) for f in obs] + [("odom", f) for f in odom] \
            + [("sup", f) for f in sup] + [("sca", f) for f in sca] \
            + [("sym", f) for f in sym]
        sizes = {"obs": 4, "odom": 6, "sup": 3, "sca": 2}
        self.slices = []
        start = 0
        for kind, f in self.factors:
            n = sizes[kind] if kind != "sym" else len(f.samples.pixels)
            self.slices.append(slice(start, start + n))
            start += n
        self.n_residuals = start

        frames = sorted(g.poses)
        self.anchor = frames[0] if frames else None
        self.blocks = [("pose", f) for f in frames[1:]] \
            + [("obj", o) for o in sorted(g.objects)]
        self.block_slices = {}
        start = 0
        for kind, key in self.blocks:
            n = 6 if kind == "pose" else 9
            self.block_slices[(kind, key)] = slice(start, start + n)
            start += n
        self.n_params = start

        self.adjacency = [self._touched(kind, f) for kind, f in self.factors]
        self.block_factors = {blk: [] for blk in self.blocks}
        for fi, touched in enumerate(self.adjacency):
            for blk in touched:
                if blk in self.block_factors:
                    self.block_factors[blk].append(fi)

        self.labels = {o: (g.objects[o].label, g.objects[o].symmetry_axis_fixed)
                       for o in g.objects}

    def _touched(self, kind, f):
        if kind == "obs":
            return [("pose", f.frame_id), ("obj", f.object_id)]
        if kind == "odom":
            return [("pose", f.frame_i), ("pose", f.frame_j)]
        if kind == "sym":
            return [("pose", f.frame_id), ("obj", f.object_id)]
        return [("obj", f.object_id)]

    def encode(self) -> Array:
        x = np.empty(self.n_params)
        for kind, key in self.blocks:
            sl = self.block_slices[(kind, key)]
            if kind == "pose":
                x[sl] = pose_to_params(self.g.poses[key])
            else:
                x[sl] = ellipsoid_to_params(self.g.objects[key])
        return x

    def decode(self, x: Array) -> tuple[dict, dict]:
        poses = dict(self.g.poses)
        objects = dict(self.g.objects)
        for kind, key in self.blocks:
            sl = self.block_slices[(kind, key)]
            if kind == "pose":
                poses[key] = pose_from_params(x[sl])
            else:
                label, fixed = self.labels[key]
                objects[key] = ellipsoid_from_params(x[sl], label, fixed)
        return poses, objects

    def _factor_residual(self, kind, f, poses, objects, proj_cache) -> Array:
        noise = self.noise
        if kind == "obs":
            p = self._projection(f.frame_id, poses, proj_cache)
            r = bbox_residual(objects[f.object_id], f.bbox, p, noise.sigma_det)
        elif kind == "odom":
            r = odometry_residual(poses[f.frame_i], poses[f.frame_j], f.measured,
                                  noise.sigma_odom_rot, noise.sigma_odom_trans)
        elif kind == "sup":
            r = support_residual(objects[f.object_id], f.plane,
                                 noise.sigma_theta, noise.sigma_pi)
        elif kind == "sca":
            e = objects[f.object_id]
            labeled = Ellipsoid(e.center, e.rotation, e.half_axes, label=f.label)
            r = ssc_residual(labeled, self.g.table, noise.sigma_ssc)
        else:
            p = self._projection(f.frame_id, poses, proj_cache)
            r, _ = symmetry_residuals_padded(objects[f.object_id], f.samples,
                                            f.dfield, p, noise.sigma_sym)
        return robustify(r, noise.huber_delta)

    def _projection(self, frame_id, poses, cache):
        if frame_id not in cache:
            cache[frame_id] = compose_projection(poses[frame_id],
                                                 self.g.intrinsics)
        return cache[frame_id]

    def residual(self, x: Array) -> Array:
        poses, objects = self.decode(x)
        out = np.empty(self.n_residuals)
        cache = {}
        for (kind, f), sl in zip(self.factors, self.slices):
            out[sl] = self._factor_residual(kind, f, poses, objects, cache)
        return out

    def jacobian(self, x: Array) -> Array:
        cfg_step = self._fd_step
        poses0, objects0 = self.decode(x)
        j = np.zeros((self.n_residuals, self.n_params))
        for kind, key in self.blocks:
            sl = self.block_slices[(kind, key)]
            touched = self.block_factors[(kind, key)]
            if not touched:
                continue
            for col in range(sl.start, sl.stop):
                h = cfg_step * max(1.0, abs(x[col]))
                vals = []
                for sign in (1.0, -1.0):
                    xs = x.copy()
                    xs[col] += sign * h
                    if kind == "pose":
                        poses = dict(poses0)
                        poses[key] = pose_from_params(xs[sl])
                        objects = objects0
                    else:
                        label, fixed = self.labels[key]
                        objects = dict(objects0)
                        objects[key] = ellipsoid_from_params(xs[sl], label, fixed)
                        poses = poses0
                    cache = {}
                    vals.append([
                        self._factor_residual(self.factors[fi][0],
                                              self.factors[fi][1],
                                              poses, objects, cache)
                        for fi in touched
                    ])
                for fi, rp, rm in zip(touched, vals[0], vals[1]):
                    j[self.slices[fi], col] = (rp - rm) / (2.0 * h)
        return j

    _fd_step = 1e-6


def optimize_map(g: FactorGraph, noise: NoiseModel,
                 cfg: LMConfig = LMConfig()) -> tuple[FactorGraph, SolveReport]:
    """Joint LM over all free poses and objects of the graph.

    The first frame stays fixed to pin the gauge. Returns a new graph
    holding the optimized nodes; the input graph is not modified.
    """
    g.validate()
    problem = _GraphProblem(g, noise)
    problem._fd_step = cfg.fd_step
    if problem.n_params == 0:
        r = problem.residual(np.zeros(0))
        cost = 0.5 * float(r @ r)
        return g, SolveReport(True, 0, cost, cost, [cost])
    x0 = problem.encode()
    x_star, report = lm_minimize(problem.residual, x0, cfg,
                                 jacobian_fn=problem.jacobian)
    poses, objects = problem.decode(x_star)
    out = FactorGraph(g.intrinsics, poses, objects, g.observations, g.odometry,
                      g.support, g.scale, g.symmetry, g.table)
    return out, report
