"""Texture-symmetry machinery.

Edge maps over detection windows, a Euclidean distance transform that
also records which edge pixel achieves the minimum, the three pixel
descriptors (grayscale, image-plane distance, surface distance), sample
selection, and the symmetry cost used to refine object orientation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import (
    BBox,
    Ellipsoid,
    project_points,
    raycast_ellipsoid,
    raycast_ellipsoid_batch,
    raycast_tangent_plane_batch,
    reflect_point,
)

Array = np.ndarray


class SymmetryError(Exception):
    """Unusable symmetry input (empty edge map, no valid samples, ...)."""


@dataclass
class EdgeMap:
    """Boolean edge mask over a window of the image.

    origin is the (x, y) image coordinate of the window's top-left pixel;
    gray optionally carries the grayscale patch for the baseline
    descriptor.
    """

    mask: Array
    origin: tuple[int, int] = (0, 0)
    gray: Array | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise SymmetryError("edge mask must be 2-D")
        if self.gray is not None:
            self.gray = np.asarray(self.gray, dtype=np.float64)
            if self.gray.shape != self.mask.shape:
                raise SymmetryError("gray channel shape mismatch")

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def edge_count(self) -> int:
        return int(self.mask.sum())

    def to_window(self, pixels: Array) -> Array:
        """Image pixel coordinates -> continuous window coordinates."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        return pixels - np.array(self.origin, dtype=np.float64)


@dataclass
class DistanceField:
    """Per-pixel distance to the nearest edge pixel plus that pixel itself.

    nearest[r, c] = (row, col) of the achieving edge pixel in window
    coordinates; ties go to the lexicographically smallest (row, col).
    """

    distance: Array
    nearest: Array
    origin: tuple[int, int] = (0, 0)

    @property
    def height(self) -> int:
        return self.distance.shape[0]

    @property
    def width(self) -> int:
        return self.distance.shape[1]

    def _window_xy(self, pixels: Array) -> tuple[Array, Array]:
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        x = np.clip(pixels[:, 0] - self.origin[0], 0.0, self.width - 1.0)
        y = np.clip(pixels[:, 1] - self.origin[1], 0.0, self.height - 1.0)
        return x, y

    def distance_at(self, pixels: Array) -> Array:
        """Bilinear distance lookup at sub-pixel image coordinates.

        Out-of-window queries clamp to the window border.
        """
        x, y = self._window_xy(pixels)
        x0 = np.clip(np.floor(x).astype(np.int64), 0, max(self.width - 2, 0))
        y0 = np.clip(np.floor(y).astype(np.int64), 0, max(self.height - 2, 0))
        fx, fy = x - x0, y - y0
        d = self.distance
        x1 = np.minimum(x0 + 1, self.width - 1)
        y1 = np.minimum(y0 + 1, self.height - 1)
        top = d[y0, x0] * (1 - fx) + d[y0, x1] * fx
        bot = d[y1, x0] * (1 - fx) + d[y1, x1] * fx
        return top * (1 - fy) + bot * fy

    def argmin_at(self, pixels: Array) -> Array:
        """Nearest edge pixel, as (x, y) image coordinates.

        The query rounds to the nearest grid pixel first; the argmin
        channel is not interpolable.
        """
        x, y = self._window_xy(pixels)
        c = np.clip(np.rint(x).astype(np.int64), 0, self.width - 1)
        r = np.clip(np.rint(y).astype(np.int64), 0, self.height - 1)
        near = self.nearest[r, c]
        return np.column_stack([near[:, 1] + self.origin[0],
                                near[:, 0] + self.origin[1]]).astype(np.float64)


@dataclass
class SampleSet:
    """Pixel samples (image coordinates) tagged corner or uniform."""

    pixels: Array
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if len(self.tags) != len(self.pixels):
            raise SymmetryError("one tag per sample required")

    def __len__(self) -> int:
        return len(self.pixels)


def build_edge_map(image: Array, bbox: BBox, threshold: float) -> EdgeMap:
    """Gradient-magnitude edge mask over the bbox window of a grayscale image.

    Pixels whose central-difference gradient magnitude exceeds
    threshold * (max magnitude inside the window) are edges. The bbox is
    clipped to the image; raises on an edge-free window.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    x0 = int(np.clip(math.floor(bbox.x_min), 0, w - 1))
    y0 = int(np.clip(math.floor(bbox.y_min), 0, h - 1))
    x1 = int(np.clip(math.ceil(bbox.x_max) + 1, x0 + 1, w))
    y1 = int(np.clip(math.ceil(bbox.y_max) + 1, y0 + 1, h))
    gy, gx = np.gradient(image)
    mag = np.hypot(gx, gy)[y0:y1, x0:x1]
    peak = mag.max()
    mask = mag > threshold * peak
    if not mask.any():
        raise SymmetryError("empty edge map")
    return EdgeMap(mask, origin=(x0, y0), gray=image[y0:y1, x0:x1].copy())


def distance_transform_argmin(edges: EdgeMap) -> DistanceField:
    """Exact Euclidean distance transform carrying the nearest edge pixel.

    Works column-wise: within each edge-bearing column the nearest edge
    row per query row is exact; across columns a composite integer key
    (squared distance, then row, then column) makes the tie-break
    lexicographic by construction.
    """
    mask = edges.mask
    h, w = mask.shape
    edge_cols = np.flatnonzero(mask.any(axis=0)).astype(np.int64)
    if len(edge_cols) == 0:
        raise SymmetryError("empty edge map")
    rows = np.arange(h, dtype=np.int64)
    g = np.empty((h, len(edge_cols)), dtype=np.int64)
    for k, c in enumerate(edge_cols):
        er = np.flatnonzero(mask[:, c]).astype(np.int64)
        pos = np.searchsorted(er, rows)
        lo = er[np.clip(pos - 1, 0, len(er) - 1)]
        hi = er[np.clip(pos, 0, len(er) - 1)]
        # equality keeps the smaller row, matching the tie-break contract
        g[:, k] = np.where(np.abs(rows - hi) < np.abs(rows - lo), hi, lo)

    k1 = np.int64(h) * np.int64(w)
    cq = np.arange(w, dtype=np.int64)
    horiz = (cq[:, None] - edge_cols[None, :]) ** 2 * k1  # (w, m)
    distance = np.empty((h, w))
    nearest = np.empty((h, w, 2), dtype=np.int64)
    m = len(edge_cols)
    chunk = max(1, int(4_000_000 // max(w * m, 1)))
    for r0 in range(0, h, chunk):
        r1 = min(h, r0 + chunk)
        gr = g[r0:r1]
        vert = (rows[r0:r1, None] - gr) ** 2
        base = vert * k1 + gr * w + edge_cols
        total = base[:, None, :] + horiz[None, :, :]
        best = total.min(axis=2)
        tie = best % k1
        nearest[r0:r1, :, 0] = tie // w
        nearest[r0:r1, :, 1] = tie % w
        distance[r0:r1] = np.sqrt((best // k1).astype(np.float64))
    return DistanceField(distance, nearest, origin=edges.origin)


def beta_2dt(u: Array, dfield: DistanceField) -> float:
    """Image-plane descriptor: interpolated distance to the edge set."""
    return float(dfield.distance_at(np.asarray(u, dtype=np.float64)[None, :])[0])


def beta_gray(u: Array, edges: EdgeMap) -> float:
    """Baseline descriptor: interpolated grayscale intensity."""
    if edges.gray is None:
        raise SymmetryError("baseline unavailable")
    as_field = DistanceField(edges.gray, np.zeros((*edges.gray.shape, 2), dtype=np.int64),
                             origin=edges.origin)
    return float(as_field.distance_at(np.asarray(u, dtype=np.float64)[None, :])[0])


def beta_3dt(u: Array, dfield: DistanceField, p: Array, e: Ellipsoid) -> float | None:
    """Surface descriptor: distance from the sample's surface point to the
    surface point under its nearest edge pixel.

    Both pixels are lifted with the exact raycast here; the optimization
    loop uses the tangent-plane shortcut instead (see symmetry_residuals).
    Returns None when either pixel misses the silhouette.
    """
    u = np.asarray(u, dtype=np.float64)
    v0 = raycast_ellipsoid(u, p, e)
    if v0 is None:
        return None
    u_e = dfield.argmin_at(u[None, :])[0]
    v_e = raycast_ellipsoid(u_e, p, e)
    if v_e is None:
        return None
    return float(np.linalg.norm(v_e - v0))


def sample_points(bbox: BBox, edges: EdgeMap, n_uniform: int = 9,
                  corner_quality: float = 0.05, max_corners: int = 16) -> SampleSet:
    """Corner + uniform sample pixels inside the detection bbox.

    Corners are local maxima of the structure tensor's smaller eigenvalue
    above corner_quality times its window-wide peak, strongest first,
    capped at max_corners. Uniform points are the cell centers of a
    near-square grid over the bbox; no randomness anywhere.
    """
    img = edges.gray if edges.gray is not None else edges.mask.astype(np.float64)
    pixels: list[tuple[float, float]] = []
    tags: list[str] = []
    if img.shape[0] >= 3 and img.shape[1] >= 3 and max_corners > 0:
        gy, gx = np.gradient(img)
        sxx = ndimage.uniform_filter(gx * gx, 3)
        syy = ndimage.uniform_filter(gy * gy, 3)
        sxy = ndimage.uniform_filter(gx * gy, 3)
        half_tr = 0.5 * (sxx + syy)
        lam = half_tr - np.sqrt((0.5 * (sxx - syy)) ** 2 + sxy ** 2)
        peak = lam.max()
        if peak > 0.0:
            is_peak = (lam == ndimage.maximum_filter(lam, 3)) \
                & (lam > corner_quality * peak)
            rr, cc = np.nonzero(is_peak)
            xs = cc + edges.origin[0]
            ys = rr + edges.origin[1]
            inside = (bbox.x_min <= xs) & (xs <= bbox.x_max) \
                & (bbox.y_min <= ys) & (ys <= bbox.y_max)
            order = sorted(np.flatnonzero(inside),
                           key=lambda i: (-lam[rr[i], cc[i]], rr[i], cc[i]))
            for i in order[:max_corners]:
                pixels.append((float(xs[i]), float(ys[i])))
                tags.append("corner")
    if n_uniform > 0:
        k = math.ceil(math.sqrt(n_uniform))
        count = 0
        for iy in range(k):
            for ix in range(k):
                if count >= n_uniform:
                    break
                pixels.append((bbox.x_min + bbox.width * (2 * ix + 1) / (2 * k),
                               bbox.y_min + bbox.height * (2 * iy + 1) / (2 * k)))
                tags.append("uniform")
                count += 1
    return SampleSet(np.array(pixels, dtype=np.float64).reshape(-1, 2), tags)


def _descriptor_pairs_3dt(e: Ellipsoid, pix: Array, dfield: DistanceField,
                          p: Array) -> tuple[Array, Array, Array]:
    """(valid, beta, beta_mirror) for the surface descriptor.

    Surface points come from the exact raycast; the two nearest-edge
    pixels are lifted by intersecting their rays with the tangent planes
    anchored at the sample's surface point and its mirror.
    """
    hit, v = raycast_ellipsoid_batch(pix, p, e)
    n = len(pix)
    valid = hit.copy()
    beta = np.zeros(n)
    beta_m = np.zeros(n)
    if not valid.any():
        return valid, beta, beta_m
    idx = np.flatnonzero(valid)
    vs = reflect_point(v[idx], e)
    us, depth = project_points(p, vs)
    front = depth > 0.0
    valid[idx[~front]] = False
    idx = idx[front]
    if len(idx) == 0:
        return valid, beta, beta_m
    vs = vs[front]
    us = us[front]
    u_e = dfield.argmin_at(pix[idx])
    us_e = dfield.argmin_at(us)
    ok_a, ve = raycast_tangent_plane_batch(u_e, p, e, v[idx])
    ok_b, ve_m = raycast_tangent_plane_batch(us_e, p, e, vs)
    ok = ok_a & ok_b
    valid[idx[~ok]] = False
    idx = idx[ok]
    beta[idx] = np.linalg.norm(ve[ok] - v[idx], axis=1)
    beta_m[idx] = np.linalg.norm(ve_m[ok] - vs[ok], axis=1)
    return valid, beta, beta_m


def _descriptor_pairs_2d(e: Ellipsoid, pix: Array, dfield: DistanceField, p: Array,
                         edges: EdgeMap | None, use_gray: bool
                         ) -> tuple[Array, Array, Array]:
    """(valid, beta, beta_mirror) for the image-plane descriptors."""
    if use_gray:
        if edges is None or edges.gray is None:
            raise SymmetryError("baseline unavailable")
        plane_field = DistanceField(edges.gray,
                                    np.zeros((*edges.gray.shape, 2), dtype=np.int64),
                                    origin=edges.origin)
    else:
        plane_field = dfield
    hit, v = raycast_ellipsoid_batch(pix, p, e)
    n = len(pix)
    valid = hit.copy()
    beta = np.zeros(n)
    beta_m = np.zeros(n)
    idx = np.flatnonzero(valid)
    if len(idx) == 0:
        return valid, beta, beta_m
    vs = reflect_point(v[idx], e)
    us, depth = project_points(p, vs)
    front = depth > 0.0
    valid[idx[~front]] = False
    idx = idx[front]
    if len(idx) == 0:
        return valid, beta, beta_m
    beta[idx] = plane_field.distance_at(pix[idx])
    beta_m[idx] = plane_field.distance_at(us[front])
    return valid, beta, beta_m


def symmetry_residuals(e: Ellipsoid, samples: SampleSet, dfield: DistanceField,
                       p: Array, sigma_sym: float = 1.0, normalized: bool = True,
                       descriptor: str = "3dt", edges: EdgeMap | None = None
                       ) -> Array:
    """Per-sample descriptor mismatch across the symmetry map.

    residual_i = (beta(u_i) - beta(mirror(u_i))) / sigma, with sigma
    absorbing 1/sqrt(valid count) when normalized, so the squared norm of
    the vector equals symmetry_cost. Samples whose raycast misses or
    whose mirror falls behind the camera are dropped.
    """
    pix = samples.pixels
    if len(pix) == 0:
        raise SymmetryError("no valid samples")
    if descriptor == "3dt":
        valid, beta, beta_m = _descriptor_pairs_3dt(e, pix, dfield, p)
    elif descriptor == "2dt":
        valid, beta, beta_m = _descriptor_pairs_2d(e, pix, dfield, p, edges, False)
    elif descriptor == "gray":
        valid, beta, beta_m = _descriptor_pairs_2d(e, pix, dfield, p, edges, True)
    else:
        raise ValueError(f"unknown descriptor {descriptor!r}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise SymmetryError("no valid samples")
    scale = sigma_sym * math.sqrt(n_valid) if normalized else sigma_sym
    return (beta[valid] - beta_m[valid]) / scale


def symmetry_residuals_padded(e: Ellipsoid, samples: SampleSet,
                              dfield: DistanceField, p: Array,
                              sigma_sym: float = 1.0) -> tuple[Array, int]:
    """Fixed-slot variant for least-squares solvers.

    One entry per sample in sample order, zero where the sample or its
    mirror is unusable, so the vector length never changes while an
    optimizer moves the ellipsoid. Returns (residuals, valid count);
    zero valid samples yield an all-zero vector the caller must treat
    as "no information", not "perfect fit".
    """
    pix = samples.pixels
    if len(pix) == 0:
        return np.zeros(0), 0
    valid, beta, beta_m = _descriptor_pairs_3dt(e, pix, dfield, p)
    n_valid = int(valid.sum())
    r = np.zeros(len(pix))
    if n_valid:
        r[valid] = (beta[valid] - beta_m[valid]) \
            / (sigma_sym * math.sqrt(n_valid))
    return r, n_valid


def symmetry_cost(e: Ellipsoid, samples: SampleSet, dfield: DistanceField,
                  p: Array, sigma_sym: float = 1.0, normalized: bool = True,
                  descriptor: str = "3dt", edges: EdgeMap | None = None) -> float:
    """Mean squared descriptor mismatch over valid samples (see residuals)."""
    r = symmetry_residuals(e, samples, dfield, p, sigma_sym, normalized,
                           descriptor, edges)
    return float(r @ r)
