"""Symmetry layer tests.

The distance transform is checked against a brute-force nearest-edge
scan; descriptor behavior is checked on scenes built by an in-test
renderer that projects mirror-paired surface points, so the symmetric
structure is exact by construction.
"""

import math

import numpy as np
import pytest

from quadricmap.geometry import (
    BBox,
    CameraIntrinsics,
    Ellipsoid,
    Pose,
    compose_projection,
    project_dual_conic_bbox,
    project_points,
    raycast_ellipsoid,
    raycast_ellipsoid_batch,
    reflect_point,
    rotation_about_axis,
    rotation_x,
    symmetric_pixel,
)
from quadricmap.symmetry import (
    DistanceField,
    EdgeMap,
    SampleSet,
    SymmetryError,
    beta_2dt,
    beta_3dt,
    beta_gray,
    build_edge_map,
    distance_transform_argmin,
    sample_points,
    symmetry_cost,
    symmetry_residuals,
)

KITCHEN_K = CameraIntrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5)


def _brute_force_field(mask):
    """Reference nearest-edge scan; first-minimum over the row-major edge
    list reproduces the lexicographic tie-break."""
    h, w = mask.shape
    edges = np.argwhere(mask)  # row-major sorted
    rows, cols = np.mgrid[0:h, 0:w]
    pix = np.column_stack([rows.ravel(), cols.ravel()]).astype(np.int64)
    d2 = (pix[:, None, 0] - edges[None, :, 0]) ** 2 \
        + (pix[:, None, 1] - edges[None, :, 1]) ** 2
    best = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(len(pix)), best].astype(np.float64))
    nearest = edges[best]
    return dist.reshape(h, w), nearest.reshape(h, w, 2)


def _render_pattern(e, p, origin, size, n_curves, seed, mirror=True,
                    pts_per_curve=400):
    """Edge map from mirror-paired random surface arcs of e.

    Arcs live on the x >= 0 half in the object frame so the pattern is
    asymmetric in yaw; each is reflected across the object's symmetry
    plane, and both sets are projected and rasterized. Densely sampled
    arcs give connected edge curves, matching real texture edges.
    """
    rng = np.random.default_rng(seed)
    unit = []
    for _ in range(n_curves):
        d0 = rng.standard_normal(3)
        d0 /= np.linalg.norm(d0)
        d0[0] = abs(d0[0])
        w_axis = rng.standard_normal(3)
        w_axis /= np.linalg.norm(w_axis)
        ts = np.linspace(0.0, rng.uniform(0.8, 2.2), pts_per_curve)
        cross = np.cross(w_axis, d0)
        arc = (d0[None, :] * np.cos(ts)[:, None]
               + cross[None, :] * np.sin(ts)[:, None]
               + w_axis[None, :] * (w_axis @ d0) * (1.0 - np.cos(ts))[:, None])
        unit.append(arc[arc[:, 0] >= 0.0])
    d = np.vstack(unit)
    pts = e.center + (d * e.half_axes) @ e.rotation.T
    if mirror:
        pts = np.vstack([pts, reflect_point(pts, e)])
    uv, depth = project_points(p, pts)
    # keep only camera-facing surface points; when mirroring, a point and its
    # reflection are kept together or dropped together so the rendered pattern
    # stays an exact fixed set of the symmetry map
    hit, near = raycast_ellipsoid_batch(uv, p, e)
    visible = hit & (np.linalg.norm(near - pts, axis=1) < 1e-6)
    if mirror:
        n_half = len(pts) // 2
        paired = visible[:n_half] & visible[n_half:]
        visible = np.concatenate([paired, paired])
    w, h = size
    mask = np.zeros((h, w), dtype=bool)
    cols = np.rint(uv[:, 0]).astype(int) - origin[0]
    rows = np.rint(uv[:, 1]).astype(int) - origin[1]
    ok = visible & (depth > 0) & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    mask[rows[ok], cols[ok]] = True
    return EdgeMap(mask, origin=origin)


def _ring_edge_scene(e, p, y0=0.5, n=1200, pad=16):
    """Edge map of two mirror-paired latitude rings at local y = +-y0 * b.

    Rings are smooth and well separated, so every probe pixel near one
    ring has an unambiguous nearest edge on that ring. Returns the edge
    map plus the kept (pair-visible) projected pixels of each ring.
    """
    bbox = project_dual_conic_bbox(e, p)
    x0 = int(np.floor(bbox.x_min)) - pad
    y0_px = int(np.floor(bbox.y_min)) - pad
    w = int(np.ceil(bbox.x_max)) - x0 + pad
    h = int(np.ceil(bbox.y_max)) - y0_px + pad
    th = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    r = math.sqrt(1.0 - y0 * y0)
    dirs = np.column_stack([r * np.cos(th), np.full(n, y0), r * np.sin(th)])
    plus = e.center + (dirs * e.half_axes) @ e.rotation.T
    pts = np.vstack([plus, reflect_point(plus, e)])
    uv, depth = project_points(p, pts)
    hit, near = raycast_ellipsoid_batch(uv, p, e)
    visible = hit & (np.linalg.norm(near - pts, axis=1) < 1e-6)
    paired = visible[:n] & visible[n:]
    visible = np.concatenate([paired, paired])
    mask = np.zeros((h, w), dtype=bool)
    cols = np.rint(uv[:, 0]).astype(int) - x0
    rows = np.rint(uv[:, 1]).astype(int) - y0_px
    ok = visible & (depth > 0) & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    mask[rows[ok], cols[ok]] = True
    return EdgeMap(mask, origin=(x0, y0_px)), uv[:n][paired], uv[n:][paired]


def _ring_probe_pairs(e, p, edges, dfield, plus_uv, minus_uv, delta):
    """Descriptor values across mirror pairs for probes offset delta px
    from the upper ring, keeping only probes with a clean one-sided
    nearest edge and a visible mirror point."""
    x0, y0 = edges.origin
    h, w = edges.mask.shape
    tang = np.gradient(plus_uv, axis=0)
    nrm = np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.column_stack([-tang[:, 1], tang[:, 0]]) / np.maximum(nrm, 1e-12)

    def _near(set_uv, q):
        return math.sqrt(float(((set_uv - q) ** 2).sum(axis=1).min()))

    out = []
    for base, nv in zip(plus_uv[::8], normal[::8]):
        for sgn in (1.0, -1.0):
            u = base + sgn * delta * nv
            if not (x0 + 2 < u[0] < x0 + w - 3 and y0 + 2 < u[1] < y0 + h - 3):
                continue
            if _near(minus_uv, u) < _near(plus_uv, u) + 3.0:
                continue
            if abs(float(dfield.distance_at(u[None])[0]) - delta) > 2.0:
                continue
            us = symmetric_pixel(u, p, e)
            if us is None:
                continue
            if not (x0 + 2 < us[0] < x0 + w - 3 and y0 + 2 < us[1] < y0 + h - 3):
                continue
            v0 = raycast_ellipsoid(u, p, e)
            vs = reflect_point(v0, e)
            vm = raycast_ellipsoid(us, p, e)
            if vm is None or np.linalg.norm(vm - vs) > 1e-6:
                continue
            if _near(plus_uv, us) < _near(minus_uv, us) + 3.0:
                continue
            b3a = beta_3dt(u, dfield, p, e)
            b3b = beta_3dt(us, dfield, p, e)
            if b3a is None or b3b is None:
                continue
            out.append((beta_2dt(u, dfield), beta_2dt(us, dfield), b3a, b3b))
            break
    return np.array(out).reshape(-1, 4)


def _on_plane_scene(seed=5, n_curves=7):
    """Object whose symmetry plane contains the camera center; the
    symmetry line projects to the horizontal pixel row y = 239.5 and the
    window rows are chosen symmetric about it."""
    e = Ellipsoid(np.array([0.0, 0.0, 4.0]), np.eye(3),
                  np.array([0.5, 0.35, 0.7]))
    p = compose_projection(Pose.identity(), KITCHEN_K)
    origin = (248, 188)
    size = (143, 104)  # rows 188..291 mirror onto themselves about 239.5
    edges = _render_pattern(e, p, origin, size, n_curves, seed)
    return e, p, edges


class TestBuildEdgeMap:
    def test_constant_image_raises(self):
        img = np.full((40, 40), 7.0)
        with pytest.raises(SymmetryError, match="empty edge map"):
            build_edge_map(img, BBox(5, 5, 30, 30), 0.5)

    def test_vertical_step_edge_columns(self):
        img = np.zeros((20, 30))
        img[:, 12:] = 10.0
        em = build_edge_map(img, BBox(2, 2, 27, 17), 0.5)
        cols = np.unique(np.nonzero(em.mask)[1]) + em.origin[0]
        # central differences react one pixel either side of the step
        np.testing.assert_array_equal(cols, [11, 12])

    def test_zero_threshold_marks_all_gradients(self):
        img = np.zeros((10, 10))
        img[4, 4] = 5.0
        em = build_edge_map(img, BBox(0, 0, 9, 9), 0.0)
        gy, gx = np.gradient(img)
        np.testing.assert_array_equal(em.mask, np.hypot(gx, gy) > 0)

    def test_window_clipped_to_image(self):
        img = np.zeros((20, 20))
        img[:, 10:] = 1.0
        em = build_edge_map(img, BBox(-5.0, -5.0, 40.0, 40.0), 0.5)
        assert em.origin == (0, 0)
        assert em.mask.shape == (20, 20)


class TestDistanceTransform:
    def test_single_edge_pixel(self):
        mask = np.zeros((3, 3), dtype=bool)
        mask[1, 1] = True
        f = distance_transform_argmin(EdgeMap(mask))
        assert f.distance[0, 0] == pytest.approx(math.sqrt(2))
        np.testing.assert_array_equal(f.nearest[0, 0], [1, 1])
        assert f.distance[1, 1] == 0.0
        np.testing.assert_array_equal(f.nearest[2, 0], [1, 1])

    def test_all_edges(self):
        mask = np.ones((4, 5), dtype=bool)
        f = distance_transform_argmin(EdgeMap(mask))
        assert f.distance.max() == 0.0
        rows, cols = np.mgrid[0:4, 0:5]
        np.testing.assert_array_equal(f.nearest[..., 0], rows)
        np.testing.assert_array_equal(f.nearest[..., 1], cols)

    def test_lexicographic_tie_break(self):
        # query (1,1) is sqrt(2) from both (0,2) and (2,0): row wins
        mask = np.zeros((3, 3), dtype=bool)
        mask[0, 2] = True
        mask[2, 0] = True
        f = distance_transform_argmin(EdgeMap(mask))
        np.testing.assert_array_equal(f.nearest[1, 1], [0, 2])

    def test_same_column_tie_prefers_smaller_row(self):
        mask = np.zeros((5, 3), dtype=bool)
        mask[0, 1] = True
        mask[4, 1] = True
        f = distance_transform_argmin(EdgeMap(mask))
        np.testing.assert_array_equal(f.nearest[2, 1], [0, 1])

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_matches_brute_force_random(self, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((64, 64)) < 0.02
        mask[0, 0] = True  # guarantee nonempty
        f = distance_transform_argmin(EdgeMap(mask))
        dist, nearest = _brute_force_field(mask)
        np.testing.assert_array_equal(f.distance, dist)
        np.testing.assert_array_equal(f.nearest, nearest)

    def test_matches_brute_force_dense_and_structured(self):
        rng = np.random.default_rng(9)
        dense = rng.random((48, 80)) < 0.3
        dense[5, 5] = True
        ring = np.zeros((60, 40), dtype=bool)
        yy, xx = np.mgrid[0:60, 0:40]
        ring[np.abs(np.hypot(yy - 30, xx - 20) - 14) < 0.7] = True
        for mask in (dense, ring):
            f = distance_transform_argmin(EdgeMap(mask))
            dist, nearest = _brute_force_field(mask)
            np.testing.assert_array_equal(f.distance, dist)
            np.testing.assert_array_equal(f.nearest, nearest)

    def test_edge_pixels_are_their_own_argmin(self):
        rng = np.random.default_rng(13)
        mask = rng.random((40, 40)) < 0.05
        mask[3, 7] = True
        f = distance_transform_argmin(EdgeMap(mask))
        rr, cc = np.nonzero(mask)
        assert np.all(f.distance[rr, cc] == 0.0)
        np.testing.assert_array_equal(f.nearest[rr, cc, 0], rr)
        np.testing.assert_array_equal(f.nearest[rr, cc, 1], cc)

    def test_empty_mask_raises(self):
        with pytest.raises(SymmetryError):
            distance_transform_argmin(EdgeMap(np.zeros((5, 5), dtype=bool)))


class TestPlaneDescriptors:
    def test_beta_2dt_on_edge_and_offset(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[1, 1] = True
        f = distance_transform_argmin(EdgeMap(mask))
        assert beta_2dt(np.array([1.0, 1.0]), f) == 0.0
        assert beta_2dt(np.array([3.0, 1.0]), f) == pytest.approx(2.0)

    def test_beta_2dt_bilinear_bounds(self):
        rng = np.random.default_rng(3)
        mask = rng.random((12, 12)) < 0.1
        mask[6, 6] = True
        f = distance_transform_argmin(EdgeMap(mask))
        u = np.array([4.3, 7.6])
        corners = [f.distance[7, 4], f.distance[7, 5], f.distance[8, 4],
                   f.distance[8, 5]]
        val = beta_2dt(u, f)
        assert min(corners) - 1e-12 <= val <= max(corners) + 1e-12

    def test_beta_2dt_window_offset(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[2, 2] = True
        f = distance_transform_argmin(EdgeMap(mask, origin=(100, 200)))
        assert beta_2dt(np.array([102.0, 202.0]), f) == 0.0
        assert beta_2dt(np.array([102.0, 204.0]), f) == pytest.approx(2.0)

    def test_beta_gray(self):
        gray = np.array([[0.0, 100.0], [40.0, 60.0]])
        em = EdgeMap(np.ones((2, 2), dtype=bool), gray=gray)
        assert beta_gray(np.array([0.0, 0.0]), em) == 0.0
        assert beta_gray(np.array([1.0, 0.0]), em) == 100.0
        assert beta_gray(np.array([0.5, 0.0]), em) == pytest.approx(50.0)

    def test_beta_gray_missing_channel(self):
        with pytest.raises(SymmetryError, match="baseline unavailable"):
            beta_gray(np.array([0.0, 0.0]), EdgeMap(np.ones((2, 2), dtype=bool)))


class TestSurfaceDescriptor:
    def test_zero_at_own_edge_pixel(self):
        e = Ellipsoid(np.array([0.0, 0.0, 4.0]), np.eye(3),
                      np.array([0.5, 0.4, 0.6]))
        p = compose_projection(Pose.identity(), KITCHEN_K)
        mask = np.zeros((100, 100), dtype=bool)
        mask[50, 50] = True  # image pixel (290, 240), inside the silhouette
        f = distance_transform_argmin(EdgeMap(mask, origin=(240, 190)))
        assert raycast_ellipsoid(np.array([290.0, 240.0]), p, e) is not None
        assert beta_3dt(np.array([290.0, 240.0]), f, p, e) == pytest.approx(0.0, abs=1e-9)

    def test_sphere_chord_oracle(self):
        # single edge pixel and a query pixel on a unit sphere at depth 5;
        # the descriptor must equal the chord between their two surface
        # points, independently derived from the ray quadratics.
        e = Ellipsoid(np.array([0.0, 0.0, 5.0]), np.eye(3), np.ones(3))
        p = compose_projection(Pose.identity(), KITCHEN_K)

        def _hit(u):
            d = np.array([(u[0] - 319.5) / 525.0, (u[1] - 239.5) / 525.0, 1.0])
            a = d @ d
            b = -2.0 * d[2] * 5.0
            s = (-b - math.sqrt(b * b - 4.0 * a * 24.0)) / (2.0 * a)
            return s * d

        mask = np.zeros((200, 200), dtype=bool)
        mask[140, 120] = True  # image pixel (340, 280)
        f = distance_transform_argmin(EdgeMap(mask, origin=(220, 140)))
        query = np.array([300.0, 250.0])
        chord = np.linalg.norm(_hit(np.array([340.0, 280.0])) - _hit(query))
        assert beta_3dt(query, f, p, e) == pytest.approx(chord, abs=1e-9)
        # same chord from the central angle between the two radii
        r1 = _hit(np.array([340.0, 280.0])) - e.center
        r2 = _hit(query) - e.center
        angle = math.acos(np.clip(r1 @ r2, -1, 1))
        assert chord == pytest.approx(2.0 * math.sin(angle / 2.0), abs=1e-9)

    def test_off_silhouette_returns_none(self):
        e = Ellipsoid(np.array([0.0, 0.0, 5.0]), np.eye(3), np.ones(3))
        p = compose_projection(Pose.identity(), KITCHEN_K)
        mask = np.zeros((10, 10), dtype=bool)
        mask[5, 5] = True
        f = distance_transform_argmin(EdgeMap(mask))
        assert beta_3dt(np.array([5.0, 5.0]), f, p, e) is None

    def test_mirror_invariance_camera_on_symmetry_plane(self):
        # with the camera on the object's symmetry plane the edge pattern
        # mirrors exactly pixel-to-pixel, so the surface descriptor must
        # agree across each symmetric pixel pair at numerical precision.
        # Probes whose nearest edge is tied between several pixels are
        # skipped: the lexicographic tie-break is deliberate but does not
        # commute with the mirror map.
        e, p, edges = _on_plane_scene()
        f = distance_transform_argmin(edges)
        b = project_dual_conic_bbox(e, p)
        edge_rc = np.argwhere(edges.mask)

        def _unique_nearest(u):
            pr = int(round(u[1])) - edges.origin[1]
            pc = int(round(u[0])) - edges.origin[0]
            d2 = (edge_rc[:, 0] - pr) ** 2 + (edge_rc[:, 1] - pc) ** 2
            return int((d2 == d2.min()).sum()) == 1

        xs = np.arange(int(b.x_min) + 4, int(b.x_max) - 3, 4, dtype=np.float64)
        ys = np.arange(int(b.y_min) + 4, int(b.y_max) - 3, 4, dtype=np.float64)
        checked = 0
        for u in [np.array([x, y]) for x in xs for y in ys]:
            beta = beta_3dt(u, f, p, e)
            if beta is None:
                continue
            us = symmetric_pixel(u, p, e)
            assert us is not None
            beta_s = beta_3dt(us, f, p, e)
            if beta_s is None:
                continue
            if not (_unique_nearest(u) and _unique_nearest(us)):
                continue
            assert abs(beta - beta_s) < 1e-9
            checked += 1
        assert checked > 25

    def test_plane_descriptor_breaks_under_perspective(self):
        # close oblique object seen from off the symmetry plane: a probe
        # and its mirror sit at different depths, so the pixel-space
        # distance changes across the pair while the lifted 3D distance
        # stays near the rasterization floor. This is the motivating
        # contrast for doing the distance lookup on the surface.
        e = Ellipsoid(np.array([0.1, 0.35, 1.6]), rotation_x(0.15),
                      np.array([0.32, 0.22, 0.4]))
        p = compose_projection(Pose.identity(), KITCHEN_K)
        edges, plus_uv, minus_uv = _ring_edge_scene(e, p, y0=0.5)
        f = distance_transform_argmin(edges)
        pairs = np.vstack([
            _ring_probe_pairs(e, p, edges, f, plus_uv, minus_uv, delta)
            for delta in (8.0, 12.0)
        ])
        assert len(pairs) >= 30
        b2, b2m, b3, b3m = pairs.T
        rel_2d = np.mean(np.abs(b2 - b2m)) / np.mean(0.5 * (b2 + b2m))
        rel_3d = np.mean(np.abs(b3 - b3m)) / np.mean(0.5 * (b3 + b3m))
        assert rel_2d > 0.5            # pixel distances off by half themselves
        assert rel_3d < 0.1            # surface distances agree to a few %
        assert rel_2d > 10.0 * rel_3d


class TestSamplePoints:
    def test_uniform_grid_thirds(self):
        em = EdgeMap(np.ones((50, 50), dtype=bool),
                     gray=np.zeros((50, 50)))
        b = BBox(10.0, 20.0, 40.0, 50.0)
        s = sample_points(b, em, n_uniform=9, max_corners=0)
        assert len(s) == 9 and all(t == "uniform" for t in s.tags)
        xs = sorted(set(np.round(s.pixels[:, 0], 9)))
        ys = sorted(set(np.round(s.pixels[:, 1], 9)))
        np.testing.assert_allclose(xs, [15.0, 25.0, 35.0])
        np.testing.assert_allclose(ys, [25.0, 35.0, 45.0])

    def test_constant_image_uniform_only(self):
        em = EdgeMap(np.zeros((30, 30), dtype=bool), gray=np.full((30, 30), 3.0))
        s = sample_points(BBox(2, 2, 27, 27), em, n_uniform=5)
        assert len(s) == 5
        assert all(t == "uniform" for t in s.tags)

    def test_checkerboard_corners(self):
        sq, n = 10, 6
        img = np.zeros((sq * n, sq * n))
        for i in range(n):
            for j in range(n):
                if (i + j) % 2 == 0:
                    img[i * sq:(i + 1) * sq, j * sq:(j + 1) * sq] = 100.0
        em = EdgeMap(np.zeros_like(img, dtype=bool), gray=img)
        b = BBox(3.0, 3.0, sq * n - 4.0, sq * n - 4.0)
        s = sample_points(b, em, n_uniform=0, corner_quality=0.2, max_corners=16)
        corners = s.pixels[np.array(s.tags) == "corner"]
        assert len(corners) > 0
        lattice = np.array([k * sq - 0.5 for k in range(1, n)])
        for x, y in corners:
            assert np.min(np.abs(lattice - x)) <= 1.0
            assert np.min(np.abs(lattice - y)) <= 1.0

    def test_samples_inside_bbox(self):
        rng = np.random.default_rng(7)
        em = EdgeMap(np.zeros((60, 60), dtype=bool), gray=rng.random((60, 60)))
        b = BBox(12.0, 8.0, 47.0, 51.0)
        s = sample_points(b, em, n_uniform=7)
        assert np.all(s.pixels[:, 0] >= b.x_min) and np.all(s.pixels[:, 0] <= b.x_max)
        assert np.all(s.pixels[:, 1] >= b.y_min) and np.all(s.pixels[:, 1] <= b.y_max)


class TestSymmetryCost:
    def _scene_with_samples(self):
        e, p, edges = _on_plane_scene(seed=0, n_curves=7)
        f = distance_transform_argmin(edges)
        b = project_dual_conic_bbox(e, p)
        samples = sample_points(b, edges, n_uniform=9, max_corners=16)
        return e, p, f, samples, edges

    def test_residual_norm_matches_cost(self):
        e, p, f, samples, _ = self._scene_with_samples()
        r = symmetry_residuals(e, samples, f, p)
        cost = symmetry_cost(e, samples, f, p)
        assert cost == pytest.approx(float(r @ r))

    def test_normalization_switch(self):
        e, p, f, samples, _ = self._scene_with_samples()
        r_norm = symmetry_residuals(e, samples, f, p, normalized=True)
        r_raw = symmetry_residuals(e, samples, f, p, normalized=False)
        n = len(r_norm)
        np.testing.assert_allclose(r_raw, r_norm * math.sqrt(n), atol=1e-12)

    def test_ground_truth_beats_rotated(self):
        e, p, f, samples, _ = self._scene_with_samples()
        cost_gt = symmetry_cost(e, samples, f, p)
        worse = []
        for deg in (-30.0, -15.0, 15.0, 30.0):
            rot = rotation_about_axis(np.array([0.0, 0.0, 1.0]),
                                      math.radians(deg))
            e_off = Ellipsoid(e.center, rot @ e.rotation, e.half_axes)
            worse.append(symmetry_cost(e_off, samples, f, p))
        assert cost_gt < min(worse)
        assert cost_gt < 1e-4 * max(worse)

    def test_all_samples_off_silhouette(self):
        e, p, f, _, _ = self._scene_with_samples()
        far = SampleSet(np.array([[10.0, 10.0], [20.0, 12.0]]),
                        ["uniform", "uniform"])
        with pytest.raises(SymmetryError, match="no valid samples"):
            symmetry_cost(e, far, f, p)

    def test_empty_sample_set(self):
        e, p, f, _, _ = self._scene_with_samples()
        with pytest.raises(SymmetryError):
            symmetry_residuals(e, SampleSet(np.empty((0, 2)), []), f, p)

    def test_unknown_descriptor(self):
        e, p, f, samples, _ = self._scene_with_samples()
        with pytest.raises(ValueError):
            symmetry_residuals(e, samples, f, p, descriptor="brief")

    def test_gray_descriptor_needs_channel(self):
        e, p, f, samples, edges = self._scene_with_samples()
        with pytest.raises(SymmetryError, match="baseline unavailable"):
            symmetry_residuals(e, samples, f, p, descriptor="gray", edges=edges)

    def test_corner_only_sampling_flattens_cost_curve(self):
        # corner samples sit on edge pixels, where the descriptor's own
        # side is pinned at zero; mixing in uniform samples adds probes
        # away from the edges and widens the unnormalized cost's dynamic
        # range over yaw.
        e, p, edges = _on_plane_scene(seed=11, n_curves=7)
        f = distance_transform_argmin(edges)
        b = project_dual_conic_bbox(e, p)
        corner_only = sample_points(b, edges, n_uniform=0, max_corners=16)
        mixed = sample_points(b, edges, n_uniform=9, max_corners=16)
        assert len(corner_only) > 0

        def _curve(samples):
            vals = []
            for deg in np.arange(-30.0, 31.0, 10.0):
                rot = rotation_about_axis(np.array([0.0, 0.0, 1.0]),
                                          math.radians(deg))
                e_off = Ellipsoid(e.center, rot @ e.rotation, e.half_axes)
                try:
                    vals.append(symmetry_cost(e_off, samples, f, p,
                                              normalized=False))
                except SymmetryError:
                    vals.append(0.0)
            return np.array(vals)

        c_corner = _curve(corner_only)
        c_mixed = _curve(mixed)
        assert c_corner.max() - c_corner.min() < c_mixed.max() - c_mixed.min()
