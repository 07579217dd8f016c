import numpy as np

from quadricmap.geometry import (
    CameraIntrinsics, Ellipsoid, Pose, camera_center, compose_projection,
    raycast_ellipsoid_batch, symmetric_pixel_batch,
)
from quadricmap.synth import render_symmetric_edges, render_window

K = CameraIntrinsics(525.0, 525.0, 319.5, 239.5)
E = Ellipsoid(np.array([0.0, 0.0, 0.3]), np.eye(3),
              np.array([0.3, 0.2, 0.3]))


def aim(eye, target):
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    x = x / np.linalg.norm(x)
    return Pose(np.column_stack([x, np.cross(z, x), z]), eye)


def edge_pixels(edges):
    rows, cols = np.nonzero(edges.mask)
    x0, y0 = edges.origin
    return np.column_stack([cols + x0, rows + y0]).astype(np.float64)


def closure(pose, pattern_seed):
    p = compose_projection(pose, K)
    edges = render_symmetric_edges(E, p, render_window(E, p), pattern_seed)
    px = edge_pixels(edges)
    hit, v = raycast_ellipsoid_batch(px, p, E)
    assert hit.all(), f"misses: {np.count_nonzero(~hit)}"
    valid, v, vs, us = symmetric_pixel_batch(px, p, E)
    assert valid.all()
    d = np.min(np.linalg.norm(us[:, None, :] - px[None, :, :], axis=2), axis=1)
    # interior margin: cap coordinate along w_hat vs the rim value 1/|w|
    cam = camera_center(p)
    w = (E.rotation.T @ (cam - E.center)) / E.half_axes
    wn = np.linalg.norm(w)
    u_local = ((v - E.center) @ E.rotation) / E.half_axes
    cap = u_local @ (w / wn)
    rim = 1.0 / wn
    inner = cap >= 3.0 * rim
    return len(px), int(inner.sum()), float(d.max()), \
        float(d[inner].max()) if inner.any() else None


# symmetry-plane viewpoint: exact closure expected
pose0 = Pose(np.array([[0.0, 0.0, 1.0],
                       [-1.0, 0.0, 0.0],
                       [0.0, -1.0, 0.0]]), np.array([-2.5, 0.0, 0.3]))
n, ni, worst, worst_in = closure(pose0, 42)
print(f"on-plane: n={n} worst={worst:.3e}")

rng = np.random.default_rng(0)
for i in range(6):
    eye = np.array([-2.5, rng.uniform(-1.0, 1.0), rng.uniform(0.3, 1.2)])
    n, ni, worst, worst_in = closure(aim(eye, E.center), 100 + i)
    print(f"trial {i}: eye={np.round(eye, 3)} n={n} n_inner={ni} "
          f"worst={worst:.3f} worst_inner={worst_in}")
