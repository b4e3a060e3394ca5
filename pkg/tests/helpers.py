"""Finite-difference helpers shared by the gradient tests."""

import numpy as np


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at ``x`` by central differences (x is not modified)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        fp = f(x)
        flat[k] = old - eps
        fm = f(x)
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    worst = np.argmax(err - bound)
    assert np.all(err <= bound), (
        f"max violation at {np.unravel_index(worst, err.shape)}: "
        f"analytic {analytic.reshape(-1)[worst]:.6g}, numeric {numeric.reshape(-1)[worst]:.6g}"
    )


def random_gaussians(rng, camera, n, channels=3, isotropic=False, depth=(1.5, 6.0), spread=1.0,
                     scale=(0.05, 0.4), opacity=(0.05, 0.95)):
    """``n`` Gaussians in front of ``camera``, mostly on screen."""
    from splatocc.gaussians import GaussianSet

    z = rng.uniform(*depth, n)
    k = camera.intrinsics
    # pixel positions up to ``spread`` image widths around the center
    u = k.cx + spread * rng.uniform(-0.5, 0.5, n) * k.width
    v = k.cy + spread * rng.uniform(-0.5, 0.5, n) * k.height
    p_cam = np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z], axis=1)
    means = camera.pose.apply(p_cam)
    if isotropic:
        s = rng.uniform(*scale)
        scales, rots = [s, s, s], [1.0, 0.0, 0.0, 0.0]
    else:
        scales = rng.uniform(*scale, (n, 3))
        rots = rng.normal(size=(n, 4))
        rots /= np.linalg.norm(rots, axis=1, keepdims=True)
    return GaussianSet(means, scales, rots, rng.uniform(*opacity, n), rng.random((n, channels)))


def render_objective(out, gF, gD, gA):
    """Scalar ``<gF, F> + <gD, D> + <gA, A>`` whose gradient images are ``gF, gD, gA``."""
    return float(np.sum(gF * out.feature) + np.sum(gD * out.depth) + np.sum(gA * out.accum))


def brute_force_overlap(cam_i, cam_j, n_samples=4096, near=0.5, far=20.0):
    """Pixels of ``cam_i`` whose ray hits the image of ``cam_j`` at any of ``n_samples`` depths.

    Written with explicit matrices, independent of the library's projection helpers.
    """
    H, W = cam_i.shape
    Ki, Kj = cam_i.intrinsics.K, cam_j.intrinsics.K
    v, u = np.mgrid[0:H, 0:W]
    rays = np.linalg.inv(Ki) @ np.stack([u.ravel(), v.ravel(), np.ones(H * W)])  # (3, P), unit z
    Rj_t = cam_j.pose.rotation.T
    hit = np.zeros(H * W, bool)
    for d in np.linspace(near, far, n_samples):
        world = cam_i.pose.rotation @ (rays * d) + cam_i.pose.translation[:, None]
        pc = Rj_t @ (world - cam_j.pose.translation[:, None])
        front = pc[2] > 0
        uv = (Kj @ pc)[:2] / np.where(front, pc[2], 1.0)
        inside = front & (uv[0] >= 0) & (uv[0] < cam_j.shape[1]) & (uv[1] >= 0) & (uv[1] < cam_j.shape[0])
        hit |= inside
    return hit.reshape(H, W)


#: One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, text):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {text}"
