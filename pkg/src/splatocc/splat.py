"""Tile-based alpha-blend splatting of 3D Gaussians with an analytic backward pass.

Per pixel, Gaussians are composited front to back (sorted by camera-frame depth
of their mean, ties by index) with effective alpha
``a'_i = opacity_i * exp(-0.5 d^T (Sigma'_i + 0.3 I)^-1 d)``. Contributions with
``a' < 1/255`` are skipped, and compositing stops right after the transmittance
drops below ``1e-4``. Features, camera-frame depth and accumulated opacity all
use the same weights ``w_i = a'_i prod_{j<i} (1 - a'_j)`` over a zero background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ContractError, DegenerateInputError, PreconditionError
from .gaussians import FOV_CLAMP, NEAR_PLANE, GaussianSet, fov_limits, project_covariance, projection_jacobian
from .geometry import DepthMap, pixel_grid, unproject

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
COV2D_BLUR = 0.3
TILE = 16
#: Largest per-axis scale of a Gaussian unprojected from a depth map, meters.
MAX_PIXEL_GAUSSIAN_SCALE = 0.02
#: Default isotropic scale of voxel-vertex Gaussians, meters.
DEFAULT_VOXEL_SCALE = 0.1


@dataclass(eq=False)
class RenderOutput:
    feature: np.ndarray  # (H, W, C)
    depth: np.ndarray  # (H, W)
    accum: np.ndarray  # (H, W)

    def normalized_depth(self, eps=1e-8):
        """Expected depth given a hit, ``depth / accum`` (0 where nothing accumulated)."""
        return np.where(self.accum > eps, self.depth / np.maximum(self.accum, eps), 0.0)

    def normalized_feature(self, eps=1e-8):
        a = np.maximum(self.accum, eps)[..., None]
        return np.where(self.accum[..., None] > eps, self.feature / a, 0.0)


@dataclass(eq=False)
class GradientSet:
    d_opacity: np.ndarray  # (N,)
    d_feature: np.ndarray  # (N, C)
    d_mean: np.ndarray  # (N, 3)


@dataclass(eq=False)
class RenderContext:
    """Everything the backward pass needs from a forward call.

    Per-pixel contribution lists are not materialized; they are the tile lists
    below, replayed up to ``n_traversed`` entries per pixel.
    """

    index: np.ndarray  # sorted positions -> Gaussian index
    mean2d: np.ndarray
    conic: np.ndarray  # (M, 3): a, b, c of the inverse 2D covariance
    cov2d: np.ndarray  # (M, 3): xx, xy, yy before blur
    p_cam: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    feature: np.ndarray
    tile_start: np.ndarray
    tile_list: np.ndarray
    tiles_x: int
    n_traversed: np.ndarray  # (H, W)
    final_T: np.ndarray  # (H, W)
    size: tuple
    camera: object
    fingerprint: tuple

    def contributions(self, v, u):
        """Ordered ``(gaussian index, weight)`` pairs that blended into pixel ``(v, u)``."""
        tile = (v // TILE) * self.tiles_x + (u // TILE)
        s = self.tile_start[tile]
        T = 1.0
        out = []
        for k in range(s, s + self.n_traversed[v, u]):
            g = self.tile_list[k]
            dx, dy = u - self.mean2d[g, 0], v - self.mean2d[g, 1]
            a, b, c = self.conic[g]
            alpha = self.opacity[g] * np.exp(-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy)
            if alpha < ALPHA_MIN:
                continue
            out.append((int(self.index[g]), alpha * T))
            T *= 1.0 - alpha
        return out


def _fingerprint(gaussians, camera, size):
    return (
        id(gaussians),
        len(gaussians),
        float(np.sum(gaussians.opacities)),
        float(np.sum(gaussians.means)) if len(gaussians) < 5_000_000 else 0.0,
        id(camera),
        tuple(size),
    )


# ---------------------------------------------------------------------------
# Numba kernels


@njit(cache=True)
def _bin_tiles(x0, x1, y0, y1, tiles_x, n_tiles):
    n = x0.shape[0]
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in range(n):
        for ty in range(y0[g] // TILE, y1[g] // TILE + 1):
            for tx in range(x0[g] // TILE, x1[g] // TILE + 1):
                counts[ty * tiles_x + tx + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    lst = np.empty(start[-1], dtype=np.int64)
    # Gaussians arrive depth-sorted, so each tile list is depth-sorted too
    for g in range(n):
        for ty in range(y0[g] // TILE, y1[g] // TILE + 1):
            for tx in range(x0[g] // TILE, x1[g] // TILE + 1):
                t = ty * tiles_x + tx
                lst[fill[t]] = g
                fill[t] += 1
    return start, lst


@njit(cache=True)
def _raster_forward(tile_start, tile_list, tiles_x, H, W, mean2d, conic, opacity, depth, feature, box,
                    out_feat, out_depth, out_acc, out_T, out_n):
    """Front-to-back compositing, Gaussian-major within each tile.

    Each Gaussian only visits the pixels of its cutoff box; every pixel still
    sees its contributors in depth order, so the sums are the ones a
    pixel-major loop would produce. ``out_feat/out_depth/out_acc`` must be
    zero and ``out_T`` one on entry.
    """
    C = feature.shape[1]
    n_tiles = tile_start.shape[0] - 1
    done = np.zeros((TILE, TILE), dtype=np.bool_)
    for tile in range(n_tiles):
        s = tile_start[tile]
        e = tile_start[tile + 1]
        if s == e:
            continue
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        ox = tx * TILE
        oy = ty * TILE
        n_pix = (min(H, oy + TILE) - oy) * (min(W, ox + TILE) - ox)
        done[:, :] = False
        n_done = 0
        for k in range(s, e):
            g = tile_list[k]
            for py in range(max(box[2, g], oy), min(box[3, g], oy + TILE - 1) + 1):
                dy = py - mean2d[g, 1]
                for px in range(max(box[0, g], ox), min(box[1, g], ox + TILE - 1) + 1):
                    if done[py - oy, px - ox]:
                        continue
                    dx = px - mean2d[g, 0]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    alpha = opacity[g] * np.exp(power)
                    if alpha < ALPHA_MIN:
                        continue
                    T = out_T[py, px]
                    w = alpha * T
                    for c in range(C):
                        out_feat[py, px, c] += w * feature[g, c]
                    out_depth[py, px] += w * depth[g]
                    out_acc[py, px] += w
                    T *= 1.0 - alpha
                    out_T[py, px] = T
                    out_n[py, px] = k - s + 1
                    if T < T_MIN:
                        done[py - oy, px - ox] = True
                        n_done += 1
            if n_done == n_pix:
                break


@njit(cache=True)
def _raster_backward(tile_start, tile_list, tiles_x, H, W, mean2d, conic, opacity, depth, feature, box,
                     n_traversed, g_feat, g_depth, g_acc, buf):
    """Per-pair gradients into ``buf[k]`` = (d_opacity, d_mx, d_my, d_a, d_b, d_c, d_z, d_feat...)."""
    C = feature.shape[1]
    n_tiles = tile_start.shape[0] - 1
    max_len = 0
    for tile in range(n_tiles):
        max_len = max(max_len, tile_start[tile + 1] - tile_start[tile])
    ks = np.empty(max_len, dtype=np.int64)
    alphas = np.empty(max_len)
    gvals = np.empty(max_len)
    Ts = np.empty(max_len)
    for tile in range(n_tiles):
        s = tile_start[tile]
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        for py in range(ty * TILE, min(H, ty * TILE + TILE)):
            for px in range(tx * TILE, min(W, tx * TILE + TILE)):
                n = n_traversed[py, px]
                if n == 0:
                    continue
                # replay the forward pass to recover the contributor list
                m = 0
                T = 1.0
                for k in range(s, s + n):
                    g = tile_list[k]
                    if px < box[0, g] or px > box[1, g] or py < box[2, g] or py > box[3, g]:
                        continue
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    G = np.exp(power)
                    alpha = opacity[g] * G
                    if alpha < ALPHA_MIN:
                        continue
                    ks[m] = k
                    alphas[m] = alpha
                    gvals[m] = G
                    Ts[m] = T
                    T *= 1.0 - alpha
                    m += 1
                gd = g_depth[py, px]
                ga = g_acc[py, px]
                R = 0.0
                for i in range(m - 1, -1, -1):
                    k = ks[i]
                    g = tile_list[k]
                    alpha = alphas[i]
                    w = alpha * Ts[i]
                    gk = gd * depth[g] + ga
                    for c in range(C):
                        gk += g_feat[py, px, c] * feature[g, c]
                        buf[k, 7 + c] += w * g_feat[py, px, c]
                    buf[k, 6] += w * gd
                    d_alpha = Ts[i] * (gk - R)
                    R = gk * alpha + (1.0 - alpha) * R
                    buf[k, 0] += d_alpha * gvals[i]
                    dpow = d_alpha * alpha
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    buf[k, 1] += dpow * (conic[g, 0] * dx + conic[g, 1] * dy)
                    buf[k, 2] += dpow * (conic[g, 1] * dx + conic[g, 2] * dy)
                    buf[k, 3] += dpow * (-0.5 * dx * dx)
                    buf[k, 4] += dpow * (-dx * dy)
                    buf[k, 5] += dpow * (-0.5 * dy * dy)


@njit(cache=True)
def _reduce_pairs(tile_list, buf, n_gauss):
    out = np.zeros((n_gauss, buf.shape[1]))
    # fixed order: tile by tile, then list position
    for k in range(tile_list.shape[0]):
        g = tile_list[k]
        for j in range(buf.shape[1]):
            out[g, j] += buf[k, j]
    return out


# ---------------------------------------------------------------------------
# Forward / backward


@njit(cache=True)
def _isotropic_footprints(means, opacity, R, center, fx, fy, cx, cy, s2, height, width, blur, lx, ly):
    """Cull and project Gaussians sharing one isotropic covariance ``s2 * I``.

    Returns the surviving indices (ascending) with their camera-frame means,
    pixel means, 2D covariances (before blur), conics and clipped pixel boxes.
    """
    n = means.shape[0]
    idx = np.empty(n, dtype=np.int64)
    m = 0
    for g in range(n):
        if opacity[g] < ALPHA_MIN:
            continue
        dx = means[g, 0] - center[0]
        dy = means[g, 1] - center[1]
        dz = means[g, 2] - center[2]
        z = dx * R[0, 2] + dy * R[1, 2] + dz * R[2, 2]
        if z <= NEAR_PLANE:
            continue
        x = dx * R[0, 0] + dy * R[1, 0] + dz * R[2, 0]
        y = dx * R[0, 1] + dy * R[1, 1] + dz * R[2, 1]
        u = fx * x / z + cx
        v = fy * y / z + cy
        # s2 J J^T, J the (clamped) projection Jacobian
        xz = min(max(x / z, -lx), lx)
        yz = min(max(y / z, -ly), ly)
        iz2 = 1.0 / (z * z)
        sxx = s2 * fx * fx * iz2 * (1.0 + xz * xz)
        syy = s2 * fy * fy * iz2 * (1.0 + yz * yz)
        r2 = 2.0 * np.log(max(opacity[g] * 255.0, 1.0))
        ex = np.sqrt(r2 * (sxx + blur)) + 1e-6
        ey = np.sqrt(r2 * (syy + blur)) + 1e-6
        if np.floor(u + ex) < 0 or np.ceil(u - ex) > width - 1:
            continue
        if np.floor(v + ey) < 0 or np.ceil(v - ey) > height - 1:
            continue
        idx[m] = g
        m += 1
    idx = idx[:m]
    p_cam = np.empty((m, 3))
    mean2d = np.empty((m, 2))
    cov2d = np.empty((m, 3))
    conic = np.empty((m, 3))
    box = np.empty((4, m), dtype=np.int64)
    for k in range(m):
        g = idx[k]
        dx = means[g, 0] - center[0]
        dy = means[g, 1] - center[1]
        dz = means[g, 2] - center[2]
        x = dx * R[0, 0] + dy * R[1, 0] + dz * R[2, 0]
        y = dx * R[0, 1] + dy * R[1, 1] + dz * R[2, 1]
        z = dx * R[0, 2] + dy * R[1, 2] + dz * R[2, 2]
        p_cam[k, 0] = x
        p_cam[k, 1] = y
        p_cam[k, 2] = z
        u = fx * x / z + cx
        v = fy * y / z + cy
        mean2d[k, 0] = u
        mean2d[k, 1] = v
        xz = min(max(x / z, -lx), lx)
        yz = min(max(y / z, -ly), ly)
        iz2 = 1.0 / (z * z)
        sxx = s2 * fx * fx * iz2 * (1.0 + xz * xz)
        sxy = s2 * fx * fy * xz * yz * iz2
        syy = s2 * fy * fy * iz2 * (1.0 + yz * yz)
        cov2d[k, 0] = sxx
        cov2d[k, 1] = sxy
        cov2d[k, 2] = syy
        a = sxx + blur
        c = syy + blur
        det = a * c - sxy * sxy
        conic[k, 0] = c / det
        conic[k, 1] = -sxy / det
        conic[k, 2] = a / det
        r2 = 2.0 * np.log(max(opacity[g] * 255.0, 1.0))
        ex = np.sqrt(r2 * a) + 1e-6
        ey = np.sqrt(r2 * c) + 1e-6
        box[0, k] = max(0, int(np.ceil(u - ex)))
        box[1, k] = min(width - 1, int(np.floor(u + ex)))
        box[2, k] = max(0, int(np.ceil(v - ey)))
        box[3, k] = min(height - 1, int(np.floor(v + ey)))
    return idx, p_cam, mean2d, cov2d, conic, box


def _uniform_isotropic_scale(gaussians):
    """The shared scale when every Gaussian is the same identity-rotation sphere, else None."""
    sc, rot = gaussians.scales, gaussians.rotations
    if len(gaussians) == 0 or sc.strides[0] != 0 or rot.strides[0] != 0:
        return None
    s = sc[0]
    q = rot[0] / np.linalg.norm(rot[0])
    if s[0] == s[1] == s[2] and abs(abs(q[0]) - 1.0) < 1e-15:
        return float(s[0])
    return None


def _preprocess(gaussians, camera, height, width):
    s = _uniform_isotropic_scale(gaussians)
    if s is not None:
        return _preprocess_isotropic(gaussians, camera, height, width, s)
    op_all = gaussians.opacities
    # a' <= opacity, so these can never pass the alpha cutoff
    idx = np.flatnonzero(op_all >= ALPHA_MIN)
    R = camera.pose.rotation
    p_cam = (gaussians.means[idx] - camera.center) @ R
    z = p_cam[:, 2]
    front = z > NEAR_PLANE
    idx, p_cam, z = idx[front], p_cam[front], z[front]
    op = op_all[idx]
    k = camera.intrinsics
    x, y = p_cam[:, 0], p_cam[:, 1]
    mean2d = np.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], axis=1)
    cov_cam = _camera_covariances(gaussians, idx, R)
    J = projection_jacobian(k, p_cam, FOV_CLAMP)
    cov2 = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    sxx = cov2[:, 0, 0]
    sxy = 0.5 * (cov2[:, 0, 1] + cov2[:, 1, 0])
    syy = cov2[:, 1, 1]
    A = sxx + COV2D_BLUR
    Cc = syy + COV2D_BLUR
    det = A * Cc - sxy * sxy
    conic = np.stack([Cc / det, -sxy / det, A / det], axis=1)
    # exact extent of {d : a'(d) >= 1/255}, padded against round-off
    r2 = 2.0 * np.log(np.maximum(op * 255.0, 1.0))
    ex = np.sqrt(r2 * A) + 1e-6
    ey = np.sqrt(r2 * Cc) + 1e-6
    x0 = np.ceil(mean2d[:, 0] - ex)
    x1 = np.floor(mean2d[:, 0] + ex)
    y0 = np.ceil(mean2d[:, 1] - ey)
    y1 = np.floor(mean2d[:, 1] + ey)
    on = (x1 >= 0) & (x0 <= width - 1) & (y1 >= 0) & (y0 <= height - 1) & np.isfinite(det)
    on &= np.isfinite(mean2d).all(axis=1)
    sel = np.flatnonzero(on)
    order = sel[np.argsort(z[sel], kind="stable")]
    box = np.stack([
        np.clip(x0[order], 0, width - 1), np.clip(x1[order], 0, width - 1),
        np.clip(y0[order], 0, height - 1), np.clip(y1[order], 0, height - 1),
    ]).astype(np.int64)
    return dict(
        index=idx[order],
        mean2d=np.ascontiguousarray(mean2d[order]),
        conic=np.ascontiguousarray(conic[order]),
        cov2d=np.stack([sxx, sxy, syy], axis=1)[order],
        p_cam=p_cam[order],
        depth=np.ascontiguousarray(z[order]),
        opacity=np.ascontiguousarray(op[order]),
        box=box,
        cov_cam=cov_cam[order],
    )


def _preprocess_isotropic(gaussians, camera, height, width, s):
    k = camera.intrinsics
    R = np.ascontiguousarray(camera.pose.rotation)
    idx, p_cam, mean2d, cov2d, conic, box = _isotropic_footprints(
        gaussians.means, gaussians.opacities, R, np.asarray(camera.center, dtype=np.float64),
        k.fx, k.fy, k.cx, k.cy, s * s, height, width, COV2D_BLUR, *fov_limits(k, FOV_CLAMP),
    )
    order = np.argsort(p_cam[:, 2], kind="stable")
    return dict(
        index=idx[order],
        mean2d=np.ascontiguousarray(mean2d[order]),
        conic=np.ascontiguousarray(conic[order]),
        cov2d=cov2d[order],
        p_cam=p_cam[order],
        depth=np.ascontiguousarray(p_cam[order, 2]),
        opacity=np.ascontiguousarray(gaussians.opacities[idx[order]]),
        box=np.ascontiguousarray(box[:, order]),
        cov_cam=np.broadcast_to(s * s * np.eye(3), (len(idx), 3, 3)),
    )


def _camera_covariances(gaussians, idx, R):
    scales = gaussians.scales
    rots = gaussians.rotations
    uniform = (
        scales.strides[0] == 0 and rots.strides[0] == 0 and len(scales) > 0
    )
    if uniform:
        # shared scale/rotation: one covariance for everyone
        from .gaussians import build_covariance

        cov = build_covariance(scales[0], rots[0])
        return np.broadcast_to(R.T @ cov @ R, (len(idx), 3, 3))
    from .gaussians import build_covariance

    cov = build_covariance(scales[idx], rots[idx])
    return np.einsum("ji,njk,kl->nil", R, cov, R)


def splat_forward(gaussians, camera, size=None):
    """Render ``gaussians`` into ``camera``; returns ``(RenderOutput, RenderContext)``."""
    height, width = camera.shape if size is None else tuple(size)
    C = gaussians.feature_dim
    pre = _preprocess(gaussians, camera, height, width)
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    b = pre["box"]
    tile_start, tile_list = _bin_tiles(b[0], b[1], b[2], b[3], tiles_x, tiles_x * tiles_y)
    feature = np.ascontiguousarray(gaussians.features[pre["index"]])
    out_feat = np.zeros((height, width, C))
    out_depth = np.zeros((height, width))
    out_acc = np.zeros((height, width))
    out_T = np.ones((height, width))
    out_n = np.zeros((height, width), dtype=np.int64)
    _raster_forward(tile_start, tile_list, tiles_x, height, width, pre["mean2d"], pre["conic"],
                    pre["opacity"], pre["depth"], feature, pre["box"], out_feat, out_depth, out_acc, out_T, out_n)
    ctx = RenderContext(
        index=pre["index"], mean2d=pre["mean2d"], conic=pre["conic"], cov2d=pre["cov2d"],
        p_cam=pre["p_cam"], depth=pre["depth"], opacity=pre["opacity"], feature=feature,
        tile_start=tile_start, tile_list=tile_list, tiles_x=tiles_x, n_traversed=out_n,
        final_T=out_T, size=(height, width), camera=camera,
        fingerprint=_fingerprint(gaussians, camera, (height, width)),
    )
    ctx.cov_cam = pre["cov_cam"]
    ctx.box = pre["box"]
    return RenderOutput(out_feat, out_depth, out_acc), ctx


def splat_backward(ctx, gaussians, camera, grad_feature=None, grad_depth=None, grad_accum=None,
                   compute_mean_grad=True):
    """Gradients of a scalar loss w.r.t. per-Gaussian opacity, feature and mean.

    ``grad_*`` are the loss gradients w.r.t. the three :class:`RenderOutput`
    images (``None`` means zero). Scale and rotation are held fixed.
    """
    if ctx.fingerprint != _fingerprint(gaussians, camera, ctx.size):
        raise ContractError("render context does not belong to these Gaussians / camera")
    H, W = ctx.size
    N, C = len(gaussians), gaussians.feature_dim
    gF = np.zeros((H, W, C)) if grad_feature is None else np.ascontiguousarray(grad_feature, dtype=np.float64).reshape(H, W, C)
    gD = np.zeros((H, W)) if grad_depth is None else np.ascontiguousarray(grad_depth, dtype=np.float64)
    gA = np.zeros((H, W)) if grad_accum is None else np.ascontiguousarray(grad_accum, dtype=np.float64)
    M = len(ctx.index)
    buf = np.zeros((len(ctx.tile_list), 7 + C))
    _raster_backward(ctx.tile_start, ctx.tile_list, ctx.tiles_x, H, W, ctx.mean2d, ctx.conic,
                     ctx.opacity, ctx.depth, ctx.feature, ctx.box, ctx.n_traversed, gF, gD, gA, buf)
    per = _reduce_pairs(ctx.tile_list, buf, M)
    out = GradientSet(np.zeros(N), np.zeros((N, C)), np.zeros((N, 3)))
    out.d_opacity[ctx.index] = per[:, 0]
    out.d_feature[ctx.index] = per[:, 7:]
    if compute_mean_grad and M:
        out.d_mean[ctx.index] = _mean_chain(ctx, camera, per)
    return out


def _mean_chain(ctx, camera, per):
    k = camera.intrinsics
    fx, fy = k.fx, k.fy
    x, y, z = ctx.p_cam[:, 0], ctx.p_cam[:, 1], ctx.p_cam[:, 2]
    a, b, c = ctx.conic[:, 0], ctx.conic[:, 1], ctx.conic[:, 2]
    # dL/d(conic) as a symmetric matrix, then through the inverse
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    dQ = np.stack([np.stack([per[:, 3], 0.5 * per[:, 4]], -1), np.stack([0.5 * per[:, 4], per[:, 5]], -1)], -2)
    dS = -Q @ dQ @ Q
    J = projection_jacobian(k, ctx.p_cam, FOV_CLAMP)
    dJ = 2.0 * dS @ J @ ctx.cov_cam
    # J02 = -fx * clip(x/z) / z: through x only while unclamped
    lx, ly = fov_limits(k, FOV_CLAMP)
    xz, yz = x / z, y / z
    free_x, free_y = np.abs(xz) <= lx, np.abs(yz) <= ly
    xc, yc = np.clip(xz, -lx, lx), np.clip(yz, -ly, ly)
    dt = np.zeros((len(z), 3))
    dt[:, 0] = np.where(free_x, dJ[:, 0, 2] * (-fx / z**2), 0.0)
    dt[:, 1] = np.where(free_y, dJ[:, 1, 2] * (-fy / z**2), 0.0)
    dt[:, 2] = (
        dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 0, 2] * np.where(free_x, 2.0, 1.0) * fx * xc / z**2
        + dJ[:, 1, 1] * (-fy / z**2) + dJ[:, 1, 2] * np.where(free_y, 2.0, 1.0) * fy * yc / z**2
    )
    du, dv = per[:, 1], per[:, 2]
    dt[:, 0] += du * fx / z
    dt[:, 1] += dv * fy / z
    dt[:, 2] += -du * fx * x / z**2 - dv * fy * y / z**2 + per[:, 6]
    return dt @ camera.pose.rotation.T


# ---------------------------------------------------------------------------
# Reference renderer


def reference_render(gaussians, camera, size=None):
    """Every Gaussian against every pixel with a full per-pixel sort; slow, for testing."""
    height, width = camera.shape if size is None else tuple(size)
    C = gaussians.feature_dim
    pix = pixel_grid(height, width).reshape(-1, 2)
    entries = []
    for i in range(len(gaussians)):
        g = gaussians[i]
        mean2d, cov2d, z, visible = project_covariance(g, camera, clamp=FOV_CLAMP)
        if visible:
            entries.append((z, i, mean2d, np.linalg.inv(cov2d + COV2D_BLUR * np.eye(2))))
    entries.sort(key=lambda e: (e[0], e[1]))
    P = len(pix)
    T = np.ones(P)
    alive = np.ones(P, dtype=bool)
    feat = np.zeros((P, C))
    depth = np.zeros(P)
    acc = np.zeros(P)
    for z, i, mean2d, inv in entries:
        d = pix - mean2d
        power = -0.5 * np.einsum("pi,ij,pj->p", d, inv, d)
        alpha = gaussians.opacities[i] * np.exp(power)
        use = alive & (alpha >= ALPHA_MIN)
        w = np.where(use, alpha * T, 0.0)
        feat += w[:, None] * gaussians.features[i]
        depth += w * z
        acc += w
        T = np.where(use, T * (1.0 - alpha), T)
        alive &= ~(use & (T < T_MIN))
    return RenderOutput(feat.reshape(height, width, C), depth.reshape(height, width), acc.reshape(height, width))


# ---------------------------------------------------------------------------
# Gaussian sources


def depth_map_to_gaussians(camera, depth_map, scale_map, source_image, rotation_map=None, select=None,
                           max_scale=MAX_PIXEL_GAUSSIAN_SCALE):
    """One opaque Gaussian per valid (and selected) pixel, placed at its unprojection.

    Gaussians are emitted in row-major pixel order of ``valid & select``. Scales
    are clamped to ``max_scale``; rotations are identity (``rotation_map`` is
    accepted for interface parity and ignored).
    """
    if not isinstance(depth_map, DepthMap):
        depth_map = DepthMap(depth_map)
    h, w = depth_map.shape
    image = np.asarray(source_image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[:2] != (h, w) or camera.shape != (h, w):
        from .errors import ConfigurationError

        raise ConfigurationError("depth map, image and camera sizes must agree")
    keep = depth_map.valid if select is None else depth_map.valid & np.asarray(select, bool)
    flat = np.flatnonzero(keep)
    if flat.size == 0:
        raise DegenerateInputError("no valid pixels to unproject")
    scale = np.asarray(scale_map, dtype=np.float64)
    if scale.ndim == 0:
        scale = np.full(3, float(scale))
    if scale.shape == (h, w, 3):
        scale = scale.reshape(-1, 3)[flat]
    elif scale.shape == (h, w):
        scale = np.repeat(scale.reshape(-1)[flat, None], 3, axis=1)
    if np.any(~(scale > 0)):
        raise PreconditionError("scales must be strictly positive")
    scale = np.minimum(scale, max_scale)
    pix = pixel_grid(h, w).reshape(-1, 2)[flat]
    means = unproject(camera, pix, depth_map.values.reshape(-1)[flat])
    n = len(flat)
    return GaussianSet(
        means,
        scale if scale.ndim == 2 else np.broadcast_to(scale, (n, 3)),
        np.broadcast_to(np.array([1.0, 0.0, 0.0, 0.0]), (n, 4)),
        np.ones(n),
        image.reshape(-1, image.shape[2])[flat],
    )


_VERTEX_CACHE = {}


def _vertex_means(grid):
    key = (grid.bounds[0].tobytes(), grid.bounds[1].tobytes(), grid.dims)
    pts = _VERTEX_CACHE.get(key)
    if pts is None:
        if len(_VERTEX_CACHE) > 4:
            _VERTEX_CACHE.clear()
        pts = grid.vertex_positions().reshape(-1, 3)
        pts.setflags(write=False)
        _VERTEX_CACHE[key] = pts
    return pts


def voxel_to_gaussians(grid, s=DEFAULT_VOXEL_SCALE):
    """One isotropic Gaussian of scale ``s`` per grid vertex.

    Opacity is ``sigmoid(opacity logit)`` and the feature is
    ``softmax(semantic logits)``; order follows C-order over ``[ix, iy, iz]``.
    """
    if not s > 0:
        raise PreconditionError("Gaussian scale must be positive")
    n = grid.num_vertices
    logits = grid.opacity_logits.reshape(-1).astype(np.float64)
    sem = grid.semantic_logits.reshape(n, -1).astype(np.float64)
    sem = np.exp(sem - sem.max(axis=1, keepdims=True))
    sem /= sem.sum(axis=1, keepdims=True)
    return GaussianSet(
        _vertex_means(grid),
        np.broadcast_to(np.full(3, float(s)), (n, 3)),
        np.broadcast_to(np.array([1.0, 0.0, 0.0, 0.0]), (n, 4)),
        0.5 * (1.0 + np.tanh(0.5 * logits)),
        sem,
    )


__all__ = [
    "ALPHA_MIN",
    "T_MIN",
    "COV2D_BLUR",
    "TILE",
    "MAX_PIXEL_GAUSSIAN_SCALE",
    "DEFAULT_VOXEL_SCALE",
    "RenderOutput",
    "GradientSet",
    "RenderContext",
    "splat_forward",
    "splat_backward",
    "reference_render",
    "depth_map_to_gaussians",
    "voxel_to_gaussians",
]
