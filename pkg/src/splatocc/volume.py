"""Dense-sampling volume rendering over a voxel grid, with an analytic backward pass.

Vertex opacities ``sigmoid(logit)`` are trilinearly interpolated and scaled by
``density_scale`` into an extinction coefficient (per meter). Samples sit at the
midpoints of equal camera-depth bins between ``near`` and ``far``; ``delta`` is
the bin's length along the ray. Compositing follows the splatting contract:
skip ``alpha < 1/255``, stop once transmittance drops below ``1e-4``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ContractError, PreconditionError
from .splat import ALPHA_MIN, T_MIN, RenderOutput

#: Extinction per meter of a fully opaque vertex.
DEFAULT_DENSITY_SCALE = 10.0


@dataclass(frozen=True)
class RaySamplingConfig:
    samples_per_ray: int = 128
    near: float = 0.5
    far: float = 20.0
    stratified: bool = False
    density_scale: float = DEFAULT_DENSITY_SCALE
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise PreconditionError("need 0 < near < far")
        if self.samples_per_ray < 2:
            raise PreconditionError("samples_per_ray must be >= 2")
        if not self.density_scale > 0:
            raise PreconditionError("density_scale must be positive")

    @property
    def spacing(self):
        return (self.far - self.near) / self.samples_per_ray

    def sample_offsets(self, height, width):
        """Per-pixel offset within each depth bin, in units of bins (0.5 = midpoint)."""
        if not self.stratified:
            return np.full((height, width, self.samples_per_ray), 0.5)
        rng = np.random.default_rng(self.seed)
        return rng.random((height, width, self.samples_per_ray))


def _activated(grid):
    opa = grid.opacity().astype(np.float64)
    sem = grid.semantic_logits.astype(np.float64)
    sem = np.exp(sem - sem.max(axis=-1, keepdims=True))
    sem /= sem.sum(axis=-1, keepdims=True)
    return np.ascontiguousarray(opa), np.ascontiguousarray(sem)


@njit(cache=True)
def _cell(p, lo, inv_spacing, dims):
    """Base vertex and fractional offsets of ``p``; ok=False outside the grid."""
    idx = np.empty(3, dtype=np.int64)
    frac = np.empty(3)
    for a in range(3):
        g = (p[a] - lo[a]) * inv_spacing[a]
        if g < 0.0 or g > dims[a] - 1:
            return idx, frac, False
        i = int(np.floor(g))
        if i > dims[a] - 2:
            i = dims[a] - 2
        idx[a] = i
        frac[a] = g - i
    return idx, frac, True


@njit(cache=True)
def _trilinear_points(points, lo, inv_spacing, dims, opa, sem):
    n = points.shape[0]
    C = sem.shape[3]
    dens = np.zeros(n)
    feat = np.zeros((n, C))
    for k in range(n):
        idx, frac, ok = _cell(points[k], lo, inv_spacing, dims)
        if not ok:
            continue
        for corner in range(8):
            bx = corner & 1
            by = (corner >> 1) & 1
            bz = (corner >> 2) & 1
            w = ((frac[0] if bx else 1.0 - frac[0]) * (frac[1] if by else 1.0 - frac[1])
                 * (frac[2] if bz else 1.0 - frac[2]))
            ix, iy, iz = idx[0] + bx, idx[1] + by, idx[2] + bz
            dens[k] += w * opa[ix, iy, iz]
            for c in range(C):
                feat[k, c] += w * sem[ix, iy, iz, c]
    return dens, feat


def sample_grid_trilinear(grid, points):
    """Interpolated ``(opacity density, feature)`` at world points ``(..., 3)``.

    Points outside the grid bounds give zero density and a zero feature.
    """
    pts = np.asarray(points, dtype=np.float64)
    shape = pts.shape[:-1]
    opa, sem = _activated(grid)
    lo, inv, dims = _grid_frame(grid)
    dens, feat = _trilinear_points(np.ascontiguousarray(pts.reshape(-1, 3)), lo, inv, dims, opa, sem)
    return dens.reshape(shape), feat.reshape(shape + (sem.shape[-1],))


def _grid_frame(grid):
    lo = np.asarray(grid.bounds[0], dtype=np.float64)
    dims = np.asarray(grid.dims, dtype=np.int64)
    inv = (dims - 1) / (np.asarray(grid.bounds[1], dtype=np.float64) - lo)
    return lo, inv, dims


@njit(cache=True)
def _march(origin, dirs, ray_len, offsets, near, step, kscale, lo, inv_spacing, dims, opa, sem,
           out_feat, out_depth, out_acc, out_n):
    H, W = dirs.shape[0], dirs.shape[1]
    S = offsets.shape[2]
    C = sem.shape[3]
    p = np.empty(3)
    for v in range(H):
        for u in range(W):
            delta = step * ray_len[v, u]
            T = 1.0
            n = 0
            for s in range(S):
                z = near + (s + offsets[v, u, s]) * step
                for a in range(3):
                    p[a] = origin[a] + z * dirs[v, u, a]
                idx, frac, ok = _cell(p, lo, inv_spacing, dims)
                if not ok:
                    continue
                dens = 0.0
                for corner in range(8):
                    bx = corner & 1
                    by = (corner >> 1) & 1
                    bz = (corner >> 2) & 1
                    w = ((frac[0] if bx else 1.0 - frac[0]) * (frac[1] if by else 1.0 - frac[1])
                         * (frac[2] if bz else 1.0 - frac[2]))
                    dens += w * opa[idx[0] + bx, idx[1] + by, idx[2] + bz]
                alpha = 1.0 - np.exp(-kscale * dens * delta)
                if alpha < ALPHA_MIN:
                    continue
                wgt = alpha * T
                for corner in range(8):
                    bx = corner & 1
                    by = (corner >> 1) & 1
                    bz = (corner >> 2) & 1
                    w = ((frac[0] if bx else 1.0 - frac[0]) * (frac[1] if by else 1.0 - frac[1])
                         * (frac[2] if bz else 1.0 - frac[2]))
                    for c in range(C):
                        out_feat[v, u, c] += wgt * w * sem[idx[0] + bx, idx[1] + by, idx[2] + bz, c]
                out_depth[v, u] += wgt * z
                out_acc[v, u] += wgt
                T *= 1.0 - alpha
                n = s + 1
                if T < T_MIN:
                    break
            out_n[v, u] = n


@njit(cache=True)
def _march_backward(origin, dirs, ray_len, offsets, near, step, kscale, lo, inv_spacing, dims, opa, sem,
                    n_traversed, g_feat, g_depth, g_acc, d_opa, d_sem):
    H, W = dirs.shape[0], dirs.shape[1]
    C = sem.shape[3]
    S = offsets.shape[2]
    p = np.empty(3)
    zs = np.empty(S)
    alphas = np.empty(S)
    Ts = np.empty(S)
    cells = np.empty((S, 3), dtype=np.int64)
    fracs = np.empty((S, 3))
    feats = np.empty((S, C))
    for v in range(H):
        for u in range(W):
            n = n_traversed[v, u]
            if n == 0:
                continue
            delta = step * ray_len[v, u]
            m = 0
            T = 1.0
            for s in range(n):
                z = near + (s + offsets[v, u, s]) * step
                for a in range(3):
                    p[a] = origin[a] + z * dirs[v, u, a]
                idx, frac, ok = _cell(p, lo, inv_spacing, dims)
                if not ok:
                    continue
                dens = 0.0
                for c in range(C):
                    feats[m, c] = 0.0
                for corner in range(8):
                    bx = corner & 1
                    by = (corner >> 1) & 1
                    bz = (corner >> 2) & 1
                    w = ((frac[0] if bx else 1.0 - frac[0]) * (frac[1] if by else 1.0 - frac[1])
                         * (frac[2] if bz else 1.0 - frac[2]))
                    dens += w * opa[idx[0] + bx, idx[1] + by, idx[2] + bz]
                    for c in range(C):
                        feats[m, c] += w * sem[idx[0] + bx, idx[1] + by, idx[2] + bz, c]
                alpha = 1.0 - np.exp(-kscale * dens * delta)
                if alpha < ALPHA_MIN:
                    continue
                zs[m] = z
                alphas[m] = alpha
                Ts[m] = T
                for a in range(3):
                    cells[m, a] = idx[a]
                    fracs[m, a] = frac[a]
                T *= 1.0 - alpha
                m += 1
            gd = g_depth[v, u]
            ga = g_acc[v, u]
            R = 0.0
            for i in range(m - 1, -1, -1):
                alpha = alphas[i]
                wgt = alpha * Ts[i]
                gk = gd * zs[i] + ga
                for c in range(C):
                    gk += g_feat[v, u, c] * feats[i, c]
                d_alpha = Ts[i] * (gk - R)
                R = gk * alpha + (1.0 - alpha) * R
                # alpha = 1 - exp(-k rho delta)  =>  d alpha / d rho = (1 - alpha) k delta
                d_rho = d_alpha * (1.0 - alpha) * kscale * delta
                for corner in range(8):
                    bx = corner & 1
                    by = (corner >> 1) & 1
                    bz = (corner >> 2) & 1
                    w = ((fracs[i, 0] if bx else 1.0 - fracs[i, 0]) * (fracs[i, 1] if by else 1.0 - fracs[i, 1])
                         * (fracs[i, 2] if bz else 1.0 - fracs[i, 2]))
                    ix, iy, iz = cells[i, 0] + bx, cells[i, 1] + by, cells[i, 2] + bz
                    d_opa[ix, iy, iz] += w * d_rho
                    for c in range(C):
                        d_sem[ix, iy, iz, c] += w * wgt * g_feat[v, u, c]


@dataclass(eq=False)
class VolumeContext:
    cfg: RaySamplingConfig
    offsets: np.ndarray
    n_traversed: np.ndarray
    size: tuple
    camera: object
    fingerprint: tuple


def _rays(camera, height, width):
    k = camera.intrinsics
    if (height, width) != camera.shape:
        k = k.scaled(width / k.width)
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    dirs = d_cam @ camera.pose.rotation.T
    return np.ascontiguousarray(dirs), np.linalg.norm(d_cam, axis=-1)


def activate(grid):
    """Per-vertex ``(sigmoid(opacity logits), softmax(semantic logits))`` in float64."""
    return _activated(grid)


def volume_forward(grid, camera, size=None, cfg=None, activated=None):
    """Render ``grid`` into ``camera``; returns ``(RenderOutput, VolumeContext)``.

    ``activated`` may carry :func:`activate` output to share across cameras.
    """
    cfg = cfg or RaySamplingConfig()
    height, width = camera.shape if size is None else tuple(size)
    opa, sem = _activated(grid) if activated is None else activated
    lo, inv, dims = _grid_frame(grid)
    dirs, ray_len = _rays(camera, height, width)
    offsets = cfg.sample_offsets(height, width)
    C = sem.shape[-1]
    out_feat = np.zeros((height, width, C))
    out_depth = np.zeros((height, width))
    out_acc = np.zeros((height, width))
    out_n = np.zeros((height, width), dtype=np.int64)
    _march(np.asarray(camera.center, dtype=np.float64), dirs, ray_len, offsets, cfg.near, cfg.spacing,
           cfg.density_scale, lo, inv, dims, opa, sem, out_feat, out_depth, out_acc, out_n)
    ctx = VolumeContext(cfg, offsets, out_n, (height, width), camera, _fingerprint(grid, camera))
    return RenderOutput(out_feat, out_depth, out_acc), ctx


def _fingerprint(grid, camera):
    return (id(grid), grid.dims, float(np.sum(grid.opacity_logits, dtype=np.float64)), id(camera))


def volume_backward(ctx, grid, camera, grad_feature=None, grad_depth=None, grad_accum=None):
    """Gradients of a scalar loss w.r.t. the grid's opacity and semantic logits."""
    if ctx.fingerprint != _fingerprint(grid, camera):
        raise ContractError("volume context does not belong to this grid / camera")
    H, W = ctx.size
    cfg = ctx.cfg
    opa, sem = _activated(grid)
    lo, inv, dims = _grid_frame(grid)
    dirs, ray_len = _rays(camera, H, W)
    C = sem.shape[-1]
    gF = np.zeros((H, W, C)) if grad_feature is None else np.ascontiguousarray(grad_feature, dtype=np.float64).reshape(H, W, C)
    gD = np.zeros((H, W)) if grad_depth is None else np.ascontiguousarray(grad_depth, dtype=np.float64)
    gA = np.zeros((H, W)) if grad_accum is None else np.ascontiguousarray(grad_accum, dtype=np.float64)
    d_opa = np.zeros(opa.shape)
    d_sem = np.zeros(sem.shape)
    _march_backward(np.asarray(camera.center, dtype=np.float64), dirs, ray_len, ctx.offsets, cfg.near,
                    cfg.spacing, cfg.density_scale, lo, inv, dims, opa, sem, ctx.n_traversed,
                    gF, gD, gA, d_opa, d_sem)
    d_opacity_logits = d_opa * opa * (1.0 - opa)
    d_semantic_logits = sem * (d_sem - np.sum(d_sem * sem, axis=-1, keepdims=True))
    return d_opacity_logits, d_semantic_logits


def sample_count(size, cfg, n_cameras=1):
    height, width = size
    return n_cameras * height * width * cfg.samples_per_ray


__all__ = [
    "DEFAULT_DENSITY_SCALE",
    "RaySamplingConfig",
    "sample_grid_trilinear",
    "VolumeContext",
    "activate",
    "volume_forward",
    "volume_backward",
    "sample_count",
]
