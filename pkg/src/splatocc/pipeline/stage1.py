"""Stage 1: per-camera depth and ego pose from temporal and cross-view photometric losses.

Depth is a directly optimized log-depth field per camera, pose a single SE(3)
transform taking frame-t world coordinates into the ego frame at t+1. The
temporal term warps the next frame into the current one. The cross term
unprojects each adjacent pair into Gaussians, drops the lower-indexed camera's
side of their overlap, splats the result into that camera and compares with
its image: inside the overlap only the neighbour's Gaussians are left, so
their placement (and with it metric scale) is what the loss sees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from ..errors import ConfigurationError
from ..geometry import DepthMap, Pose, camera_rays, pixel_grid, se3_log, se3_step
from ..gaussians import GaussianSet
from ..losses import LossBreakdown, depth_metrics, photometric_loss, temporal_loss
from ..masks import compute_overlap_mask, erode, maskout_for_gsp
from ..optim import adam_step
from ..splat import depth_map_to_gaussians, splat_backward, splat_forward
from .config import FitConfig, array_digest
from .data import capture

SKY_LOG_DEPTH = np.log(20.0)


@dataclass(eq=False)
class Stage1State:
    log_depth: list
    pose: Pose
    pose_init: Pose
    valid: list
    history: list = field(default_factory=list)
    metrics: object = None
    metrics_before_refine: object = None
    metrics_initial: object = None
    region_metrics: dict = field(default_factory=dict)

    @property
    def depths(self):
        return [DepthMap(np.where(v, np.exp(ld), 0.0), v) for ld, v in zip(self.log_depth, self.valid)]

    @property
    def pose_increment(self):
        """6-vector ``(omega, v)`` with ``pose = Exp(increment) o pose_init``."""
        return se3_log(self.pose @ self.pose_init.inverse())

    @property
    def ego_motion(self):
        return self.pose.inverse()

    def state_arrays(self):
        return [*self.log_depth, self.pose.rotation, self.pose.translation]

    def digest(self):
        return array_digest(*self.state_arrays())


# ---------------------------------------------------------------------------
# Depth parameterization


def upsampling_matrix(height, width, factor):
    """Sparse bilinear upsampling from a ``ceil(H/f) x ceil(W/f)`` grid to ``H x W``."""
    if factor == 1:
        return sparse.identity(height * width, format="csr")
    h, w = -(-height // factor), -(-width // factor)

    def axis(n_full, n_low):
        x = np.clip((np.arange(n_full) + 0.5) / factor - 0.5, 0, n_low - 1)
        i0 = np.minimum(np.floor(x).astype(int), max(n_low - 2, 0))
        i1 = np.minimum(i0 + 1, n_low - 1)
        return i0, i1, x - i0

    y0, y1, fy = axis(height, h)
    x0, x1, fx = axis(width, w)
    rows, cols, vals = [], [], []
    r = np.arange(height * width).reshape(height, width)
    for yi, wy in ((y0, 1 - fy), (y1, fy)):
        for xi, wx in ((x0, 1 - fx), (x1, fx)):
            rows.append(r.ravel())
            cols.append((yi[:, None] * w + xi[None, :]).ravel())
            vals.append((wy[:, None] * wx[None, :]).ravel())
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(height * width, h * w)
    )


# ---------------------------------------------------------------------------
# Loss terms


def temporal_term(cam, depth, valid, image, image_next, pose, beta):
    """Warp ``image_next`` into ``cam`` through ``depth`` and ``pose``.

    Returns ``(loss, d loss / d log-depth, d loss / d pose-increment)``.
    """
    h, w = cam.shape
    k = cam.intrinsics
    Rc, tc = cam.pose.rotation, cam.pose.translation
    rays = camera_rays(cam, pixel_grid(h, w))
    X = (rays * depth[..., None]) @ Rc.T + tc
    Y = X @ pose.rotation.T + pose.translation
    Yc = (Y - tc) @ Rc
    z = Yc[..., 2]
    front = z > 1e-3
    zs = np.where(front, z, 1.0)
    with np.errstate(invalid="ignore"):
        coords = np.stack([k.fx * Yc[..., 0] / zs + k.cx, k.fy * Yc[..., 1] / zs + k.cy], axis=-1)
    coords[~front] = np.nan
    loss, d_coords = temporal_loss(image, image_next, (coords, valid & front), beta, return_grad=True)
    gu, gv = d_coords[..., 0], d_coords[..., 1]
    g_yc = np.stack(
        [gu * k.fx / zs, gv * k.fy / zs, -(gu * k.fx * Yc[..., 0] + gv * k.fy * Yc[..., 1]) / zs**2], axis=-1
    )
    g_yc[~front] = 0.0
    g_y = g_yc @ Rc.T
    # left increment Y <- Exp(omega, v) Y: dY/domega = -[Y]x, dY/dv = I
    g_pose = np.concatenate([np.cross(Y, g_y).sum(axis=(0, 1)), g_y.sum(axis=(0, 1))])
    dy_dd = rays @ Rc.T @ pose.rotation.T
    g_logd = (g_y * dy_dd).sum(-1) * depth
    return loss, g_logd, g_pose


def cross_term(cams, depths, valids, images, sel_i, sel_j, pair, beta, scale, accum_min, region=None):
    """Splat both cameras' selected pixels into camera ``i`` and compare with its image
    over ``region`` (the overlap with ``j``).

    Returns ``(loss, {camera: d loss / d log-depth})``.
    """
    i, j = pair
    gs_i = depth_map_to_gaussians(cams[i], DepthMap(depths[i], valids[i]), scale, images[i], select=sel_i)
    gs_j = depth_map_to_gaussians(cams[j], DepthMap(depths[j], valids[j]), scale, images[j], select=sel_j)
    gs = GaussianSet.concatenate([gs_i, gs_j])
    out, ctx = splat_forward(gs, cams[i])
    A, F = out.accum, out.feature
    valid = valids[i] & (A > accum_min)
    if region is not None:
        valid &= region
    grads_logd = {i: np.zeros(cams[i].shape), j: np.zeros(cams[j].shape)}
    if not valid.any():
        return 0.0, grads_logd, 0.0
    As = np.where(valid, A, 1.0)
    synth = F / As[..., None]
    loss, g = photometric_loss(images[i], synth, valid, beta, return_grad=True)
    gF = g / As[..., None]
    gA = np.where(valid, -(g * F).sum(-1) / As**2, 0.0)
    grads = splat_backward(ctx, gs, cams[i], gF, None, gA)
    n_i = len(gs_i)
    for cam_k, sel, d_mean in ((i, sel_i, grads.d_mean[:n_i]), (j, sel_j, grads.d_mean[n_i:])):
        cam = cams[cam_k]
        flat = np.flatnonzero(valids[cam_k] & sel)
        h, w = cam.shape
        dirs = camera_rays(cam, pixel_grid(h, w).reshape(-1, 2)[flat]) @ cam.pose.rotation.T
        g = grads_logd[cam_k].reshape(-1)
        g[flat] += (d_mean * dirs).sum(-1) * depths[cam_k].reshape(-1)[flat]
    return loss, grads_logd, float(valid.mean())


# ---------------------------------------------------------------------------
# Driver


def gsp_selections(rig, valids, cfg):
    """Per adjacency pair: which pixels of each camera become Gaussians, and the
    camera-``i`` pixels the cross loss is evaluated on.

    The loss region is the (optionally eroded) overlap mask in both modes; with
    mask-out these are exactly the pixels whose own Gaussians were dropped.
    """
    rig.require_cross_view()
    out = {}
    any_overlap = False
    for i, j in rig.adjacency:
        ci, cj = rig.cameras[i], rig.cameras[j]
        m_ij = compute_overlap_mask(ci, cj, cfg.overlap_samples, cfg.overlap_near, cfg.overlap_far)
        m_ji = compute_overlap_mask(cj, ci, cfg.overlap_samples, cfg.overlap_near, cfg.overlap_far)
        any_overlap |= bool(m_ij.any())
        if cfg.use_erode:
            m_ij, m_ji = erode(m_ij, cfg.erosion_radius), erode(m_ji, cfg.erosion_radius)
        if cfg.use_mask:
            sel = maskout_for_gsp(DepthMap(np.ones(ci.shape), valids[i]),
                                  DepthMap(np.ones(cj.shape), valids[j]), m_ij, m_ji, drop_side="i")
        else:
            sel = (valids[i].copy(), valids[j].copy())
        out[(i, j)] = (*sel, m_ij)
    if not any_overlap:
        raise ConfigurationError("no adjacent camera pair overlaps")
    return out


def overlap_regions(rig, cfg):
    """Per camera, pixels inside any (uneroded) overlap with a neighbour."""
    regions = [np.zeros(c.shape, dtype=bool) for c in rig.cameras]
    for i, j in rig.adjacency:
        ci, cj = rig.cameras[i], rig.cameras[j]
        regions[i] |= compute_overlap_mask(ci, cj, cfg.overlap_samples, cfg.overlap_near, cfg.overlap_far)
        regions[j] |= compute_overlap_mask(cj, ci, cfg.overlap_samples, cfg.overlap_near, cfg.overlap_far)
    return regions


def evaluate_depths(pred, gt, region=None):
    """Depth metrics over every camera at once (optionally restricted to ``region``)."""
    p = DepthMap(np.concatenate([d.values for d in pred]), np.concatenate([d.valid for d in pred]))
    g = DepthMap(np.concatenate([d.values for d in gt]), np.concatenate([d.valid for d in gt]))
    mask = None if region is None else np.concatenate(region)
    return depth_metrics(p, g, mask=mask)


def fit_stage1(scene, rig, cfg=None, ego_motion=None, data=None, log=None):
    """Fit depth maps and ego pose; returns ``(Stage1State, DepthMetrics)``.

    Depth starts at ``depth_init_scale`` times ground truth and the pose at
    ``pose_init_scale`` times the true translation, a consistent but
    mis-scaled reconstruction. Metrics are against ray-cast ground truth with
    no median scaling.
    """
    cfg = cfg or FitConfig()
    rig.require_cross_view()
    data = data or capture(scene, rig, ego_motion)
    cams = rig.cameras
    valids = [d.valid.copy() for d in data.depth]
    selections = gsp_selections(rig, valids, cfg)
    regions = overlap_regions(rig, cfg)

    true_pose = data.ego_motion.inverse()
    pose0 = Pose(true_pose.rotation, cfg.pose_init_scale * true_pose.translation)
    base = [np.where(v, np.log(cfg.depth_init_scale * np.where(v, d.values, 1.0)), SKY_LOG_DEPTH)
            for d, v in zip(data.depth, valids)]
    U = [upsampling_matrix(*c.shape, cfg.depth_downsample) for c in cams]
    params = {f"depth{k}": np.zeros(U[k].shape[1]) for k in range(len(cams))}
    state = Stage1State(list(base), pose0, pose0, valids)
    pose = pose0
    depth_state = pose_state = None
    n_cams, n_pairs = len(cams), len(rig.adjacency)

    def decode():
        return [base[k] + (U[k] @ params[f"depth{k}"]).reshape(cams[k].shape) for k in range(n_cams)]

    state.metrics_initial = evaluate_depths(state.depths, data.depth)
    total_iters = cfg.iterations + cfg.refine_iterations
    for it in range(total_iters):
        refine = it >= cfg.iterations
        log_depth = decode()
        depths = [np.exp(ld) for ld in log_depth]
        g_logd = [np.zeros(c.shape) for c in cams]
        g_pose = np.zeros(6)
        terms = LossBreakdown()
        if cfg.temporal_weight:
            wt = cfg.temporal_weight / n_cams
            for k in range(n_cams):
                loss, gl, gp = temporal_term(cams[k], depths[k], valids[k], data.images[k],
                                             data.images_next[k], pose, cfg.beta)
                terms.temporal += wt * loss
                g_logd[k] += wt * gl
                g_pose += wt * gp
        if cfg.cross_weight and not refine:
            wc = cfg.cross_weight / n_pairs
            for pair in rig.adjacency:
                sel_i, sel_j, region = selections[pair]
                loss, gl, _ = cross_term(cams, depths, valids, data.images, sel_i, sel_j, pair,
                                         cfg.beta, cfg.pixel_gaussian_scale, cfg.cross_accum_min,
                                         region if cfg.cross_region == "overlap" else None)
                terms.cross += wc * loss
                for k, g in gl.items():
                    g_logd[k] += wc * g
        grads = {f"depth{k}": U[k].T @ g_logd[k].reshape(-1) for k in range(n_cams)}
        params, depth_state = adam_step(params, grads, depth_state, lr=cfg.lr)
        if not refine:
            step, pose_state = adam_step({"pose": np.zeros(6)}, {"pose": g_pose}, pose_state, lr=cfg.pose_lr)
            pose = se3_step(pose, step["pose"])
        state.history.append(terms.to_dict())
        if log is not None and (it % 50 == 0 or it == total_iters - 1):
            log(f"stage1 it={it} {'refine ' if refine else ''}total={terms.total:.5f} "
                f"temporal={terms.temporal:.5f} cross={terms.cross:.5f}")
        if it == cfg.iterations - 1:
            state.log_depth, state.pose = decode(), pose
            state.metrics_before_refine = evaluate_depths(state.depths, data.depth)

    state.log_depth, state.pose = decode(), pose
    state.metrics = evaluate_depths(state.depths, data.depth)
    state.region_metrics = {
        "overlap": evaluate_depths(state.depths, data.depth, regions),
        "non_overlap": evaluate_depths(state.depths, data.depth, [~r for r in regions]),
    }
    return state, state.metrics
