"""Stage 2: fit a voxel grid of opacity and semantic logits by rendering it.

Each vertex is either a Gaussian (splat backend) or a trilinear sample site
(volume backend). Supervision is per-view rendered depth (L1, sky pulled to
zero mass) and rendered semantics, plus TV on opacity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import DepthMap
from ..losses import LossBreakdown, depth_metrics, miou, semantic_loss, tv_loss
from ..optim import adam_step
from ..splat import splat_backward, splat_forward, voxel_to_gaussians
from ..volume import RaySamplingConfig, volume_backward, volume_forward
from ..voxel_scene import FREE, VoxelGrid, observed_mask, voxelize
from .config import FitConfig, array_digest
from .data import capture

#: Accumulated weight above which a rendered pixel counts as a hit.
HIT_ACCUM = 0.5


@dataclass(eq=False)
class Stage2Result:
    grid: VoxelGrid
    depth: object  # DepthMetrics over frame-t views
    miou: float
    per_class_iou: np.ndarray
    history: list = field(default_factory=list)
    initial_miou: float = float("nan")

    def state_arrays(self):
        return [self.grid.opacity_logits, self.grid.semantic_logits]

    def digest(self):
        return array_digest(*self.state_arrays())


class Renderer:
    """Forward/backward for one backend, with logits-level gradients."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.ray_cfg = RaySamplingConfig(cfg.samples_per_ray, cfg.near, cfg.far, density_scale=cfg.density_scale)

    def forward(self, grid, camera):
        if self.cfg.renderer == "volume":
            return volume_forward(grid, camera, cfg=self.ray_cfg)
        gs = voxel_to_gaussians(grid, self.cfg.gsv_scale)
        out, ctx = splat_forward(gs, camera)
        return out, (ctx, gs)

    def backward(self, ctx, grid, camera, gF, gD, gA):
        """Returns ``(d opacity logits, d semantic logits)``."""
        if self.cfg.renderer == "volume":
            return volume_backward(ctx, grid, camera, gF, gD, gA)
        ctx, gs = ctx
        g = splat_backward(ctx, gs, camera, gF, gD, gA, compute_mean_grad=False)
        o, p = gs.opacities, gs.features
        d_op = (g.d_opacity * o * (1.0 - o)).reshape(grid.dims)
        d_sem = p * (g.d_feature - np.sum(g.d_feature * p, axis=1, keepdims=True))
        return d_op, d_sem.reshape(grid.semantic_logits.shape)


def depth_l1(rendered_depth, target, valid):
    """Mean ``|D - target|`` over ``valid`` pixels, and its gradient w.r.t. ``D``."""
    n = max(int(valid.sum()), 1)
    diff = np.where(valid, rendered_depth - target, 0.0)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def initial_grid(cfg, num_classes):
    return VoxelGrid.filled(cfg.grid_dims, cfg.grid_bounds, num_classes, cfg.init_opacity_logit, 0.0)


def _views(data, depth_targets):
    """(camera, depth target, labels) for every view of both frames; sky has target 0.

    A frame whose depth targets are ``None`` is left out.
    """
    out = []
    for cams, depths, labels in ((data.rig.cameras, depth_targets[0], data.labels),
                                 (data.rig_next.cameras, depth_targets[1], data.labels_next)):
        if depths is None:
            continue
        for cam, d, lab in zip(cams, depths, labels):
            out.append((cam, np.where(d.valid, d.values, 0.0), lab))
    return out


def evaluate_grid(grid, scene, data, cfg, renderer=None, gt_grid=None):
    """Rendered-depth metrics over frame-t views and mIoU over observed vertices.

    A vertex counts as occupied at ``cfg.occupancy_threshold``: a rendered
    surface is shared by the two or three vertex layers its footprint spans,
    so single vertices rarely reach opacity 0.5 even where the surface is
    fully opaque.
    """
    renderer = renderer or Renderer(cfg)
    preds, gts = [], []
    for cam, gt in zip(data.rig.cameras, data.depth):
        out, _ = renderer.forward(grid, cam)
        hit = out.accum > HIT_ACCUM
        preds.append(DepthMap(np.where(hit, out.normalized_depth(), 0.0), hit))
        gts.append(gt)
    pred = DepthMap(np.concatenate([p.values for p in preds]), np.concatenate([p.valid for p in preds]))
    gt = DepthMap(np.concatenate([g.values for g in gts]), np.concatenate([g.valid for g in gts]))
    gt_grid = gt_grid if gt_grid is not None else voxelize(scene, grid.dims, grid.bounds)
    seen = observed_mask(grid, data.rig.cameras, data.depth)
    per_class, mean = miou(grid, gt_grid, mask=seen, threshold=cfg.occupancy_threshold)
    return depth_metrics(pred, gt), mean, per_class


def fit_stage2(scene, rig, cfg=None, data=None, depth_targets=None, init_grid=None, log=None):
    """Fit a voxel grid to rendered depth and semantics; returns a :class:`Stage2Result`.

    ``depth_targets`` (pairs of per-camera DepthMap lists for frames t and t+1,
    either may be ``None`` to drop that frame) replace ray-cast depth as
    supervision, e.g. stage-1 predictions. Views
    cycle in a fixed order, ``views_per_step`` per Adam step.
    """
    cfg = cfg or FitConfig(stage="stage2")
    data = data or capture(scene, rig)
    if depth_targets is None:
        depth_targets = (data.depth, data.depth_next)
    renderer = Renderer(cfg)
    views = _views(data, depth_targets)
    grid = init_grid.copy() if init_grid is not None else initial_grid(cfg, scene.num_classes)
    gt_grid = voxelize(scene, grid.dims, grid.bounds)
    params = {"opacity": grid.opacity_logits.astype(np.float64),
              "semantic": grid.semantic_logits.astype(np.float64)}
    state = None
    history = []
    cursor = 0
    for it in range(cfg.iterations):
        grid.opacity_logits = params["opacity"].astype(np.float32)
        grid.semantic_logits = params["semantic"].astype(np.float32)
        d_op = np.zeros(grid.dims)
        d_sem = np.zeros(grid.semantic_logits.shape)
        terms = LossBreakdown()
        for _ in range(cfg.views_per_step):
            cam, target, labels = views[cursor % len(views)]
            cursor += 1
            out, ctx = renderer.forward(grid, cam)
            everywhere = np.ones(cam.shape, dtype=bool)
            l_d, g_d = depth_l1(out.depth, target, everywhere)
            l_s, g_s = semantic_loss(out.feature, labels, None, return_grad=True)
            w = 1.0 / cfg.views_per_step
            terms.depth += w * cfg.depth_weight * l_d
            terms.semantic += w * cfg.semantic_weight * l_s
            go, gs = renderer.backward(ctx, grid, cam, w * cfg.semantic_weight * g_s,
                                       w * cfg.depth_weight * g_d, None)
            d_op += go
            d_sem += gs
        if cfg.tv_weight:
            l_tv, g_tv = tv_loss(params["opacity"], cfg.tv_weight, return_grad=True)
            terms.tv = l_tv
            d_op += g_tv
        params, state = adam_step(params, {"opacity": d_op, "semantic": d_sem}, state, lr=cfg.lr)
        history.append(terms.to_dict())
        if log is not None and (it % 100 == 0 or it == cfg.iterations - 1):
            log(f"stage2[{cfg.renderer}] it={it} total={terms.total:.5f} depth={terms.depth:.5f} "
                f"semantic={terms.semantic:.5f} tv={terms.tv:.5f}")
    grid.opacity_logits = params["opacity"].astype(np.float32)
    grid.semantic_logits = params["semantic"].astype(np.float32)
    metrics, mean, per_class = evaluate_grid(grid, scene, data, cfg, renderer, gt_grid)
    return Stage2Result(grid, metrics, mean, per_class, history)


def scale_sweep(scene, rig, cfg=None, scales=(0.05, 0.1, 0.15), data=None, log=None):
    """Splat-backend fits at several vertex Gaussian scales; one row per scale."""
    cfg = (cfg or FitConfig(stage="stage2")).with_(renderer="splat")
    data = data or capture(scene, rig)
    rows = []
    for s in scales:
        res = fit_stage2(scene, rig, cfg.with_(gsv_scale=float(s)), data=data, log=log)
        rows.append({"scale": float(s), "miou": res.miou, **res.depth.to_dict()})
    return rows


def format_sweep(rows):
    cols = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3", "miou")
    lines = ["method       " + " ".join(f"{c:>9}" for c in cols)]
    for r in rows:
        lines.append(f"SR (s={r['scale']:.2f}) " + " ".join(f"{r[c]:9.4f}" for c in cols))
    return "\n".join(lines)


__all__ = ["FREE", "HIT_ACCUM", "Renderer", "Stage2Result", "depth_l1", "evaluate_grid", "fit_stage2",
           "format_sweep", "initial_grid", "scale_sweep"]
