"""Negative control: photometric fitting of a colour voxel grid, no depth stage.

Every vertex is a Gaussian carrying an RGB colour; the grid is splatted into
each frame-t camera and compared with the image over a sky-coloured
background. Inside camera overlaps several views constrain where colour
sits; elsewhere one view is all there is, so depth there is whatever
explains a single image. Depth is read back from the rendered grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import DepthMap
from ..gaussians import GaussianSet
from ..losses import photometric_loss, tv_loss
from ..optim import adam_step
from ..splat import splat_backward, splat_forward
from ..splat import _vertex_means
from ..voxel_scene import VoxelGrid
from .config import FitConfig
from .data import capture
from .stage1 import evaluate_depths, overlap_regions
from .stage2 import HIT_ACCUM


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(eq=False)
class OneStageResult:
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    depths: list
    metrics: object
    region_metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def _gaussians(means, opacity_logits, color_logits, scale):
    n = len(means)
    return GaussianSet(
        means,
        np.broadcast_to(np.full(3, float(scale)), (n, 3)),
        np.broadcast_to(np.array([1.0, 0.0, 0.0, 0.0]), (n, 4)),
        _sigmoid(opacity_logits),
        _sigmoid(color_logits),
    )


def fit_one_stage(scene, rig, cfg=None, data=None, log=None):
    """Fit vertex opacity and colour to the frame-t images; evaluate rendered depth."""
    cfg = cfg or FitConfig(stage="stage2")
    data = data or capture(scene, rig)
    cams = rig.cameras
    template = VoxelGrid.filled(cfg.grid_dims, cfg.grid_bounds, 2)
    means = _vertex_means(template)
    bg = np.asarray(scene.sky_color, dtype=np.float64)
    params = {"opacity": np.full(len(means), float(cfg.init_opacity_logit)),
              "color": np.zeros((len(means), 3))}
    state = None
    history = []
    for it in range(cfg.iterations):
        d_op = np.zeros(len(means))
        d_col = np.zeros((len(means), 3))
        total = 0.0
        for cam, image in zip(cams, data.images):
            gs = _gaussians(means, params["opacity"], params["color"], cfg.gsv_scale)
            out, ctx = splat_forward(gs, cam)
            synth = out.feature + (1.0 - out.accum)[..., None] * bg
            loss, g = photometric_loss(image, synth, None, cfg.beta, return_grad=True)
            total += loss / len(cams)
            gr = splat_backward(ctx, gs, cam, g / len(cams), None, -(g * bg).sum(-1) / len(cams),
                                compute_mean_grad=False)
            o, c = gs.opacities, gs.features
            d_op += gr.d_opacity * o * (1.0 - o)
            d_col += gr.d_feature * c * (1.0 - c)
        if cfg.tv_weight:
            l_tv, g_tv = tv_loss(params["opacity"].reshape(template.dims), cfg.tv_weight, return_grad=True)
            total += l_tv
            d_op += g_tv.reshape(-1)
        params, state = adam_step(params, {"opacity": d_op, "color": d_col}, state, lr=cfg.lr)
        history.append(total)
        if log is not None and (it % 100 == 0 or it == cfg.iterations - 1):
            log(f"one-stage it={it} loss={total:.5f}")

    gs = _gaussians(means, params["opacity"], params["color"], cfg.gsv_scale)
    depths = []
    for cam in cams:
        out, _ = splat_forward(gs, cam)
        hit = out.accum > HIT_ACCUM
        depths.append(DepthMap(np.where(hit, out.normalized_depth(), 0.0), hit))
    regions = overlap_regions(rig, cfg)
    return OneStageResult(
        params["opacity"].reshape(template.dims),
        params["color"].reshape(template.dims + (3,)),
        depths,
        evaluate_depths(depths, data.depth),
        {"overlap": evaluate_depths(depths, data.depth, regions),
         "non_overlap": evaluate_depths(depths, data.depth, [~r for r in regions])},
        history,
    )
