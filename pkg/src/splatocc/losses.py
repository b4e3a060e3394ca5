"""Training losses with analytic gradients, plus depth and occupancy metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateInputError
from .geometry import DepthMap, bilinear_sample

DEFAULT_BETA = 0.85
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DEFAULT_TV_WEIGHT = 1e-2
PROB_FLOOR = 1e-8
DEFAULT_DEPTH_CLAMP = (0.1, 80.0)


@dataclass
class LossBreakdown:
    """Weighted loss terms; ``total`` is their sum.

    ``depth`` carries the L1 depth term that stands in for the photometric term
    when fitting the voxel grid; it stays 0 for depth-map fitting.
    """

    temporal: float = 0.0
    cross: float = 0.0
    semantic: float = 0.0
    tv: float = 0.0
    depth: float = 0.0

    @property
    def total(self):
        return self.temporal + self.cross + self.semantic + self.tv + self.depth

    def to_dict(self):
        return {**asdict(self), "total": self.total}


# ---------------------------------------------------------------------------
# SSIM


def _as_hwc(x):
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


def _window_index(h, w, window):
    """Flat source index of every window tap under numpy 'reflect' padding: ``(k*k, H*W)``."""
    r = window // 2
    rows = np.pad(np.arange(h), r, mode="reflect")
    cols = np.pad(np.arange(w), r, mode="reflect")
    taps = []
    for dy in range(window):
        for dx in range(window):
            taps.append((rows[dy:dy + h, None] * w + cols[None, dx:dx + w]).ravel())
    return np.stack(taps)


def _box_mean(x, idx):
    """Window mean of ``x`` (``H*W x C``) at every pixel."""
    return x[idx].mean(axis=0)


def _box_mean_adjoint(g, idx, n):
    """Transpose of :func:`_box_mean`: spread per-pixel ``g`` back over window taps."""
    out = np.zeros((n, g.shape[1]))
    k = idx.shape[0]
    for c in range(g.shape[1]):
        out[:, c] = np.bincount(idx.ravel(), weights=np.tile(g[:, c], k), minlength=n) / k
    return out


def _ssim_stats(a, b, idx):
    return (
        _box_mean(a, idx), _box_mean(b, idx),
        _box_mean(a * a, idx), _box_mean(b * b, idx), _box_mean(a * b, idx),
    )


def ssim(a, b, window=3, c1=SSIM_C1, c2=SSIM_C2):
    """Per-pixel, per-channel SSIM over a ``window x window`` box with reflect padding."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    h, w, C = a.shape
    idx = _window_index(h, w, window)
    mu_a, mu_b, e_aa, e_bb, e_ab = _ssim_stats(a.reshape(-1, C), b.reshape(-1, C), idx)
    num = (2 * mu_a * mu_b + c1) * (2 * (e_ab - mu_a * mu_b) + c2)
    den = (mu_a**2 + mu_b**2 + c1) * ((e_aa - mu_a**2) + (e_bb - mu_b**2) + c2)
    return (num / den).reshape(h, w, C)


def ssim_grad(a, b, upstream, window=3, c1=SSIM_C1, c2=SSIM_C2):
    """Gradient w.r.t. ``b`` of ``sum(upstream * ssim(a, b))``."""
    a, b = _as_hwc(a), _as_hwc(b)
    h, w, C = a.shape
    n = h * w
    idx = _window_index(h, w, window)
    af, bf = a.reshape(n, C), b.reshape(n, C)
    mu_a, mu_b, e_aa, e_bb, e_ab = _ssim_stats(af, bf, idx)
    n1 = 2 * mu_a * mu_b + c1
    n2 = 2 * (e_ab - mu_a * mu_b) + c2
    d1 = mu_a**2 + mu_b**2 + c1
    d2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + c2
    S = n1 * n2 / (d1 * d2)
    G = np.asarray(upstream, dtype=np.float64).reshape(n, C)
    g_mu_b = G * ((2 * mu_a * n2 - 2 * mu_a * n1) / (d1 * d2) - S * 2 * mu_b / d1 + S * 2 * mu_b / d2)
    g_e_bb = G * (-S / d2)
    g_e_ab = G * (2 * n1 / (d1 * d2))
    grad = (
        _box_mean_adjoint(g_mu_b, idx, n)
        + 2 * bf * _box_mean_adjoint(g_e_bb, idx, n)
        + af * _box_mean_adjoint(g_e_ab, idx, n)
    )
    return grad.reshape(h, w, C)


# ---------------------------------------------------------------------------
# Photometric family


def _validity(valid, shape):
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != shape:
        raise ConfigurationError("validity mask does not match the image size")
    return valid


def photometric_loss(target, synthesized, valid=None, beta=DEFAULT_BETA, return_grad=False):
    """Mean over valid pixels of ``beta (1 - SSIM)/2 + (1 - beta) |I - I_hat|``.

    Both terms are averaged over channels. With ``return_grad`` the gradient
    w.r.t. ``synthesized`` is returned as well.
    """
    t, s = _as_hwc(target), _as_hwc(synthesized)
    if t.shape != s.shape:
        raise ConfigurationError(f"image shapes differ: {t.shape} vs {s.shape}")
    h, w, C = t.shape
    valid = _validity(valid, (h, w))
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateInputError("photometric loss over zero valid pixels")
    diff = s - t
    # invalid pixels show the pair's average in both images, so they neither
    # add structure to nor remove it from the SSIM windows of valid neighbours
    partial = not valid.all()
    if partial:
        fill = 0.5 * (t + s)
        vmask = valid[..., None]
        t_f, s_f = np.where(vmask, t, fill), np.where(vmask, s, fill)
    else:
        t_f, s_f = t, s
    per_pixel = (1.0 - beta) * np.abs(diff).mean(axis=-1)
    if beta:
        per_pixel = per_pixel + beta * ((1.0 - ssim(t_f, s_f)) / 2).mean(axis=-1)
    loss = float(per_pixel[valid].sum() / n_valid)
    if not return_grad:
        return loss
    vm = valid[..., None] / (n_valid * C)
    grad = (1.0 - beta) * np.sign(diff) * vm
    if beta:
        up = -0.5 * beta * np.broadcast_to(vm, t.shape)
        g_s = ssim_grad(t_f, s_f, up)
        if partial:
            # SSIM is symmetric, so its gradient w.r.t. the first image swaps arguments
            g_t = ssim_grad(s_f, t_f, up)
            g_s = np.where(vmask, g_s, 0.5 * (g_s + g_t))
        grad = grad + g_s
    if np.ndim(synthesized) == 2:
        grad = grad[..., 0]
    return loss, grad


def temporal_loss(target, source, flow, beta=DEFAULT_BETA, return_grad=False):
    """Photometric loss of ``target`` against ``source`` warped by ``flow = (coords, valid)``.

    With ``return_grad`` also returns ``d loss / d coords`` of shape ``(H, W, 2)``.
    """
    coords, flow_valid = flow
    if return_grad:
        warped, in_bounds, dx, dy = bilinear_sample(source, coords, return_grad=True)
    else:
        warped, in_bounds = bilinear_sample(source, coords)
    valid = np.asarray(flow_valid, dtype=bool) & in_bounds
    if not return_grad:
        return photometric_loss(target, warped, valid, beta)
    loss, g = photometric_loss(target, warped, valid, beta, return_grad=True)
    g, dx, dy = _as_hwc(g), _as_hwc(dx), _as_hwc(dy)
    d_coords = np.stack([(g * dx).sum(-1), (g * dy).sum(-1)], axis=-1)
    return loss, d_coords


# ---------------------------------------------------------------------------
# Regularizers and semantics


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def tv_loss(grid, weight=DEFAULT_TV_WEIGHT, return_grad=False):
    """Weighted mean absolute forward difference of vertex opacity along x, y and z.

    ``grid`` is a :class:`VoxelGrid` or a raw 3-D array of opacity logits. The
    mean runs over every forward-difference edge of all three axes. The
    optional gradient is w.r.t. the opacity logits.
    """
    logits = getattr(grid, "opacity_logits", grid)
    logits = np.asarray(logits, dtype=np.float64)
    o = _sigmoid(logits)
    diffs = [np.diff(o, axis=a) for a in range(3)]
    edges = sum(d.size for d in diffs)
    if edges == 0:
        return (0.0, np.zeros_like(o)) if return_grad else 0.0
    loss = weight * sum(np.abs(d).sum() for d in diffs) / edges
    if not return_grad:
        return float(loss)
    g = np.zeros_like(o)
    for a, d in enumerate(diffs):
        s = np.sign(d) * (weight / edges)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        g[tuple(hi)] += s
        g[tuple(lo)] -= s
    return float(loss), g * o * (1.0 - o)


def semantic_loss(rendered, gt_labels, valid=None, return_grad=False):
    """Accumulation-weighted cross-entropy on blended class probabilities.

    Per pixel, with ``F`` the blended probabilities and ``A = sum(F)`` the
    rendered mass, the term is ``A * -log(max(F[gt] / A, 1e-8))``; the loss is
    the mean over valid pixels. Pixels with no mass contribute 0.
    """
    F = np.asarray(rendered, dtype=np.float64)
    h, w, C = F.shape
    labels = np.asarray(gt_labels)
    valid = _validity(valid, (h, w))
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateInputError("semantic loss over zero valid pixels")
    A = F.sum(axis=-1)
    Fg = np.take_along_axis(F, labels[..., None].astype(np.intp), axis=-1)[..., 0]
    live = valid & (A > 1e-12)
    A_safe = np.where(live, A, 1.0)
    q = np.where(live, Fg / A_safe, 1.0)
    floored = q < PROB_FLOOR
    nll = -np.log(np.maximum(q, PROB_FLOOR))
    loss = float((A * nll)[live].sum() / n_valid)
    if not return_grad:
        return loss
    # d/dF_c [A (log A - log F_gt)] = (log A - log F_gt + 1) - [c = gt] A / F_gt
    common = np.where(floored, -np.log(PROB_FLOOR), nll + 1.0)
    grad = np.repeat(common[..., None], C, axis=-1)
    onehot = np.arange(C) == labels[..., None]
    grad -= np.where(onehot & ~floored[..., None], (A_safe / np.where(Fg > 0, Fg, 1.0))[..., None], 0.0)
    grad *= (live / n_valid)[..., None]
    return loss, grad


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    median_rel: float = float("nan")
    count: int = 0

    def to_dict(self):
        return asdict(self)


def depth_metrics(pred, gt, clamp=DEFAULT_DEPTH_CLAMP, mask=None):
    """Standard depth errors over pixels valid in both maps (and ``mask``).

    Ground truth is clamped to ``clamp`` first; relative errors divide by it.
    ``median_rel`` is ``median(|pred - gt| / gt)``.
    """
    pred = pred if isinstance(pred, DepthMap) else DepthMap(pred)
    gt = gt if isinstance(gt, DepthMap) else DepthMap(gt)
    if pred.shape != gt.shape:
        raise ConfigurationError("depth maps differ in size")
    m = pred.valid & gt.valid
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    if not m.any():
        raise DegenerateInputError("no pixels valid in both depth maps")
    p = pred.values[m].astype(np.float64)
    g = np.clip(gt.values[m].astype(np.float64), *clamp)
    ratio = np.maximum(p / g, g / p)
    rel = np.abs(p - g) / g
    return DepthMetrics(
        abs_rel=float(rel.mean()),
        sq_rel=float(((p - g) ** 2 / g).mean()),
        rmse=float(np.sqrt(((p - g) ** 2).mean())),
        rmse_log=float(np.sqrt(((np.log(p) - np.log(g)) ** 2).mean())),
        delta1=float((ratio < 1.25).mean()),
        delta2=float((ratio < 1.25**2).mean()),
        delta3=float((ratio < 1.25**3).mean()),
        median_rel=float(np.median(rel)),
        count=int(m.sum()),
    )


def grid_classes(grid, threshold=0.5):
    """Vertex class: semantic argmax where opacity >= threshold, else 0 (free)."""
    return grid.labels(threshold)


def miou(pred, gt, num_classes=None, mask=None, threshold=0.5):
    """Per-class IoU over non-free classes and their mean.

    Classes absent from both prediction and ground truth get NaN and are left
    out of the mean. ``mask`` restricts the comparison to a vertex subset.
    Returns ``(per_class, mean)`` with ``per_class[0]`` (free) always NaN.
    """
    if pred.dims != gt.dims:
        raise ConfigurationError(f"grid dims differ: {pred.dims} vs {gt.dims}")
    C = num_classes or max(pred.num_classes, gt.num_classes)
    p = grid_classes(pred, threshold)
    g = grid_classes(gt, threshold)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        p, g = p[m], g[m]
    per = np.full(C, np.nan)
    for c in range(1, C):
        inter = np.sum((p == c) & (g == c))
        union = np.sum((p == c) | (g == c))
        if union:
            per[c] = inter / union
    present = per[~np.isnan(per)]
    return per, float(present.mean()) if present.size else float("nan")


__all__ = [
    "DEFAULT_BETA",
    "SSIM_C1",
    "SSIM_C2",
    "DEFAULT_TV_WEIGHT",
    "PROB_FLOOR",
    "DEFAULT_DEPTH_CLAMP",
    "LossBreakdown",
    "ssim",
    "ssim_grad",
    "photometric_loss",
    "temporal_loss",
    "tv_loss",
    "semantic_loss",
    "DepthMetrics",
    "depth_metrics",
    "grid_classes",
    "miou",
]
