"""Overlap masks between adjacent rig cameras, erosion, and one-sided mask-out."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, PreconditionError
from .geometry import DepthMap, in_image, pixel_grid, project, unproject

#: A pixel overlaps when at least this many of its ray samples land in the other view.
MIN_OVERLAP_HITS = 1
DEFAULT_EROSION_RADIUS = 4


def ray_hit_counts(cam_i, cam_j, n_samples=64, near=0.5, far=20.0):
    """Per pixel of ``cam_i``: how many of ``n_samples`` ray points project into ``cam_j``.

    Samples are evenly spaced in camera-``i`` depth over ``[near, far]``, endpoints
    included.
    """
    if n_samples < 2:
        raise PreconditionError("n_samples must be >= 2")
    if not 0 < near < far:
        raise PreconditionError("need 0 < near < far")
    h, w = cam_i.shape
    pix = pixel_grid(h, w)
    counts = np.zeros((h, w), dtype=np.int64)
    # one depth slice at a time keeps memory flat for large sample counts
    for d in np.linspace(near, far, n_samples):
        world = unproject(cam_i, pix, np.full((h, w), d))
        coords, _, in_front = project(cam_j, world)
        counts += in_front & in_image(coords, *cam_j.shape)
    return counts


def compute_overlap_mask(cam_i, cam_j, n_samples=64, near=0.5, far=20.0, min_hits=MIN_OVERLAP_HITS):
    """Directed overlap mask ``i -> j``: pixels of camera ``i`` seen by camera ``j``."""
    return ray_hit_counts(cam_i, cam_j, n_samples, near, far) >= min_hits


def erode(mask, radius=DEFAULT_EROSION_RADIUS):
    """Binary erosion by a ``(2r+1) x (2r+1)`` square; outside the image counts as empty."""
    if radius < 0:
        raise PreconditionError("erosion radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    size = 2 * int(radius) + 1
    return ndimage.binary_erosion(mask, structure=np.ones((size, size), bool), border_value=0)


def maskout_for_gsp(depth_i, depth_j, mask_ij, mask_ji, drop_side="i"):
    """Source-pixel selections for the two cameras of one adjacent pair.

    The overlap is dropped on exactly one side (``drop_side``; ``"i"`` by
    convention, the lower-indexed camera) so the union of unprojected pixels
    covers it once. Returns ``(select_i, select_j)`` boolean images, already
    restricted to valid depth.
    """
    depth_i = depth_i if isinstance(depth_i, DepthMap) else DepthMap(depth_i)
    depth_j = depth_j if isinstance(depth_j, DepthMap) else DepthMap(depth_j)
    mask_ij = np.asarray(mask_ij, dtype=bool)
    mask_ji = np.asarray(mask_ji, dtype=bool)
    if mask_ij.shape != depth_i.shape or mask_ji.shape != depth_j.shape:
        raise ConfigurationError("mask and depth map sizes disagree")
    if drop_side == "i":
        return depth_i.valid & ~mask_ij, depth_j.valid.copy()
    if drop_side == "j":
        return depth_i.valid.copy(), depth_j.valid & ~mask_ji
    if drop_side == "both":
        raise ConfigurationError("dropping both sides of an overlap leaves a hole")
    raise ConfigurationError(f"unknown drop side {drop_side!r}")


def rig_overlap_masks(rig, n_samples=64, near=0.5, far=20.0, radius=None):
    """``{(i, j): mask_ij, (j, i): mask_ji}`` for every adjacency pair, eroded if ``radius``."""
    rig.require_cross_view()
    out = {}
    for i, j in rig.adjacency:
        for a, b in ((i, j), (j, i)):
            m = compute_overlap_mask(rig.cameras[a], rig.cameras[b], n_samples, near, far)
            out[(a, b)] = m if radius is None else erode(m, radius)
    return out
