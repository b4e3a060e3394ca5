import numpy as np
import pytest
from scipy import ndimage

from splatocc.errors import ContractError, PreconditionError
from splatocc.geometry import Camera, Intrinsics, Pose, camera_rays, look_rotation, pixel_grid
from splatocc.splat import ALPHA_MIN, T_MIN
from splatocc.volume import RaySamplingConfig, activate, sample_count, sample_grid_trilinear, volume_backward, volume_forward
from splatocc.voxel_scene import VoxelGrid

from helpers import assert_grad_close, central_difference, render_objective

BOUNDS = ((-2.0, -2.0, -1.0), (2.0, 2.0, 1.0))


def _random_grid(rng, dims=(5, 6, 4), classes=3, bounds=BOUNDS):
    g = VoxelGrid.filled(dims, bounds, classes)
    g.opacity_logits = rng.normal(0.0, 2.0, dims).astype(np.float32)
    g.semantic_logits = rng.normal(size=dims + (classes,)).astype(np.float32)
    return g


def _trilinear_oracle(grid, pts):
    """scipy map_coordinates (order 1) on the activated vertex arrays, zero outside."""
    opa, sem = activate(grid)
    lo, hi = (np.asarray(b) for b in grid.bounds)
    idx = (pts - lo) / (hi - lo) * (np.asarray(grid.dims) - 1)
    inside = np.all((idx >= 0) & (idx <= np.asarray(grid.dims) - 1), axis=-1)
    dens = ndimage.map_coordinates(opa, idx.T, order=1, mode="nearest")
    feat = np.stack([ndimage.map_coordinates(sem[..., c], idx.T, order=1, mode="nearest")
                     for c in range(sem.shape[-1])], -1)
    return np.where(inside, dens, 0.0), np.where(inside[:, None], feat, 0.0)


def _march_oracle(grid, camera, cfg):
    """Per-ray numpy compositing with the same sampling and stop rules."""
    H, W = camera.shape
    rays_cam = camera_rays(camera, pixel_grid(H, W)).reshape(-1, 3)
    step = (cfg.far - cfg.near) / cfg.samples_per_ray
    zs = cfg.near + (np.arange(cfg.samples_per_ray) + 0.5) * step
    C = grid.num_classes
    feat, depth, acc = np.zeros((H * W, C)), np.zeros(H * W), np.zeros(H * W)
    for r, d in enumerate(rays_cam):
        pts = camera.pose.apply(zs[:, None] * d)
        dens, f = _trilinear_oracle(grid, pts)
        inside = np.all((pts >= grid.bounds[0]) & (pts <= grid.bounds[1]), axis=-1)
        alpha = 1.0 - np.exp(-cfg.density_scale * dens * step * np.linalg.norm(d))
        T = 1.0
        for s in range(len(zs)):
            if not inside[s] or alpha[s] < ALPHA_MIN:
                continue
            w = alpha[s] * T
            feat[r] += w * f[s]
            depth[r] += w * zs[s]
            acc[r] += w
            T *= 1.0 - alpha[s]
            if T < T_MIN:
                break
    return feat.reshape(H, W, C), depth.reshape(H, W), acc.reshape(H, W)


@pytest.fixture
def inside_camera():
    # sits inside the grid looking along +x, slightly down
    return Camera(Intrinsics.from_fov(9, 7, 70.0), Pose(look_rotation(0.3, 0.2), (-1.5, -0.2, 0.3)))


def test_trilinear_matches_map_coordinates(rng):
    grid = _random_grid(rng)
    pts = rng.uniform([-2.3, -2.3, -1.2], [2.3, 2.3, 1.2], (200, 3))
    dens, feat = sample_grid_trilinear(grid, pts)
    ref_d, ref_f = _trilinear_oracle(grid, pts)
    np.testing.assert_allclose(dens, ref_d, atol=1e-12)
    np.testing.assert_allclose(feat, ref_f, atol=1e-12)


def test_trilinear_hits_vertices_exactly(rng):
    grid = _random_grid(rng)
    dens, _ = sample_grid_trilinear(grid, grid.vertex_positions())
    np.testing.assert_allclose(dens, grid.opacity(), atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_numpy_oracle(seed, inside_camera):
    rng = np.random.default_rng(seed)
    grid = _random_grid(rng)
    cfg = RaySamplingConfig(48, 0.2, 5.0)
    out, _ = volume_forward(grid, inside_camera, cfg=cfg)
    feat, depth, acc = _march_oracle(grid, inside_camera, cfg)
    np.testing.assert_allclose(out.accum, acc, atol=1e-12)
    np.testing.assert_allclose(out.depth, depth, atol=1e-11)
    np.testing.assert_allclose(out.feature, feat, atol=1e-12)


def test_uniform_medium_closed_form(inside_camera):
    # constant density: accumulation is Beer-Lambert over the ray length in the grid
    grid = VoxelGrid.filled((5, 5, 5), ((-10, -10, -10), (10, 10, 10)), 2, opacity_logit=0.0)
    cfg = RaySamplingConfig(64, 0.5, 4.5, density_scale=0.2)
    out, _ = volume_forward(grid, inside_camera, cfg=cfg)
    length = 4.0 * np.linalg.norm(camera_rays(inside_camera, pixel_grid(*inside_camera.shape)), axis=-1)
    np.testing.assert_allclose(out.accum, 1.0 - np.exp(-0.2 * 0.5 * length), rtol=1e-12)
    np.testing.assert_allclose(out.feature.sum(-1), out.accum, rtol=1e-12)


def test_empty_grid_renders_nothing(inside_camera):
    grid = VoxelGrid.filled((4, 4, 4), BOUNDS, 2)  # opacity logit -10
    cfg = RaySamplingConfig(32, 0.2, 5.0)
    out, _ = volume_forward(grid, inside_camera, cfg=cfg)
    # sigmoid(-10) * 10 / m over a 0.15 m bin stays under the 1/255 alpha cutoff
    assert not out.accum.any()


def test_activation_can_be_shared(rng, inside_camera):
    grid = _random_grid(rng)
    a, _ = volume_forward(grid, inside_camera, cfg=RaySamplingConfig(16, 0.2, 5.0))
    b, _ = volume_forward(grid, inside_camera, cfg=RaySamplingConfig(16, 0.2, 5.0), activated=activate(grid))
    np.testing.assert_array_equal(a.depth, b.depth)


def test_resized_render_uses_scaled_intrinsics(rng, inside_camera):
    grid = _random_grid(rng)
    cfg = RaySamplingConfig(16, 0.2, 5.0)
    big = inside_camera.scaled(2.0)
    a, _ = volume_forward(grid, inside_camera, size=big.shape, cfg=cfg)
    b, _ = volume_forward(grid, big, cfg=cfg)
    np.testing.assert_allclose(a.accum, b.accum, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_fd(seed, inside_camera):
    rng = np.random.default_rng(50 + seed)
    grid = _random_grid(rng, dims=(4, 4, 3), classes=2)
    grid.opacity_logits = rng.normal(-1.0, 1.0, grid.dims).astype(np.float32)
    cfg = RaySamplingConfig(24, 0.2, 5.0, density_scale=2.0)
    H, W = inside_camera.shape
    gF, gD, gA = rng.normal(size=(H, W, 2)), rng.normal(size=(H, W)), rng.normal(size=(H, W))
    out, ctx = volume_forward(grid, inside_camera, cfg=cfg)
    d_op, d_sem = volume_backward(ctx, grid, inside_camera, gF, gD, gA)

    # grids store float32 logits; differentiate through float64 activations instead
    op0 = grid.opacity_logits.astype(np.float64)
    sem0 = grid.semantic_logits.astype(np.float64)

    def render(op_logits, sem_logits):
        e = np.exp(sem_logits - sem_logits.max(-1, keepdims=True))
        act = (1.0 / (1.0 + np.exp(-op_logits)), e / e.sum(-1, keepdims=True))
        return render_objective(volume_forward(grid, inside_camera, cfg=cfg, activated=act)[0], gF, gD, gA)

    assert_grad_close(d_op, central_difference(lambda x: render(x, sem0), op0))
    assert_grad_close(d_sem, central_difference(lambda x: render(op0, x), sem0))


def test_stale_context(rng, inside_camera):
    grid = _random_grid(rng)
    _, ctx = volume_forward(grid, inside_camera, cfg=RaySamplingConfig(8, 0.2, 5.0))
    other = _random_grid(rng)
    with pytest.raises(ContractError):
        volume_backward(ctx, other, inside_camera, grad_accum=np.ones(inside_camera.shape))


def test_stratified_offsets_are_seeded():
    a = RaySamplingConfig(8, stratified=True, seed=3).sample_offsets(2, 3)
    b = RaySamplingConfig(8, stratified=True, seed=3).sample_offsets(2, 3)
    np.testing.assert_array_equal(a, b)
    assert np.all((a >= 0) & (a < 1))
    assert np.all(RaySamplingConfig(8).sample_offsets(2, 3) == 0.5)


@pytest.mark.parametrize("kwargs", [dict(near=0.0), dict(near=5.0, far=4.0), dict(samples_per_ray=1),
                                    dict(density_scale=0.0)])
def test_config_validation(kwargs):
    with pytest.raises(PreconditionError):
        RaySamplingConfig(**kwargs)


def test_sample_count_arithmetic():
    assert sample_count((180, 320), RaySamplingConfig(128), n_cameras=6) == 44_236_800
