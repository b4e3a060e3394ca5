import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from splatocc.errors import ConfigurationError, DegenerateInputError
from splatocc.geometry import DepthMap, pixel_grid
from splatocc.losses import (
    PROB_FLOOR, LossBreakdown, depth_metrics, miou, photometric_loss, semantic_loss, ssim, ssim_grad,
    temporal_loss, tv_loss,
)
from splatocc.voxel_scene import VoxelGrid

from helpers import assert_grad_close, central_difference

images = arrays(np.float64, (7, 9, 2), elements=st.floats(0, 1))


def ssim_oracle(a, b, c1=0.01**2, c2=0.03**2):
    """SSIM with scipy's 3x3 uniform filter; scipy 'mirror' is numpy's 'reflect'."""
    f = lambda x: ndimage.uniform_filter(x, size=(3, 3, 1), mode="mirror")
    mu_a, mu_b = f(a), f(b)
    va, vb, cov = f(a * a) - mu_a**2, f(b * b) - mu_b**2, f(a * b) - mu_a * mu_b
    return (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))


class TestSSIM:
    @given(images, images)
    def test_matches_scipy_oracle(self, a, b):
        np.testing.assert_allclose(ssim(a, b), ssim_oracle(a, b), atol=1e-10)

    @given(images)
    def test_identity_is_one(self, a):
        np.testing.assert_allclose(ssim(a, a), 1.0, atol=1e-12)

    @given(images, images)
    def test_symmetric_and_bounded(self, a, b):
        s = ssim(a, b)
        np.testing.assert_allclose(s, ssim(b, a), atol=1e-12)
        assert np.all(s <= 1.0 + 1e-12) and np.all(s >= -1.0 - 1e-12)

    def test_grad_matches_fd(self, rng):
        a, b, up = rng.random((6, 7, 2)), rng.random((6, 7, 2)), rng.normal(size=(6, 7, 2))
        num = central_difference(lambda x: float(np.sum(up * ssim(a, x))), b)
        assert_grad_close(ssim_grad(a, b, up), num)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            ssim(np.zeros((4, 4)), np.zeros((4, 5)))


class TestPhotometric:
    @given(images)
    def test_fixed_point(self, a):
        assert photometric_loss(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1(self, rng):
        a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
        assert photometric_loss(a, b, beta=0.0) == pytest.approx(np.abs(a - b).mean())

    def test_pure_ssim(self, rng):
        a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
        assert photometric_loss(a, b, beta=1.0) == pytest.approx(((1 - ssim_oracle(a, b)) / 2).mean())

    def test_valid_mask_averages_over_valid(self, rng):
        a, b = rng.random((5, 6)), rng.random((5, 6))
        valid = rng.random((5, 6)) < 0.5
        assert photometric_loss(a, b, valid, beta=0.0) == pytest.approx(np.abs(a - b)[valid].mean())

    @pytest.mark.parametrize("partial", [False, True])
    @pytest.mark.parametrize("beta", [0.0, 0.85, 1.0])
    def test_grad_matches_fd(self, rng, beta, partial):
        a = rng.random((6, 7, 3))
        b = a + rng.uniform(0.05, 0.2, a.shape) * rng.choice([-1, 1], a.shape)  # keep |diff| off its kink
        valid = rng.random((6, 7)) < 0.7 if partial else None
        _, g = photometric_loss(a, b, valid, beta, return_grad=True)
        num = central_difference(lambda x: photometric_loss(a, x, valid, beta), b)
        assert_grad_close(g, num)

    def test_no_valid_pixels(self):
        with pytest.raises(DegenerateInputError):
            photometric_loss(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3), bool))


class TestTemporal:
    def test_identity_flow_is_fixed_point(self, rng):
        img = rng.random((6, 8, 3))
        coords = pixel_grid(6, 8)
        assert temporal_loss(img, img, (coords, np.ones((6, 8), bool))) == pytest.approx(0.0, abs=1e-12)

    def test_shifted_source_is_fixed_point(self, rng):
        # source shifted one pixel right: target pixel u reads source u + 1
        src = rng.random((6, 9))
        tgt = src[:, 1:]
        coords = pixel_grid(6, 8) + [1.0, 0.0]
        assert temporal_loss(tgt, src, (coords, np.ones((6, 8), bool))) == pytest.approx(0.0, abs=1e-12)

    def test_coordinate_gradient(self, rng):
        src = ndimage.gaussian_filter(rng.random((10, 12)), 1.0)
        tgt = ndimage.gaussian_filter(rng.random((8, 9)), 1.0)
        coords = pixel_grid(8, 9) + 1.0 + rng.uniform(0.1, 0.9, (8, 9, 2))
        valid = np.ones((8, 9), bool)
        _, g = temporal_loss(tgt, src, (coords, valid), return_grad=True)
        num = central_difference(lambda c: temporal_loss(tgt, src, (c, valid)), coords)
        assert_grad_close(g, num)


class TestTV:
    def test_constant_is_zero(self):
        assert tv_loss(np.full((3, 4, 5), 1.7)) == 0.0

    def test_single_spike_closed_form(self):
        logits = np.full((3, 3, 3), -np.inf)
        logits[1, 1, 1] = np.inf  # opacity 1 at the center, 0 elsewhere
        edges = 3 * (2 * 3 * 3)
        assert tv_loss(logits, weight=1.0) == pytest.approx(6 / edges)

    def test_accepts_grid(self):
        g = VoxelGrid.filled((3, 3, 3), ((0, 0, 0), (1, 1, 1)), 2, opacity_logit=0.5)
        assert tv_loss(g) == 0.0

    def test_grad_matches_fd(self, rng):
        x = rng.normal(0, 2, (3, 4, 3))
        _, g = tv_loss(x, weight=0.3, return_grad=True)
        assert_grad_close(g, central_difference(lambda y: tv_loss(y, weight=0.3), x))


class TestSemantic:
    def test_confident_correct_is_zero(self):
        F = np.zeros((2, 3, 4))
        F[..., 2] = 1.0
        assert semantic_loss(F, np.full((2, 3), 2)) == pytest.approx(0.0, abs=1e-15)

    def test_closed_form(self):
        # A = 0.8 with F[gt] = 0.2: A * -log(0.25)
        F = np.array([[[0.2, 0.6]]])
        assert semantic_loss(F, np.array([[0]])) == pytest.approx(0.8 * np.log(4.0))

    def test_empty_render_contributes_nothing(self):
        F = np.zeros((2, 2, 3))
        F[0, 0] = [0.1, 0.1, 0.3]
        full = semantic_loss(F, np.zeros((2, 2), int))
        assert full == pytest.approx(0.5 * -np.log(0.2) / 4)

    def test_floor(self):
        F = np.array([[[0.0, 1.0]]])
        assert semantic_loss(F, np.array([[0]])) == pytest.approx(-np.log(PROB_FLOOR))

    def test_grad_matches_fd(self, rng):
        F = rng.uniform(0.05, 0.5, (4, 5, 3))
        labels = rng.integers(0, 3, (4, 5))
        valid = rng.random((4, 5)) < 0.8
        _, g = semantic_loss(F, labels, valid, return_grad=True)
        assert_grad_close(g, central_difference(lambda x: semantic_loss(x, labels, valid), F))


class TestDepthMetrics:
    def test_double_depth(self, rng):
        gt = rng.uniform(1, 30, (8, 8))
        m = depth_metrics(2 * gt, gt)
        assert m.abs_rel == 1.0 and m.median_rel == 1.0
        assert m.delta1 == m.delta2 == m.delta3 == 0.0
        assert m.sq_rel == pytest.approx(gt.mean())
        assert m.rmse == pytest.approx(np.sqrt((gt**2).mean()))
        assert m.rmse_log == pytest.approx(np.log(2.0))

    def test_perfect(self, rng):
        gt = rng.uniform(1, 30, (5, 5))
        m = depth_metrics(gt, gt)
        assert m.abs_rel == 0.0 and m.delta1 == 1.0 and m.count == 25

    def test_delta_thresholds_are_strict(self):
        m = depth_metrics(np.array([[1.25, 1.2]]), np.ones((1, 2)))
        assert m.delta1 == 0.5

    def test_gt_clamp(self):
        m = depth_metrics(np.array([[100.0]]), np.array([[200.0]]))
        assert m.abs_rel == pytest.approx(20 / 80)

    def test_mask_and_validity(self):
        pred = DepthMap(np.array([[1.0, 2.0, 0.0]]))
        gt = DepthMap(np.array([[1.0, 1.0, 1.0]]))
        assert depth_metrics(pred, gt).count == 2
        assert depth_metrics(pred, gt, mask=np.array([[True, False, True]])).abs_rel == 0.0

    def test_nothing_valid(self):
        with pytest.raises(DegenerateInputError):
            depth_metrics(np.zeros((2, 2)), np.ones((2, 2)))


class TestMIoU:
    @pytest.fixture
    def grid(self, rng):
        g = VoxelGrid.filled((4, 4, 3), ((0, 0, 0), (1, 1, 1)), 3)
        g.opacity_logits = np.where(rng.random(g.dims) < 0.5, 10.0, -10.0).astype(np.float32)
        g.semantic_logits = rng.normal(size=g.dims + (3,)).astype(np.float32)
        return g

    def test_self_is_one(self, grid):
        per, mean = miou(grid, grid)
        assert mean == 1.0 and np.isnan(per[0])

    def test_hand_counted(self):
        gt = VoxelGrid.filled((2, 2, 2), ((0, 0, 0), (1, 1, 1)), 3)
        pred = gt.copy()
        # gt: class 1 at 2 vertices; pred: class 1 at one of them plus one more
        for g, cells in ((gt, [(0, 0, 0), (0, 0, 1)]), (pred, [(0, 0, 0), (1, 1, 1)])):
            for c in cells:
                g.opacity_logits[c] = 10.0
                g.semantic_logits[c] = [-10, 10, -10]
        per, mean = miou(pred, gt)
        assert per[1] == pytest.approx(1 / 3) and np.isnan(per[2]) and mean == pytest.approx(1 / 3)

    def test_threshold_and_mask(self, grid):
        faint = grid.copy()
        faint.opacity_logits = np.where(grid.opacity_logits > 0, -1.5, -10.0).astype(np.float32)  # opacity ~0.18
        assert miou(faint, grid)[1] == 0.0 or np.isnan(miou(faint, grid)[1])
        assert miou(faint, grid, threshold=0.1)[1] == 1.0
        none = np.zeros(grid.dims, bool)
        assert np.isnan(miou(faint, grid, mask=none)[1])

    def test_dims_must_match(self, grid):
        with pytest.raises(ConfigurationError):
            miou(grid, VoxelGrid.filled((2, 2, 2), ((0, 0, 0), (1, 1, 1)), 3))


def test_loss_breakdown_total():
    b = LossBreakdown(temporal=1.0, cross=2.0, semantic=0.5, tv=0.25, depth=0.125)
    assert b.total == 3.875 and b.to_dict()["total"] == 3.875
