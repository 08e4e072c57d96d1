"""Loss-function tests: focal/L1 against plain-numpy references, target rendering,
and the reconstruction objective."""

import math

import numpy as np
import pytest

import pillarptq.autodiff as ad
from pillarptq.autodiff import Tensor
from pillarptq.detector import Box3D, DetectorOutput, GridConfig, REG_CHANNELS
from pillarptq.losses import (
    HEATMAP_CLAMP,
    LossWeights,
    PseudoLabels,
    draw_gaussian,
    focal_loss,
    gaussian_radius,
    l1_reg_loss,
    local_recon_loss,
    make_pseudo_labels,
    pseudo_label_loss,
    render_targets,
    total_loss,
)


def numpy_focal(pred: np.ndarray, target: np.ndarray) -> float:
    """Independent focal-loss reference."""
    p = np.clip(pred, HEATMAP_CLAMP, 1 - HEATMAP_CLAMP)
    pos = target == 1.0
    n_pos = max(1.0, float(pos.sum()))
    pos_term = ((1 - p[pos]) ** 2 * np.log(p[pos])).sum()
    neg = ~pos
    neg_term = ((1 - target[neg]) ** 4 * p[neg] ** 2 * np.log(1 - p[neg])).sum()
    return -(pos_term + neg_term) / n_pos


class TestLossWeights:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(alpha_reg=-0.1)
        with pytest.raises(ValueError):
            LossWeights(lambda2=-1.0)


class TestGaussianRadius:
    @pytest.mark.parametrize("d", [4.0, 8.0, 40.0])
    @pytest.mark.parametrize("overlap", [0.3, 0.5, 0.7])
    def test_diagonal_shift_by_radius_keeps_overlap(self, d, overlap):
        r = gaussian_radius(d, d, overlap)
        inter = (d - r) ** 2
        iou = inter / (2 * d * d - inter)
        assert iou >= overlap

    def test_monotone_in_overlap_and_scale(self):
        assert gaussian_radius(10, 10, 0.7) < gaussian_radius(10, 10, 0.3)
        assert gaussian_radius(20, 20, 0.3) == pytest.approx(
            2 * gaussian_radius(10, 10, 0.3), rel=1e-9
        )

    def test_never_negative(self):
        assert gaussian_radius(0.5, 0.5, 0.99) >= 0.0


class TestDrawGaussian:
    def test_peak_and_symmetry(self):
        hm = np.zeros((11, 11), np.float32)
        draw_gaussian(hm, 5, 5, radius=3)
        assert hm[5, 5] == pytest.approx(1.0)
        np.testing.assert_allclose(hm, hm[::-1, :], atol=1e-7)
        np.testing.assert_allclose(hm, hm[:, ::-1], atol=1e-7)
        assert hm[5, 1] == 0.0  # outside the radius window

    def test_max_merge_not_sum(self):
        hm = np.zeros((11, 11), np.float32)
        draw_gaussian(hm, 5, 5, radius=2)
        before = hm.copy()
        draw_gaussian(hm, 5, 5, radius=2)
        np.testing.assert_array_equal(hm, before)

    def test_clips_at_borders(self):
        hm = np.zeros((8, 8), np.float32)
        draw_gaussian(hm, 0, 0, radius=3)
        assert hm[0, 0] == pytest.approx(1.0)
        draw_gaussian(hm, -10, -10, radius=2)  # entirely off-map: no-op


class TestRenderTargets:
    def test_single_box_hand_computed(self, grid_cfg):
        b = Box3D(x=1.3, y=-2.2, z=0.4, h=1.5, w=2.0, l=4.0, yaw=0.3, cls=1)
        lab = render_targets([b], grid_cfg, out_stride=2)
        assert lab.heatmap_target.shape == (2, 64, 64)
        ix = int((1.3 + 32) // 1.0)
        iy = int((-2.2 + 32) // 1.0)
        assert lab.heatmap_target[1, iy, ix] == 1.0
        assert lab.heatmap_target[0].max() == 0.0  # other class untouched
        assert lab.reg_mask[iy, ix]
        cx, cy = -32 + (ix + 0.5), -32 + (iy + 0.5)
        want = [
            1.3 - cx, -2.2 - cy, 0.4,
            math.log(1.5), math.log(2.0), math.log(4.0),
            math.sin(0.3), math.cos(0.3),
        ]
        np.testing.assert_allclose(lab.reg_target[:, iy, ix], want, rtol=1e-6)
        assert lab.boxes == [b]

    def test_off_grid_and_bad_class_skipped(self, grid_cfg):
        far = Box3D(500.0, 0, 0, 1, 1, 1, 0, 0)
        badc = Box3D(0, 0, 0, 1, 1, 1, 0, cls=7)
        lab = render_targets([far, badc], grid_cfg)
        assert not lab.reg_mask.any() and lab.boxes == []

    def test_cell_collision_keeps_higher_score(self, grid_cfg):
        hi = Box3D(0.2, 0.2, 0, 1, 1, 1.0, 0, 0, score=0.9)
        lo = Box3D(0.3, 0.3, 0, 1, 1, 3.0, 0, 0, score=0.5)
        lab = render_targets([lo, hi], grid_cfg)
        assert lab.boxes == [hi]
        iy, ix = np.argwhere(lab.reg_mask)[0]
        assert lab.reg_target[5, iy, ix] == pytest.approx(0.0)  # log l of the winner


class TestFocalLoss:
    def test_matches_numpy_reference(self, rng):
        pred = rng.uniform(0.01, 0.99, (2, 16, 16)).astype(np.float32)
        target = np.zeros((2, 16, 16), np.float32)
        target[0, 3, 4] = 1.0
        target[1, 8, 8] = 1.0
        target[0, 3, 5] = 0.6  # soft neighborhood
        got = float(focal_loss(Tensor(pred), target).data)
        assert got == pytest.approx(numpy_focal(pred, target), rel=1e-5)

    def test_perfect_prediction_is_near_zero(self):
        target = np.zeros((1, 8, 8), np.float32)
        target[0, 2, 2] = 1.0
        pred = np.where(target == 1.0, 1.0 - HEATMAP_CLAMP, HEATMAP_CLAMP)
        assert float(focal_loss(Tensor(pred), target).data) < 1e-5

    def test_gradient_pushes_positives_up(self):
        target = np.zeros((1, 4, 4), np.float32)
        target[0, 1, 1] = 1.0
        p = Tensor(np.full((1, 4, 4), 0.3, np.float32), requires_grad=True)
        focal_loss(p, target).backward()
        assert p.grad[0, 1, 1] < 0  # raising p at the positive lowers the loss
        assert p.grad[0, 0, 0] > 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            focal_loss(Tensor(np.zeros((1, 4, 4))), np.zeros((1, 5, 5)))


class TestL1RegLoss:
    def test_hand_computed(self):
        pred = np.zeros((2, 2, 2), np.float32)
        pred[:, 0, 0] = [1.0, -2.0]
        target = np.zeros((2, 2, 2), np.float32)
        target[:, 0, 0] = [0.5, 0.0]
        mask = np.zeros((2, 2), bool)
        mask[0, 0] = True
        got = float(l1_reg_loss(Tensor(pred), target, mask).data)
        assert got == pytest.approx((0.5 + 2.0) / (1 * 2))  # sum / (n_pos * channels)

    def test_empty_mask_is_exact_zero(self, rng):
        pred = Tensor(rng.normal(size=(8, 4, 4)).astype(np.float32))
        out = l1_reg_loss(pred, np.zeros((8, 4, 4), np.float32), np.zeros((4, 4), bool))
        assert float(out.data) == 0.0

    def test_batched_matches_mean_of_singles(self, rng):
        pred = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        target = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        mask = rng.random((2, 4, 4)) < 0.4
        batched = float(l1_reg_loss(Tensor(pred), target, mask).data)
        total_abs = sum(
            np.abs(pred[i] - target[i])[:, mask[i]].sum() for i in range(2)
        )
        assert batched == pytest.approx(total_abs / (mask.sum() * 3), rel=1e-5)

    def test_mask_shape_validated(self):
        with pytest.raises(ValueError):
            l1_reg_loss(
                Tensor(np.zeros((2, 4, 4))), np.zeros((2, 4, 4)), np.zeros((5, 5), bool)
            )


class TestCompositeLosses:
    def test_pseudo_label_loss_combines_terms(self, grid_cfg, rng):
        hm = rng.uniform(0.05, 0.95, (2, 64, 64)).astype(np.float32)
        reg = rng.normal(size=(REG_CHANNELS, 64, 64)).astype(np.float32)
        lab = render_targets([Box3D(1, 1, 0, 1, 2, 4, 0.2, 0)], grid_cfg)
        w = LossWeights(alpha_reg=0.25)
        got = float(pseudo_label_loss(DetectorOutput(Tensor(hm), Tensor(reg)), lab, w).data)
        want = float(focal_loss(Tensor(hm), lab.heatmap_target).data) + 0.25 * float(
            l1_reg_loss(Tensor(reg), lab.reg_target, lab.reg_mask).data
        )
        assert got == pytest.approx(want, rel=1e-6)

    def test_pseudo_label_loss_accepts_batches(self, grid_cfg, rng):
        lab = render_targets([Box3D(1, 1, 0, 1, 2, 4, 0.2, 0)], grid_cfg)
        hm = rng.uniform(0.05, 0.95, (1, 2, 64, 64)).astype(np.float32)
        reg = rng.normal(size=(1, REG_CHANNELS, 64, 64)).astype(np.float32)
        batched = DetectorOutput(Tensor(hm), Tensor(reg))
        single = DetectorOutput(Tensor(hm[0]), Tensor(reg[0]))
        a = float(pseudo_label_loss(batched, [lab], LossWeights()).data)
        b = float(pseudo_label_loss(batched, lab, LossWeights()).data)  # auto-expand
        c = float(pseudo_label_loss(single, lab, LossWeights()).data)
        assert a == pytest.approx(b, rel=1e-6)
        assert a == pytest.approx(c, rel=1e-6)

    def test_total_loss_weighting(self):
        w = LossWeights(lambda1=2.0, lambda2=0.5)
        out = total_loss(Tensor(np.asarray(3.0)), Tensor(np.asarray(4.0)), w)
        assert float(out.data) == pytest.approx(8.0)


class TestLocalReconLoss:
    def test_zero_when_weights_identical(self, rng):
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        out = local_recon_loss(w, Tensor(w), Tensor(x), stride=1, padding=1)
        assert float(out.data) == 0.0

    def test_matches_direct_frobenius_gap(self, rng):
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        w_hat = w + rng.normal(0, 0.01, w.shape).astype(np.float32)
        x = rng.normal(size=(3, 3, 6, 6)).astype(np.float32)
        got = float(local_recon_loss(w, Tensor(w_hat), Tensor(x), 1, 1).data)
        a = ad.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
        b = ad.conv2d(Tensor(x), Tensor(w_hat), None, 1, 1).data
        assert got == pytest.approx(((a - b) ** 2).sum() / 3, rel=1e-4)

    def test_gradient_reaches_quantized_weight_only(self, rng):
        w = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
        w_hat = Tensor(w + 0.01, requires_grad=True)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)).astype(np.float32), requires_grad=True)
        local_recon_loss(w, w_hat, x, 1, 1).backward()
        assert w_hat.grad is not None and np.abs(w_hat.grad).sum() > 0

    def test_shape_validation(self, rng):
        w = np.zeros((2, 2, 3, 3))
        with pytest.raises(ValueError):
            local_recon_loss(w, Tensor(np.zeros((2, 2, 1, 1))), Tensor(np.zeros((1, 2, 4, 4))))
        with pytest.raises(ValueError):
            local_recon_loss(w, Tensor(w), Tensor(np.zeros((1, 3, 4, 4))))


class TestMakePseudoLabels:
    def test_detections_become_soft_targets(self, grid_cfg):
        hm = np.zeros((2, 64, 64))
        reg = np.zeros((REG_CHANNELS, 64, 64))
        hm[0, 10, 12] = 0.8
        reg[3:6, 10, 12] = math.log(2.0)
        lab = make_pseudo_labels(DetectorOutput(hm, reg), grid_cfg)
        assert len(lab.boxes) == 1
        assert lab.heatmap_target[0].max() == 1.0
        assert lab.reg_mask.sum() == 1

    def test_score_floor_empties_targets(self, grid_cfg):
        hm = np.full((2, 64, 64), 0.05)
        lab = make_pseudo_labels(DetectorOutput(hm, np.zeros((REG_CHANNELS, 64, 64))), grid_cfg)
        assert lab.boxes == [] and not lab.reg_mask.any()
