import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from recurseg import attention as at
from recurseg import autodiff as ad
from recurseg import losses as ls
from recurseg.params import ParamStore


def brute_force_max_weight(m):
    """Factorial enumeration over the zero-padded square matrix."""
    n_pred, n_gt = m.shape
    n = max(n_pred, n_gt)
    padded = np.zeros((n, n))
    padded[:n_pred, :n_gt] = m
    return max(
        sum(padded[i, j] for i, j in enumerate(perm))
        for perm in itertools.permutations(range(n))
    )


def make_denorm_box(cx, cy, dx, dy, sx=0.8, sy=0.8, gamma=50.0):
    c = ad.constant
    return at.DenormalizedBox(
        g_x=c(float(cx)), g_y=c(float(cy)),
        delta_x=c(float(dx)), delta_y=c(float(dy)),
        sigma_x=c(float(sx)), sigma_y=c(float(sy)),
        gamma=c(float(gamma)),
    )


class TestSoftIou:
    def test_identical_masks(self):
        m = ad.constant(np.array([[1.0, 0.0], [1.0, 1.0]]))
        assert_allclose(ls.soft_iou(m, m).item(), 1.0, atol=1e-7)

    def test_disjoint_masks(self):
        a = ad.constant(np.array([1.0, 1.0, 0.0, 0.0]))
        b = ad.constant(np.array([0.0, 0.0, 1.0, 1.0]))
        assert ls.soft_iou(a, b).item() == 0.0

    def test_hand_computed_third(self):
        a = ad.constant(np.array([1.0, 1.0, 0.0, 0.0]))
        b = ad.constant(np.array([0.0, 1.0, 1.0, 0.0]))
        assert_allclose(ls.soft_iou(a, b).item(), 1.0 / 3.0, rtol=1e-6)

    def test_both_empty_warns_and_returns_zero(self):
        z = ad.constant(np.zeros(4))
        with pytest.warns(UserWarning):
            out = ls.soft_iou(z, z)
        assert out.item() == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            ls.soft_iou(ad.constant(np.zeros(3)), ad.constant(np.zeros(4)))

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(0)
        with ad.using_dtype(np.float64):
            store = ParamStore()
            store.add("logits", rng.normal(size=(5, 5)))
            b = ad.constant(rng.uniform(0, 1, (5, 5)))

            def f(s):
                return ls.soft_iou(ad.sigmoid(s["logits"]), b)

            assert ad.grad_check(f, store).passed

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_bounds_and_binary_agreement(self, seed):
        rng = np.random.default_rng(seed)
        soft = rng.uniform(0, 1, (6, 6))
        other = rng.uniform(0, 1, (6, 6))
        v = ls.soft_iou(ad.constant(soft), ad.constant(other)).item()
        assert 0.0 <= v <= 1.0
        a = (rng.uniform(0, 1, (6, 6)) > 0.5).astype(float)
        b = (rng.uniform(0, 1, (6, 6)) > 0.5).astype(float)
        inter = np.logical_and(a, b).sum()
        union = np.logical_or(a, b).sum()
        exact = inter / union if union else 0.0
        got = ls.soft_iou(ad.constant(a), ad.constant(b)).item()
        assert_allclose(got, exact, atol=1e-6)


class TestHungarian:
    def test_identity_dominant(self):
        m = ls.hungarian(np.eye(3))
        assert m.assignment == {0: 0, 1: 1, 2: 2}
        assert m.total_weight == 3.0

    def test_two_by_two_antidiagonal(self):
        m = ls.hungarian(np.array([[0.1, 0.9], [0.8, 0.2]]))
        assert m.assignment == {0: 1, 1: 0}
        assert_allclose(m.total_weight, 1.7, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(60))
    def test_square_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.uniform(0, 1, (7, 7))
        got = ls.hungarian(w)
        assert_allclose(got.total_weight, brute_force_max_weight(w), rtol=1e-10)
        assert len(got.assignment) == 7
        assert len(set(got.assignment.values())) == 7

    @pytest.mark.parametrize("shape", [(5, 3), (3, 5), (1, 4), (6, 1)])
    def test_rectangular_matches_brute_force(self, shape):
        rng = np.random.default_rng(hash(shape) % 2**32)
        w = rng.uniform(0, 1, shape)
        got = ls.hungarian(w)
        assert_allclose(got.total_weight, brute_force_max_weight(w), rtol=1e-10)
        assert len(got.assignment) == min(shape)
        assert len(set(got.assignment.values())) == min(shape)

    def test_empty_matrix(self):
        m = ls.hungarian(np.zeros((0, 3)))
        assert m.assignment == {} and m.total_weight == 0.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ls.hungarian(np.array([[np.nan]]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_beats_random_injective_maps(self, seed):
        rng = np.random.default_rng(seed)
        n_pred, n_gt = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        w = rng.uniform(0, 1, (n_pred, n_gt))
        best = ls.hungarian(w).total_weight
        k = min(n_pred, n_gt)
        for _ in range(40):
            rows = rng.permutation(n_pred)[:k]
            cols = rng.permutation(n_gt)[:k]
            assert best >= sum(w[i, j] for i, j in zip(rows, cols)) - 1e-9


class TestMatchingIouLoss:
    def _masks(self, arrays):
        return [ad.constant(a.reshape(*a.shape, 1)) for a in arrays]

    def test_perfect_prediction_any_order(self):
        a = np.zeros((6, 6)); a[:3, :3] = 1.0
        b = np.zeros((6, 6)); b[4:, 4:] = 1.0
        loss = ls.matching_iou_loss(self._masks([b, a]), [a, b])
        assert_allclose(loss.item(), -1.0, atol=1e-6)

    def test_disjoint_predictions(self):
        a = np.zeros((4, 4)); a[0, 0] = 1.0
        p = np.zeros((4, 4)); p[3, 3] = 1.0
        loss = ls.matching_iou_loss(self._masks([p]), [a])
        assert loss.item() == 0.0

    def test_no_ground_truth_gives_zero(self):
        p = np.ones((4, 4))
        assert ls.matching_iou_loss(self._masks([p]), []).item() == 0.0

    def test_extra_predictions_unpenalized_directly(self):
        gt = np.zeros((5, 5)); gt[1:4, 1:4] = 1.0
        junk = np.zeros((5, 5)); junk[0, 4] = 1.0
        only = ls.matching_iou_loss(self._masks([gt]), [gt]).item()
        extra = ls.matching_iou_loss(self._masks([gt, junk]), [gt]).item()
        assert_allclose(only, extra, atol=1e-7)
        assert_allclose(only, -1.0, atol=1e-6)

    def test_gt_permutation_leaves_loss_and_grads_unchanged(self):
        rng = np.random.default_rng(2)
        gts = []
        for k in range(3):
            g = np.zeros((8, 8)); g[2 * k : 2 * k + 2, 1:6] = 1.0
            gts.append(g)
        with ad.using_dtype(np.float64):
            def run(order):
                logits = [ad.parameter(rng_fixed.copy()) for rng_fixed in seeds]
                preds = [ad.sigmoid(l) for l in logits]
                loss = ls.matching_iou_loss(preds, [gts[i] for i in order])
                ad.backward(loss)
                return loss.item(), [l.grad.tobytes() for l in logits]

            seeds = [rng.normal(size=(8, 8, 1)) + 3 * gts[k].reshape(8, 8, 1) for k in range(3)]
            v1, g1 = run([0, 1, 2])
            v2, g2 = run([2, 0, 1])
        assert v1 == v2
        assert g1 == g2


class TestPadBox:
    def test_factor_one_is_tight(self):
        m = np.zeros((16, 16)); m[3:7, 5:10] = 1.0
        assert ls.pad_box(m, 1.0) == (2.5, 4.5, 6.5, 9.5)

    def test_unit_pixel_scales_about_center(self):
        m = np.zeros((32, 32)); m[8, 8] = 1.0
        y0, x0, y1, x1 = ls.pad_box(m, 1.2)
        assert_allclose([y0, x0, y1, x1], [7.4, 7.4, 8.6, 8.6], atol=1e-12)
        assert_allclose([(y0 + y1) / 2, (x0 + x1) / 2], [8.0, 8.0], atol=1e-12)
        assert_allclose(y1 - y0, 1.2, atol=1e-12)

    def test_corner_box_clipped(self):
        m = np.zeros((16, 16)); m[0:4, 0:4] = 1.0
        y0, x0, y1, x1 = ls.pad_box(m, 1.2)
        assert y0 == -0.5 and x0 == -0.5
        assert_allclose([y1, x1], [1.5 + 2.4, 1.5 + 2.4], atol=1e-9)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            ls.pad_box(np.zeros((8, 8)))

    def test_render_factor_one_reproduces_mask_box(self):
        m = np.zeros((12, 12)); m[2:5, 7:11] = 1.0
        out = ls.render_box(ls.pad_box(m, 1.0), 12, 12)
        expect = np.zeros((12, 12)); expect[2:5, 7:11] = 1.0
        assert np.array_equal(out, expect)


class TestSoftBoxIouLoss:
    GEOM = at.PatchGeometry(16, 16)

    def test_matched_full_image_box_approaches_minus_one(self):
        with ad.using_dtype(np.float64):
            gt = np.zeros((32, 32)); gt[2:30, 2:30] = 1.0
            y0, x0, y1, x1 = ls.pad_box(gt, 1.2)
            box = make_denorm_box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)
            m = ls.hungarian(np.array([[1.0]]))
            loss = ls.soft_box_iou_loss([box], [gt], m, self.GEOM, 32, 32, ls.LossConfig())
        assert loss.item() < -0.99

    def test_matched_interior_box_scores_well(self):
        with ad.using_dtype(np.float64):
            gt = np.zeros((32, 32)); gt[10:18, 8:20] = 1.0
            y0, x0, y1, x1 = ls.pad_box(gt, 1.2)
            box = make_denorm_box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, 0.4, 0.4)
            m = ls.hungarian(np.array([[1.0]]))
            loss = ls.soft_box_iou_loss([box], [gt], m, at.PatchGeometry(8, 8), 32, 32, ls.LossConfig())
        assert loss.item() < -0.8

    def test_disjoint_boxes_still_carry_gradient(self):
        gt = np.zeros((32, 32)); gt[24:30, 24:30] = 1.0
        with ad.using_dtype(np.float64):
            store = ParamStore()
            store.add("g_tilde_x", -0.6)  # box far left of the gt at lower right

            def f(s):
                b = at.DenormalizedBox(
                    g_x=(s["g_tilde_x"] + 1.0) * 16.0, g_y=ad.constant(6.0),
                    delta_x=ad.constant(6.0), delta_y=ad.constant(6.0),
                    sigma_x=ad.constant(1.0), sigma_y=ad.constant(1.0),
                    gamma=ad.constant(10.0),
                )
                m = ls.hungarian(np.array([[1.0]]))
                return ls.soft_box_iou_loss([b], [gt], m, self.GEOM, 32, 32, ls.LossConfig())

            report = ad.grad_check(f, store)
            ad.backward(f(store))
        assert report.passed, str(report)
        assert abs(float(store["g_tilde_x"].grad)) > 1e-8

    def test_zero_gamma_is_position_independent(self):
        gt = np.zeros((16, 16)); gt[4:9, 4:9] = 1.0
        m = ls.hungarian(np.array([[1.0]]))
        with ad.using_dtype(np.float64):
            losses = []
            for cx in (3.0, 8.0, 13.0):
                b = make_denorm_box(cx, 8.0, 5.0, 5.0, gamma=0.0)
                losses.append(
                    ls.soft_box_iou_loss([b], [gt], m, at.PatchGeometry(4, 4), 16, 16, ls.LossConfig()).item()
                )
        assert losses[0] == losses[1] == losses[2]


class TestMonotonicScoreLoss:
    def _loss(self, values, targets):
        scores = [ad.constant(v) for v in values]
        return ls.monotonic_score_loss(scores, np.array(targets)).item()

    def test_perfect_scores_near_zero(self):
        eps = 1e-7
        assert self._loss([1.0 - eps, eps], [1, 0]) < 1e-5

    def test_hand_computed_log_two(self):
        assert_allclose(self._loss([0.5, 0.5], [1, 0]), math.log(2.0), rtol=1e-6)

    def test_non_monotone_scores_cost_more_than_sorted(self):
        messy = self._loss([0.9, 0.2, 0.8], [1, 1, 0])
        tidy = self._loss([0.9, 0.8, 0.2], [1, 1, 0])
        assert messy > tidy

    @pytest.mark.parametrize("t_len", [2, 3, 4, 5])
    def test_sorted_descending_minimizes(self, t_len):
        rng = np.random.default_rng(t_len)
        grid = np.array([0.1, 0.25, 0.4, 0.6, 0.75, 0.9])
        for _ in range(6):
            values = rng.choice(grid, size=t_len, replace=True)
            n_pos = int(rng.integers(0, t_len + 1))
            targets = [1] * n_pos + [0] * (t_len - n_pos)
            best = self._loss(sorted(values, reverse=True), targets)
            for perm in itertools.permutations(values):
                assert self._loss(list(perm), targets) >= best - 1e-9

    def test_gradient_routes_through_extrema(self):
        with ad.using_dtype(np.float64):
            store = ParamStore()
            store.add("raw", np.array([1.5, -0.8, 0.6]))

            def f(s):
                scores = [ad.sigmoid(s["raw"][i]) for i in range(3)]
                return ls.monotonic_score_loss(scores, np.array([1, 1, 0]))

            assert ad.grad_check(f, store).passed

    def test_length_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            ls.monotonic_score_loss([ad.constant(0.5)], np.array([1, 0]))

    def test_empty_sequence(self):
        assert ls.monotonic_score_loss([], np.array([], dtype=int)).item() == 0.0


class TestJointLoss:
    def _scene(self):
        gt1 = np.zeros((16, 16)); gt1[2:7, 2:7] = 1.0
        gt2 = np.zeros((16, 16)); gt2[9:14, 8:15] = 1.0
        return [gt1, gt2]

    def _boxes_for(self, gts):
        boxes = []
        for g in gts:
            y0, x0, y1, x1 = ls.pad_box(g, 1.2)
            boxes.append(make_denorm_box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, 0.8, 0.8))
        return boxes

    def test_zero_lambdas_reduce_to_matching_loss(self):
        gts = self._scene()
        preds = [ad.constant(g.reshape(16, 16, 1)) for g in gts]
        scores = [ad.constant(0.9), ad.constant(0.8), ad.constant(0.1)]
        cfg = ls.LossConfig(lambda_b=0.0, lambda_s=0.0)
        with ad.using_dtype(np.float64):
            total, parts, matching = ls.joint_loss(
                preds, self._boxes_for(gts) + [self._boxes_for(gts)[0]], scores, gts,
                cfg, at.PatchGeometry(16, 16), 16, 16,
            )
            direct = ls.matching_iou_loss(preds, gts, matching)
        assert_allclose(total.item(), direct.item(), atol=1e-12)

    def test_perfect_episode_near_minus_two(self):
        with ad.using_dtype(np.float64):
            gt = np.zeros((32, 32)); gt[2:30, 2:30] = 1.0
            preds = [ad.constant(gt.reshape(32, 32, 1))]
            scores = [ad.constant(1.0 - 1e-7)]
            total, parts, _ = ls.joint_loss(
                preds, self._boxes_for([gt]), scores, [gt],
                ls.LossConfig(), at.PatchGeometry(16, 16), 32, 32,
            )
        assert_allclose(parts["seg_iou"].item(), -1.0, atol=1e-6)
        assert parts["box_iou"].item() < -0.99
        assert parts["score"].item() < 1e-5
        assert total.item() < -1.98

    def test_matching_is_shared_and_targets_follow_it(self):
        gts = self._scene()
        junk = np.zeros((16, 16)); junk[0, 15] = 1.0
        preds = [ad.constant(g.reshape(16, 16, 1)) for g in [gts[1], junk, gts[0]]]
        scores = [ad.constant(0.8)] * 3
        with ad.using_dtype(np.float64):
            _, _, matching = ls.joint_loss(
                preds, self._boxes_for([gts[1], gts[1], gts[0]]), scores, gts,
                ls.LossConfig(), at.PatchGeometry(8, 8), 16, 16,
            )
        assert matching.assignment == {0: 1, 2: 0}
        assert list(ls.score_targets(matching, 3)) == [1, 0, 1]

    def test_joint_gradient_passes_finite_differences(self):
        rng = np.random.default_rng(11)
        gts = self._scene()
        with ad.using_dtype(np.float64):
            store = ParamStore()
            for t in range(3):
                store.add(f"mask{t}", rng.normal(size=(16, 16, 1)) + 2 * (gts[t % 2].reshape(16, 16, 1) - 0.5))
                store.add(f"box{t}", np.array([0.1 * t - 0.2, 0.05, math.log(0.4), math.log(0.35), 0.0, 0.0, 8.0]))
                store.add(f"score{t}", 1.0 - 0.8 * t)

            def f(s):
                preds, boxes, scores = [], [], []
                for t in range(3):
                    preds.append(ad.sigmoid(s[f"mask{t}"]))
                    raw = at.BoxParams.from_vector(s[f"box{t}"])
                    boxes.append(at.denormalize_box(raw, 16, 16))
                    scores.append(ad.sigmoid(s[f"score{t}"]))
                total, _, _ = ls.joint_loss(
                    preds, boxes, scores, gts, ls.LossConfig(), at.PatchGeometry(6, 6), 16, 16
                )
                return total

            report = ad.grad_check(f, store, eps=1e-6, tol=1e-4)
        assert report.passed, str(report)

    def test_lambda_validation(self):
        with pytest.raises(ValueError):
            ls.LossConfig(lambda_b=-1.0)
