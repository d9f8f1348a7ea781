import math

import numpy as np
import pytest

from polymap.geometry import BBox, Polygon
from polymap.polyloss import (
    FocalParams,
    HeatmapPair,
    LossWeights,
    PredDistSeq,
    VertexTokenSeq,
    align_inverse,
    align_shift,
    bbox_l1_loss,
    bbox_l1_with_grad,
    bidirectional_loss,
    cls_loss,
    cls_loss_with_grad,
    encode_gt_maps,
    encode_gt_sequence,
    exhaustive_alignment_loss,
    focal_map_loss,
    no_vertex_index,
    search_reference,
    total_loss,
)
from polymap.selftest import naive_bidirectional_loss, naive_exhaustive_loss

G = 5
V = G * G + 1
NOV = no_vertex_index(G)


def one_hot_rows(tokens, vocab=V, smooth=False):
    rows = np.zeros((len(tokens), vocab))
    if smooth:
        rows[:] = 1e-7 / (vocab - 1)
        for i, t in enumerate(tokens):
            rows[i, t] = 1.0 - 1e-7
    else:
        for i, t in enumerate(tokens):
            rows[i, t] = 1.0
    return PredDistSeq(rows)


def random_gt(rng, m, k=None, grid=G, distinct=False):
    if k is None:
        k = rng.randint(1, m)
    if distinct:
        cells = rng.choice(grid * grid, size=k, replace=False)
    else:
        cells = rng.randint(0, grid * grid, size=k)
        for i in range(1, k):
            while cells[i] == cells[i - 1] or (i == k - 1 and cells[i] == cells[0] and k > 1):
                cells[i] = rng.randint(0, grid * grid)
    tokens = tuple(int(c) for c in cells) + (no_vertex_index(grid),) * (m - k)
    return VertexTokenSeq(tokens=tokens, valid_count=k, grid_size=grid)


def random_pred(rng, m, vocab=V):
    rows = rng.gamma(1.0, 1.0, size=(m, vocab)) + 1e-4
    rows /= rows.sum(axis=1, keepdims=True)
    return PredDistSeq(rows)


class TestTypes:
    def test_token_seq_validation(self):
        with pytest.raises(ValueError):
            VertexTokenSeq(tokens=(0, 1, NOV, 3), valid_count=2, grid_size=G)
        with pytest.raises(ValueError):
            VertexTokenSeq(tokens=(NOV, NOV), valid_count=1, grid_size=G)

    def test_dist_seq_validation(self):
        bad = np.full((2, V), 1.0 / V)
        bad[0, 0] += 1e-6
        with pytest.raises(ValueError):
            PredDistSeq(bad)
        with pytest.raises(ValueError):
            PredDistSeq(np.ones((2, 7)) / 7)  # 7 is not G*G+1

    def test_focal_params_validation(self):
        with pytest.raises(ValueError):
            FocalParams(alpha=0.0)
        with pytest.raises(ValueError):
            FocalParams(gamma=-1.0)


class TestEncodeSequence:
    def test_square_at_crop_corners(self):
        crop = BBox.from_xywh(10, 20, 40, 40)
        p = Polygon.from_points([(10, 20), (50, 20), (50, 60), (10, 60)])
        seq = encode_gt_sequence(p, 20, 8, crop)
        assert seq.valid_count == 4
        # (row, col) cells: (0,0), (0,19), (19,19), (19,0)
        assert seq.tokens[:4] == (0, 19, 19 * 20 + 19, 19 * 20)
        assert all(t == 400 for t in seq.tokens[4:])

    def test_adjacent_vertices_share_cell_collapse(self):
        crop = BBox.from_xywh(0, 0, 100, 100)
        p = Polygon.from_points([(1, 1), (2, 2), (90, 1), (90, 90)])
        seq = encode_gt_sequence(p, 20, 8, crop)
        assert seq.valid_count == 3

    def test_too_many_vertices(self):
        crop = BBox.from_xywh(0, 0, 10, 10)
        p = Polygon.from_points([(0, 0), (10, 0), (10, 10), (5, 12), (0, 10)])
        with pytest.raises(ValueError):
            encode_gt_sequence(p, 20, 4, crop)

    def test_gt_maps_mark_vertices_and_edges(self):
        crop = BBox.from_xywh(0, 0, 10, 10)
        p = Polygon.from_points([(0, 0), (10, 0), (10, 10), (0, 10)])
        vmap, emap = encode_gt_maps(p, 10, crop)
        assert vmap[0, 0] == 1.0 and vmap[0, 9] == 1.0 and vmap[9, 9] == 1.0
        assert emap[0, :].all() and emap[:, 0].all()  # boundary rows covered
        assert emap[5, 5] == 0.0  # interior untouched


class TestSearchReference:
    def test_perfect_prediction(self):
        gt = random_gt(np.random.RandomState(0), 8, k=5, distinct=True)
        pred = one_hot_rows(gt.tokens)
        assert search_reference(pred, gt.tokens[0], gt.valid_count) == 0

    def test_cyclic_shift_found(self):
        tokens = (3, 7, 12, 21, NOV, NOV)
        rotated = (12, 21, 3, 7, NOV, NOV)
        pred = one_hot_rows(rotated)
        assert search_reference(pred, 3, 4) == 2

    def test_matches_linear_scan_oracle(self):
        rng = np.random.RandomState(42)
        for _ in range(30):
            pred = random_pred(rng, 6)
            gt_first = int(rng.randint(0, G * G))
            k = int(rng.randint(1, 7))
            got = search_reference(pred, gt_first, k)
            # independent scan
            target = (gt_first % G + 0.5, gt_first // G + 0.5)
            best, best_d = 0, math.inf
            for i in range(k):
                arg = int(np.argmax(pred.dists[i]))
                if arg == NOV:
                    continue
                c = (arg % G + 0.5, arg // G + 0.5)
                d = math.hypot(c[0] - target[0], c[1] - target[1])
                if d < best_d:
                    best, best_d = i, d
            assert got == best

    def test_k_zero_rejected(self):
        pred = random_pred(np.random.RandomState(1), 4)
        with pytest.raises(ValueError):
            search_reference(pred, 0, 0)


class TestAlignment:
    def test_shift_zero_identity(self):
        pred = random_pred(np.random.RandomState(2), 6)
        out = align_shift(pred, 0, 4)
        assert np.array_equal(out.dists, pred.dists)

    def test_shift_by_one(self):
        pred = random_pred(np.random.RandomState(3), 6)
        out = align_shift(pred, 1, 4)
        assert np.array_equal(out.dists[:4], pred.dists[[1, 2, 3, 0]])
        assert np.array_equal(out.dists[4:], pred.dists[4:])

    def test_shift_group_property(self):
        pred = random_pred(np.random.RandomState(4), 7)
        k, t = 5, 2
        back = align_shift(align_shift(pred, t, k), k - t, k)
        assert np.allclose(back.dists, pred.dists)

    def test_inverse_small_k_identity(self):
        pred = random_pred(np.random.RandomState(5), 5)
        assert np.array_equal(align_inverse(pred, 2).dists, pred.dists)

    def test_inverse_reverses_tail(self):
        pred = random_pred(np.random.RandomState(6), 6)
        out = align_inverse(pred, 4)
        assert np.array_equal(out.dists[:4], pred.dists[[0, 3, 2, 1]])

    def test_inverse_involution(self):
        pred = random_pred(np.random.RandomState(7), 8)
        twice = align_inverse(align_inverse(pred, 6), 6)
        assert np.array_equal(twice.dists, pred.dists)


class TestBidirectionalLoss:
    def test_perfect_prediction_near_zero(self):
        rng = np.random.RandomState(10)
        gt = random_gt(rng, 8, k=5, distinct=True)
        pred = one_hot_rows(gt.tokens, smooth=True)
        loss, _ = bidirectional_loss(gt, pred)
        assert loss < 1e-6

    def test_reflection_same_loss(self):
        rng = np.random.RandomState(11)
        gt = random_gt(rng, 8, k=6, distinct=True)
        pred = one_hot_rows(gt.tokens, smooth=True)
        reflected = align_inverse(pred, gt.valid_count)
        base, _ = bidirectional_loss(gt, pred)
        refl, _ = bidirectional_loss(gt, reflected)
        assert refl == pytest.approx(base, abs=1e-15)
        assert refl < 1e-6

    def test_matches_naive_oracle(self):
        rng = np.random.RandomState(12)
        for _ in range(50):
            m = int(rng.randint(3, 11))
            k = int(rng.randint(1, min(m, 8) + 1))
            gt = random_gt(rng, m, k=k)
            pred = random_pred(rng, m)
            got, _ = bidirectional_loss(gt, pred)
            want = naive_bidirectional_loss(
                list(gt.tokens), gt.valid_count, pred.dists.tolist(), G
            )
            assert got == pytest.approx(want, abs=1e-12)

    def test_rotation_and_reflection_invariance_hard_one_hot(self):
        rng = np.random.RandomState(13)
        for _ in range(10):
            k = int(rng.randint(3, 9))
            gt = random_gt(rng, 10, k=k, distinct=True)
            base = one_hot_rows(gt.tokens)
            for r in range(k):
                rotated = align_shift(base, r, k)
                loss, _ = bidirectional_loss(gt, rotated)
                assert loss < 1e-6
                loss, _ = bidirectional_loss(gt, align_inverse(rotated, k))
                assert loss < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.RandomState(14)
        eps = 1e-5
        for _ in range(5):
            m = 6
            gt = random_gt(rng, m, k=4, distinct=True)
            dists = rng.gamma(2.0, 1.0, size=(m, V)) + 0.05
            dists /= dists.sum(axis=1, keepdims=True)
            from polymap.polyloss import _bidirectional_arrays

            loss, grad = _bidirectional_arrays(gt.tokens, gt.valid_count, dists, G)
            for _ in range(40):
                i = rng.randint(m)
                j = rng.randint(V)
                d2 = dists.copy()
                d2[i, j] += eps
                up = _bidirectional_arrays(gt.tokens, gt.valid_count, d2, G)[0]
                d2[i, j] -= 2 * eps
                down = _bidirectional_arrays(gt.tokens, gt.valid_count, d2, G)[0]
                fd = (up - down) / (2 * eps)
                assert abs(fd - grad[i, j]) <= 1e-5 * max(1.0, abs(fd), abs(grad[i, j]))

    def test_empty_gt_rejected(self):
        pred = random_pred(np.random.RandomState(15), 4)
        gt = VertexTokenSeq(tokens=(NOV,) * 4, valid_count=0, grid_size=G)
        with pytest.raises(ValueError):
            bidirectional_loss(gt, pred)


class TestExhaustiveLoss:
    def test_perfect(self):
        gt = random_gt(np.random.RandomState(16), 8, k=5, distinct=True)
        pred = one_hot_rows(gt.tokens, smooth=True)
        assert exhaustive_alignment_loss(gt, pred) < 1e-6

    def test_lower_bound_of_bidirectional(self):
        rng = np.random.RandomState(17)
        for _ in range(50):
            m = int(rng.randint(3, 11))
            gt = random_gt(rng, m)
            pred = random_pred(rng, m)
            bi, _ = bidirectional_loss(gt, pred)
            assert exhaustive_alignment_loss(gt, pred) <= bi + 1e-12

    def test_matches_enumeration_oracle(self):
        rng = np.random.RandomState(18)
        for _ in range(20):
            m = int(rng.randint(3, 9))
            gt = random_gt(rng, m)
            pred = random_pred(rng, m)
            want = naive_exhaustive_loss(list(gt.tokens), gt.valid_count, pred.dists.tolist())
            assert exhaustive_alignment_loss(gt, pred) == pytest.approx(want, abs=1e-12)


class TestFocalLoss:
    def test_perfect_maps_near_zero(self):
        target = np.zeros((4, 4))
        target[1, 2] = 1.0
        probs = np.where(target > 0.5, 1.0 - 1e-7, 1e-7)
        maps = HeatmapPair(probs, probs, target, target)
        loss, _ = focal_map_loss(maps)
        assert loss < 1e-5

    def test_single_positive_half(self):
        # -2 * 0.5^4 * ln(0.5) = 0.0866434...
        target = np.ones((1, 1))
        maps = HeatmapPair(np.full((1, 1), 0.5), np.full((1, 1), 1e-7), target, np.zeros((1, 1)))
        loss, _ = focal_map_loss(maps, FocalParams(alpha=2.0, gamma=4.0))
        assert loss == pytest.approx(-2 * 0.5**4 * math.log(0.5), abs=1e-6)
        assert loss == pytest.approx(0.086643, abs=1e-6)

    def test_single_negative_half_symmetric(self):
        target = np.zeros((1, 1))
        maps = HeatmapPair(np.full((1, 1), 0.5), np.full((1, 1), 1e-7), np.zeros((1, 1)), np.zeros((1, 1)))
        loss, _ = focal_map_loss(maps, FocalParams(alpha=2.0, gamma=4.0))
        assert loss == pytest.approx(0.086643, abs=1e-6)

    def test_monotonic_in_p(self):
        ps = np.linspace(0.05, 0.95, 19)
        pos_losses = []
        neg_losses = []
        for p in ps:
            maps = HeatmapPair(
                np.full((1, 1), p), np.full((1, 1), 0.5),
                np.ones((1, 1)), np.zeros((1, 1)),
            )
            full, _ = focal_map_loss(maps)
            maps_neg = HeatmapPair(
                np.full((1, 1), p), np.full((1, 1), 0.5),
                np.zeros((1, 1)), np.zeros((1, 1)),
            )
            full_neg, _ = focal_map_loss(maps_neg)
            pos_losses.append(full)
            neg_losses.append(full_neg)
        assert all(a > b for a, b in zip(pos_losses, pos_losses[1:]))
        assert all(a < b for a, b in zip(neg_losses, neg_losses[1:]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.RandomState(19)
        probs = rng.uniform(0.1, 0.9, size=(5, 5))
        target = (rng.rand(5, 5) > 0.7).astype(float)
        other = np.full((5, 5), 0.5)
        eps = 1e-6
        maps = HeatmapPair(probs, other, target, np.zeros((5, 5)))
        _, (grad_v, _) = focal_map_loss(maps)
        for _ in range(20):
            i, j = rng.randint(5), rng.randint(5)
            p2 = probs.copy()
            p2[i, j] += eps
            up, _ = focal_map_loss(HeatmapPair(p2, other, target, np.zeros((5, 5))))
            p2[i, j] -= 2 * eps
            down, _ = focal_map_loss(HeatmapPair(p2, other, target, np.zeros((5, 5))))
            fd = (up - down) / (2 * eps)
            assert abs(fd - grad_v[i, j]) <= 1e-5 * max(1.0, abs(fd))


class TestClsAndBoxLosses:
    def test_cls_perfect(self):
        assert cls_loss([1], [1.0 - 1e-7]) < 1e-6

    def test_cls_half(self):
        assert cls_loss([1], [0.5]) == pytest.approx(math.log(2), abs=1e-9)
        assert cls_loss([0], [0.5]) == pytest.approx(math.log(2), abs=1e-9)

    def test_cls_empty_rejected(self):
        with pytest.raises(ValueError):
            cls_loss([], [])

    def test_cls_gradient(self):
        rng = np.random.RandomState(20)
        probs = rng.uniform(0.2, 0.8, size=6)
        labels = [1, 0, 1, 1, 0, 0]
        _, grad = cls_loss_with_grad(labels, probs)
        eps = 1e-6
        for i in range(6):
            p2 = probs.copy()
            p2[i] += eps
            up = cls_loss(labels, p2)
            p2[i] -= 2 * eps
            down = cls_loss(labels, p2)
            assert (up - down) / (2 * eps) == pytest.approx(grad[i], rel=1e-5)

    def test_bbox_identity(self):
        boxes = [BBox(5, 5, 2, 2)]
        assert bbox_l1_loss(boxes, boxes) == 0.0

    def test_bbox_unit_offset(self):
        gt = [BBox(5, 5, 2, 2)]
        pred = [BBox(6, 5, 2, 2)]
        assert bbox_l1_loss(gt, pred) == 1.0

    def test_bbox_mean_of_four_and_two(self):
        gt = [BBox(0, 0, 1, 1), BBox(0, 0, 1, 1)]
        pred = [BBox(1, 1, 2, 2), BBox(0, 2, 1, 1)]
        assert bbox_l1_loss(gt, pred) == 3.0

    def test_bbox_length_mismatch(self):
        with pytest.raises(ValueError):
            bbox_l1_loss([BBox(0, 0, 1, 1)], [])

    def test_bbox_gradient_sign(self):
        gt = [BBox(0, 0, 1, 1)]
        pred = [BBox(1, -2, 3, 0.5)]
        _, grad = bbox_l1_with_grad(gt, pred)
        assert np.array_equal(grad[0], [1.0, -1.0, 1.0, -1.0])


class TestTotalLoss:
    def test_zeros(self):
        assert total_loss(0.0, 0.0, 0.0) == 0.0

    def test_unit_weights(self):
        assert total_loss(1.0, 2.0, 3.0) == 6.0

    def test_weighted(self):
        w = LossWeights(lambda_cls=10.0, lambda_bbox=10.0, lambda_poly=1.0)
        assert total_loss(1.0, 2.0, 3.0, w) == 33.0

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            total_loss(float("nan"), 0.0, 0.0)
