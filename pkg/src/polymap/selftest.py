"""Built-in verification checks runnable from the CLI.

The naive reference implementations here are deliberately written with
plain Python lists and loops, independent of the numpy paths they verify.
Each check returns a (name, passed, detail) record; `run_selftest` drives
the whole suite and can inject a deliberately corrupted gradient to prove
the harness catches it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def naive_bidirectional_loss(
    tokens: list[int], valid_count: int, rows: list[list[float]], grid_size: int
) -> float:
    """Reference sequence loss: explicit scan, rotation, reversal, cross entropy."""
    k = valid_count
    no_vertex = grid_size * grid_size

    def center(cell: int) -> tuple[float, float]:
        return (cell % grid_size + 0.5, cell // grid_size + 0.5)

    tx, ty = center(tokens[0])
    best_i = 0
    best_d = None
    for i in range(k):
        row = rows[i]
        arg = row.index(max(row))
        if arg == no_vertex:
            continue
        cx, cy = center(arg)
        d = math.sqrt((cx - tx) ** 2 + (cy - ty) ** 2)
        if best_d is None or d < best_d:
            best_d = d
            best_i = i

    shifted = [rows[(i + best_i) % k] for i in range(k)] + list(rows[k:])
    flipped = [shifted[0]] + shifted[1:k][::-1] + list(shifted[k:])

    def cross_entropy(seq: list[list[float]]) -> float:
        total = 0.0
        for tok, row in zip(tokens, seq):
            p = min(max(row[tok], 1e-7), 1.0 - 1e-7)
            total += -math.log(p)
        return total / len(tokens)

    return min(cross_entropy(shifted), cross_entropy(flipped))


def naive_exhaustive_loss(
    tokens: list[int], valid_count: int, rows: list[list[float]]
) -> float:
    """Reference exhaustive alignment: every rotation, both directions."""
    k = valid_count

    def cross_entropy(seq):
        total = 0.0
        for tok, row in zip(tokens, seq):
            p = min(max(row[tok], 1e-7), 1.0 - 1e-7)
            total += -math.log(p)
        return total / len(tokens)

    best = math.inf
    for r in range(k):
        rot = [rows[(i + r) % k] for i in range(k)] + list(rows[k:])
        rev = [rot[0]] + rot[1:k][::-1] + list(rot[k:])
        best = min(best, cross_entropy(rot), cross_entropy(rev))
    return best


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail}


def _random_gt(rng, m, grid, distinct=False):
    from .polyloss import VertexTokenSeq, no_vertex_index

    k = int(rng.randint(1, m))
    if distinct:
        k = max(3, k)
        cells = rng.choice(grid * grid, size=k, replace=False)
    else:
        cells = rng.randint(0, grid * grid, size=k)
    tokens = tuple(int(c) for c in cells) + (no_vertex_index(grid),) * (m - k)
    return VertexTokenSeq(tokens=tokens, valid_count=k, grid_size=grid)


def _random_pred(rng, m, grid):
    from .polyloss import PredDistSeq

    rows = rng.gamma(1.0, 1.0, size=(m, grid * grid + 1)) + 1e-4
    rows /= rows.sum(axis=1, keepdims=True)
    return PredDistSeq(rows)


def check_loss_vs_naive(rng: np.random.RandomState, trials: int = 100) -> CheckResult:
    from .polyloss import bidirectional_loss

    grid = 5
    worst = 0.0
    for _ in range(trials):
        m = int(rng.randint(3, 11))
        gt = _random_gt(rng, m, grid)
        pred = _random_pred(rng, m, grid)
        got, _ = bidirectional_loss(gt, pred)
        want = naive_bidirectional_loss(list(gt.tokens), gt.valid_count, pred.dists.tolist(), grid)
        worst = max(worst, abs(got - want))
    return CheckResult("loss_vs_naive_oracle", worst <= 1e-12, f"max |diff| = {worst:.2e}")


def check_exhaustive_bound(rng: np.random.RandomState, trials: int = 100) -> CheckResult:
    from .polyloss import bidirectional_loss, exhaustive_alignment_loss

    grid = 5
    for _ in range(trials):
        m = int(rng.randint(3, 11))
        gt = _random_gt(rng, m, grid)
        pred = _random_pred(rng, m, grid)
        bi, _ = bidirectional_loss(gt, pred)
        ex = exhaustive_alignment_loss(gt, pred)
        if ex > bi + 1e-12:
            return CheckResult(
                "exhaustive_alignment_bound", False, f"exhaustive {ex} > bidirectional {bi}"
            )
    return CheckResult("exhaustive_alignment_bound", True, f"{trials} random pairs")


def check_orientation_invariance(rng: np.random.RandomState) -> CheckResult:
    from .polyloss import PredDistSeq, align_inverse, align_shift, bidirectional_loss

    grid = 5
    worst = 0.0
    for _ in range(10):
        gt = _random_gt(rng, 10, grid, distinct=True)
        k = gt.valid_count
        rows = np.zeros((10, grid * grid + 1))
        for i, t in enumerate(gt.tokens):
            rows[i, t] = 1.0
        base = PredDistSeq(rows)
        for r in range(k):
            rotated = align_shift(base, r, k)
            for pred in (rotated, align_inverse(rotated, k)):
                loss, _ = bidirectional_loss(gt, pred)
                worst = max(worst, loss)
    return CheckResult("orientation_invariance", worst < 1e-6, f"max loss = {worst:.2e}")


def _op_checks(rng: np.random.RandomState):
    """Per-op finite-difference builders: (op name, build_loss, params)."""
    from .neural import tensor as T

    def leaf(*shape):
        return T.Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)

    a34, b4 = leaf(3, 4), leaf(4)
    m_a, m_b = leaf(3, 4), leaf(4, 2)
    bm_a, bm_b = leaf(2, 3, 4), leaf(4, 3)
    r_in = T.Tensor(rng.uniform(0.3, 1.0, size=6) * rng.choice([-1, 1], size=6), requires_grad=True)
    s_in = leaf(5)
    sm_in, sm_w = leaf(3, 5), T.Tensor(rng.standard_normal((3, 5)))
    ln_x, ln_g, ln_b = leaf(3, 6), T.Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True), leaf(6)
    ln_w = T.Tensor(rng.standard_normal((3, 6)))
    bn_x, bn_g, bn_b = leaf(4, 3, 2, 2), T.Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True), leaf(3)
    bn_w = T.Tensor(rng.standard_normal((4, 3, 2, 2)))
    c3_x, c3_w, c3_b = leaf(2, 2, 4, 4), leaf(3, 2, 3, 3), leaf(3)
    c3_m = T.Tensor(rng.standard_normal((2, 3, 4, 4)))
    c1_x, c1_w, c1_b = leaf(2, 3, 4, 4), leaf(2, 3), leaf(2)
    c1_m = T.Tensor(rng.standard_normal((2, 2, 4, 4)))
    cc_a, cc_b = leaf(2, 6), leaf(2, 6)

    def bn_build():
        return T.sum_all(T.mul(
            T.batch_norm(bn_x, bn_g, bn_b, np.zeros(3), np.ones(3), training=True), bn_w))

    def concat_build():
        c = T.concat([T.reshape(cc_a, (2, 3, 2)), T.reshape(cc_b, (2, 3, 2))], axis=1)
        t = T.transpose(c, (1, 0, 2))
        return T.sum_all(T.mul(t, t))

    return [
        ("add", lambda: T.sum_all(T.mul(T.add(a34, b4), T.add(a34, b4))), {"a": a34, "b": b4}),
        ("sub", lambda: T.sum_all(T.mul(T.sub(a34, b4), a34)), {"a": a34, "b": b4}),
        ("mul", lambda: T.mean_all(T.mul(a34, a34)), {"a": a34}),
        ("matmul", lambda: T.sum_all(T.mul(T.matmul(m_a, m_b), T.matmul(m_a, m_b))),
         {"a": m_a, "b": m_b}),
        ("matmul_batched", lambda: T.mean_all(T.matmul(bm_a, bm_b)), {"a": bm_a, "b": bm_b}),
        ("relu", lambda: T.sum_all(T.mul(T.relu(r_in), r_in)), {"x": r_in}),
        ("sigmoid", lambda: T.sum_all(T.mul(T.sigmoid(s_in), T.sigmoid(s_in))), {"x": s_in}),
        ("softmax", lambda: T.sum_all(T.mul(T.softmax(sm_in), sm_w)), {"x": sm_in}),
        ("layer_norm", lambda: T.sum_all(T.mul(T.layer_norm(ln_x, ln_g, ln_b), ln_w)),
         {"x": ln_x, "gamma": ln_g, "beta": ln_b}),
        ("batch_norm", bn_build, {"x": bn_x, "gamma": bn_g, "beta": bn_b}),
        ("conv2d_3x3", lambda: T.sum_all(T.mul(T.conv2d_3x3(c3_x, c3_w, c3_b), c3_m)),
         {"x": c3_x, "w": c3_w, "b": c3_b}),
        ("conv2d_1x1", lambda: T.sum_all(T.mul(T.conv2d_1x1(c1_x, c1_w, c1_b), c1_m)),
         {"x": c1_x, "w": c1_w, "b": c1_b}),
        ("concat", concat_build, {"a": cc_a, "b": cc_b}),
        ("mean_all", lambda: T.mean_all(T.mul(s_in, s_in)), {"x": s_in}),
    ]


def check_op_gradients(rng: np.random.RandomState) -> list[CheckResult]:
    from .neural.gradcheck import finite_difference_check

    results = []
    for name, build, params in _op_checks(rng):
        err = finite_difference_check(build, params, rng=np.random.RandomState(7))
        results.append(
            CheckResult(f"gradients_{name}", err < 1e-5, f"max relative error = {err:.2e}")
        )
    return results


def check_roi_align(rng: np.random.RandomState) -> CheckResult:
    from .geometry import BBox
    from .neural.gradcheck import finite_difference_check
    from .neural.layers import roi_align_stack
    from .neural import tensor as T

    feat = T.Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    rois = [(0, BBox.from_xywh(0.7, 1.2, 3.4, 2.8))]
    w = T.Tensor(rng.standard_normal((1, 2, 3, 3)))
    err = finite_difference_check(
        lambda: T.sum_all(T.mul(roi_align_stack(feat, rois, 3), w)),
        {"f": feat},
        rng=np.random.RandomState(8),
    )
    return CheckResult("gradients_roi_align", err < 1e-5, f"max relative error = {err:.2e}")


def check_full_graph_gradients(rng: np.random.RandomState) -> CheckResult:
    from .geometry import Polygon, rasterize
    from .neural.gradcheck import finite_difference_check
    from .neural.head import PolygonHeadConfig, init_model
    from .neural.training import build_sample, compute_losses

    cfg = PolygonHeadConfig(
        grid_size=8, channels=16, heads=4, decoder_blocks=1, queries=6,
        encoder_variant="hierarchical",
    )
    store = init_model(cfg, seed=3)
    poly = Polygon.from_points([(3, 2), (13, 2), (13, 12), (3, 12)])
    image = rasterize(poly, 16, 16).bits * 255.0
    sample = build_sample(image, poly, cfg)

    def build():
        total, _ = compute_losses(store, cfg, [sample], training=False)
        return total

    err = finite_difference_check(build, store, max_coords=150, rng=np.random.RandomState(9))
    return CheckResult("gradients_full_graph", err < 1e-5, f"max relative error = {err:.2e}")


def check_metric_hand_cases() -> list[CheckResult]:
    from .geometry import Polygon, polygon_iou
    from .metrics import GtInstance, PredInstance, c_iou, coco_suite, matched_pairs, mta

    def square(x0, y0, side):
        return Polygon.from_points(
            [(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)]
        )

    results = []
    half = polygon_iou(square(0, 0, 1), Polygon.from_points([(0.5, 0), (1.5, 0), (1.5, 1), (0.5, 1)]))
    results.append(
        CheckResult("metric_iou_half_overlap", abs(half - 1 / 3) <= 0.02, f"IoU = {half:.4f}")
    )

    gts = [GtInstance(1, square(0, 0, 8))]
    split = Polygon.from_points(
        [(0, 0), (4, 0), (8, 0), (8, 4), (8, 8), (4, 8), (0, 8), (0, 4)]
    )
    pairs = matched_pairs([PredInstance(1, split, 0.9)], gts)
    ciou = c_iou(pairs)
    results.append(
        CheckResult("metric_ciou_midpoint_split", abs(ciou - 2 / 3) <= 1e-9, f"C-IoU = {ciou:.6f}")
    )

    s = math.sqrt(2)
    rotated = Polygon.from_points([(s, 0), (0, s), (-s, 0), (0, -s)])
    angle = mta(square(-1, -1, 2), rotated, samples=256)
    results.append(
        CheckResult(
            "metric_mta_rotated_square", abs(angle - math.pi / 4) <= 0.02, f"MTA = {angle:.4f} rad"
        )
    )

    r = coco_suite([PredInstance(1, square(3, 0, 13), 0.9)], [GtInstance(1, square(0, 0, 13))])
    results.append(
        CheckResult(
            "metric_ap_threshold_trace", abs(r.ap - 0.3) <= 1e-12 and r.ap50 == 1.0,
            f"AP = {r.ap:.4f}, AP50 = {r.ap50:.4f}",
        )
    )
    return results


def check_tiling_arithmetic() -> CheckResult:
    from .dataio import TileSpec, tile_positions

    spec = TileSpec()
    xs = tile_positions(5000, spec.tile_size, spec.tile_size - spec.overlap)
    ok = len(xs) == 13 and xs[-1] == 4488
    return CheckResult(
        "tiling_arithmetic", ok, f"{len(xs)} positions per axis, {len(xs) ** 2} tiles"
    )


def run_selftest(corrupt_op: str | None = None) -> tuple[bool, list[CheckResult]]:
    """Run every built-in check; optionally corrupt one op's gradients.

    Returns (all_passed, results).  With `corrupt_op`, the gradient suite
    runs under a backward pass that scales that op's gradients by two, so
    the corresponding check must fail (and the run reports it).
    """
    from .neural.tensor import corrupt_gradient

    rng = np.random.RandomState(2024)
    results: list[CheckResult] = [
        check_loss_vs_naive(rng),
        check_exhaustive_bound(rng),
        check_orientation_invariance(rng),
    ]
    if corrupt_op is None:
        results.extend(check_op_gradients(rng))
        results.append(check_roi_align(rng))
        results.append(check_full_graph_gradients(rng))
    else:
        with corrupt_gradient(corrupt_op, 2.0):
            results.extend(check_op_gradients(rng))
            results.append(check_roi_align(rng))
            results.append(check_full_graph_gradients(rng))
    results.extend(check_metric_hand_cases())
    results.append(check_tiling_arithmetic())
    return all(r.passed for r in results), results
