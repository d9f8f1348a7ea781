"""Training losses for grid-token polygon prediction.

A polygon is supervised as a sequence of M grid-cell class tokens over a
G x G vocabulary plus one trailing NO-VERTEX class (index G*G).  The
sequence loss aligns the prediction to the ground truth's first vertex
(search + cyclic shift) and takes the minimum cross entropy over the two
traversal directions, so either vertex order is equally correct.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BBox, Polygon

PROB_CLAMP = 1e-7


def no_vertex_index(grid_size: int) -> int:
    """Class index of the NO-VERTEX token for a G x G grid."""
    return grid_size * grid_size


@dataclass(frozen=True)
class VertexTokenSeq:
    """Ground-truth token sequence: K grid cells followed by NO-VERTEX padding."""

    tokens: tuple[int, ...]
    valid_count: int
    grid_size: int

    def __post_init__(self):
        g2 = self.grid_size * self.grid_size
        k = self.valid_count
        if not 0 <= k <= len(self.tokens):
            raise ValueError(f"valid_count {k} out of range for {len(self.tokens)} tokens")
        for i, t in enumerate(self.tokens):
            if i < k and not 0 <= t < g2:
                raise ValueError(f"token {t} at position {i} is not a grid cell")
            if i >= k and t != g2:
                raise ValueError(f"position {i} must be NO-VERTEX ({g2}), got {t}")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class PredDistSeq:
    """Predicted per-query categorical distributions over G*G + 1 classes."""

    dists: np.ndarray

    def __post_init__(self):
        if self.dists.ndim != 2:
            raise ValueError(f"expected (M, G*G+1) distributions, got shape {self.dists.shape}")
        g = int(math.isqrt(self.dists.shape[1] - 1))
        if g * g + 1 != self.dists.shape[1]:
            raise ValueError(f"vocabulary size {self.dists.shape[1]} is not G*G+1")
        if np.any(self.dists < 0):
            raise ValueError("distributions must be non-negative")
        sums = self.dists.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("each row must sum to 1 within 1e-9")

    @property
    def grid_size(self) -> int:
        return int(math.isqrt(self.dists.shape[1] - 1))

    def __len__(self) -> int:
        return self.dists.shape[0]


@dataclass(frozen=True)
class HeatmapPair:
    """Predicted vertex/edge probability maps with their binary targets."""

    vertex_probs: np.ndarray
    edge_probs: np.ndarray
    vertex_target: np.ndarray
    edge_target: np.ndarray

    def __post_init__(self):
        shape = self.vertex_probs.shape
        for name in ("edge_probs", "vertex_target", "edge_target"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {shape}")


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    gamma: float = 4.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_bbox: float = 1.0
    lambda_poly: float = 1.0

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_bbox", "lambda_poly"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _cell_of(u: float, v: float, grid_size: int) -> int:
    """Row-major cell index of normalized position (u, v) in [0, 1]^2, clamped."""
    col = min(grid_size - 1, max(0, int(u * grid_size)))
    row = min(grid_size - 1, max(0, int(v * grid_size)))
    return row * grid_size + col


def encode_gt_sequence(p: Polygon, grid_size: int, query_count: int, crop: BBox) -> VertexTokenSeq:
    """Map polygon vertices to grid-cell tokens inside `crop`, padded with NO-VERTEX.

    Consecutive vertices landing in the same cell collapse to one token
    (including the wrap from last back to first).
    """
    if len(p) > query_count:
        raise ValueError(
            f"polygon has {len(p)} vertices but only {query_count} queries; simplify it first"
        )
    x0, y0, _, _ = crop.corners()
    tokens: list[int] = []
    for vert in p.vertices:
        cell = _cell_of((vert.x - x0) / crop.w, (vert.y - y0) / crop.h, grid_size)
        if not tokens or tokens[-1] != cell:
            tokens.append(cell)
    while len(tokens) > 1 and tokens[-1] == tokens[0]:
        tokens.pop()
    k = len(tokens)
    tokens.extend([no_vertex_index(grid_size)] * (query_count - k))
    return VertexTokenSeq(tokens=tuple(tokens), valid_count=k, grid_size=grid_size)


def encode_gt_maps(p: Polygon, grid_size: int, crop: BBox) -> tuple[np.ndarray, np.ndarray]:
    """Binary G x G vertex and edge target maps for a polygon inside `crop`."""
    g = grid_size
    vertex = np.zeros((g, g), dtype=np.float64)
    edge = np.zeros((g, g), dtype=np.float64)
    x0, y0, _, _ = crop.corners()
    pts = [((v.x - x0) / crop.w * g, (v.y - y0) / crop.h * g) for v in p.vertices]

    def mark(arr, gx, gy):
        col = min(g - 1, max(0, int(gx)))
        row = min(g - 1, max(0, int(gy)))
        arr[row, col] = 1.0

    for gx, gy in pts:
        mark(vertex, gx, gy)
    n = len(pts)
    for i in range(n):
        ax, ay = pts[i]
        bx, by = pts[(i + 1) % n]
        steps = max(1, int(math.ceil(math.hypot(bx - ax, by - ay) / 0.25)))
        for s in range(steps + 1):
            t = s / steps
            mark(edge, ax + t * (bx - ax), ay + t * (by - ay))
    return vertex, edge


def _argmax_cells(dists: np.ndarray) -> np.ndarray:
    return np.argmax(dists, axis=1)


def _cell_center(token: int, grid_size: int) -> tuple[float, float]:
    row, col = divmod(token, grid_size)
    return (col + 0.5, row + 0.5)


def search_reference(pred: PredDistSeq, gt_first: int, valid_count: int) -> int:
    """Index of the valid prediction row whose argmax cell lies closest to gt_first's cell.

    Rows predicting NO-VERTEX are skipped; ties break toward the smallest
    index; if every row predicts NO-VERTEX the first row is returned.
    """
    if valid_count < 1:
        raise ValueError("no valid rows to align: valid_count must be >= 1")
    g = pred.grid_size
    if not 0 <= gt_first < g * g:
        raise ValueError(f"gt_first {gt_first} is not a grid cell for G={g}")
    return _search_reference_arrays(pred.dists, gt_first, valid_count, g)


def _search_reference_arrays(dists: np.ndarray, gt_first: int, k: int, g: int) -> int:
    target = _cell_center(gt_first, g)
    args = _argmax_cells(dists[:k])
    best_t = 0
    best_d = math.inf
    for i in range(k):
        if args[i] == g * g:
            continue
        cx, cy = _cell_center(int(args[i]), g)
        d = math.hypot(cx - target[0], cy - target[1])
        if d < best_d:
            best_d = d
            best_t = i
    return best_t


def _shift_perm(m: int, t: int, k: int) -> np.ndarray:
    """Row permutation: aligned row i reads original row perm[i]."""
    perm = np.arange(m)
    perm[:k] = (np.arange(k) + t) % k
    return perm


def _inverse_perm(m: int, k: int) -> np.ndarray:
    """Row 0 fixed, rows 1..K-1 reversed, padding untouched."""
    perm = np.arange(m)
    if k > 2:
        perm[1:k] = np.arange(k - 1, 0, -1)
    return perm


def align_shift(pred: PredDistSeq, t: int, valid_count: int) -> PredDistSeq:
    """Cyclically rotate the first `valid_count` rows so row t becomes row 0."""
    m = len(pred)
    if not 0 <= t < valid_count <= m:
        raise ValueError(f"need 0 <= t < K <= M, got t={t}, K={valid_count}, M={m}")
    return PredDistSeq(pred.dists[_shift_perm(m, t, valid_count)])


def align_inverse(pred: PredDistSeq, valid_count: int) -> PredDistSeq:
    """Reverse traversal direction: keep row 0, flip rows 1..K-1."""
    m = len(pred)
    if valid_count > m:
        raise ValueError(f"valid_count {valid_count} exceeds sequence length {m}")
    return PredDistSeq(pred.dists[_inverse_perm(m, valid_count)])


def _ce_for_perm(tokens: tuple[int, ...], dists: np.ndarray, perm: np.ndarray) -> float:
    probs = dists[perm, list(tokens)]
    return float(np.mean(-np.log(np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP))))


def _bidirectional_arrays(
    tokens: tuple[int, ...], k: int, dists: np.ndarray, g: int
) -> tuple[float, np.ndarray]:
    m = len(tokens)
    t = _search_reference_arrays(dists, tokens[0], k, g)
    perm_shift = _shift_perm(m, t, k)
    perm_flip = perm_shift[_inverse_perm(m, k)]
    loss_shift = _ce_for_perm(tokens, dists, perm_shift)
    loss_flip = _ce_for_perm(tokens, dists, perm_flip)
    perm = perm_shift if loss_shift <= loss_flip else perm_flip
    grad = np.zeros_like(dists)
    probs = dists[perm, list(tokens)]
    live = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    rows = perm[live]
    cols = np.asarray(tokens)[live]
    np.add.at(grad, (rows, cols), -1.0 / (m * probs[live]))
    return min(loss_shift, loss_flip), grad


def bidirectional_loss(gt: VertexTokenSeq, pred: PredDistSeq) -> tuple[float, np.ndarray]:
    """Orientation-invariant sequence cross entropy and its gradient.

    The prediction is aligned to the ground truth's first vertex (closest
    argmax cell, then cyclic shift of the valid rows) and the loss is the
    lower cross entropy of the aligned sequence and its reversed-direction
    twin, averaged over all M positions.  Alignment indices are constants:
    the gradient flows through the winning branch only.
    """
    if gt.valid_count < 1:
        raise ValueError("ground truth must contain at least one vertex token")
    if len(gt) != len(pred):
        raise ValueError(f"sequence lengths differ: gt {len(gt)} vs pred {len(pred)}")
    if gt.grid_size != pred.grid_size:
        raise ValueError(f"grid sizes differ: gt {gt.grid_size} vs pred {pred.grid_size}")
    return _bidirectional_arrays(gt.tokens, gt.valid_count, pred.dists, gt.grid_size)


def _exhaustive_arrays(tokens: tuple[int, ...], k: int, dists: np.ndarray) -> float:
    m = len(tokens)
    best = math.inf
    flip = _inverse_perm(m, k)
    for r in range(k):
        perm = _shift_perm(m, r, k)
        best = min(best, _ce_for_perm(tokens, dists, perm))
        best = min(best, _ce_for_perm(tokens, dists, perm[flip]))
    return best


def exhaustive_alignment_loss(gt: VertexTokenSeq, pred: PredDistSeq) -> float:
    """Minimum cross entropy over all 2K rotations/reflections (testing utility)."""
    if gt.valid_count < 1:
        raise ValueError("ground truth must contain at least one vertex token")
    if len(gt) != len(pred):
        raise ValueError(f"sequence lengths differ: gt {len(gt)} vs pred {len(pred)}")
    return _exhaustive_arrays(gt.tokens, gt.valid_count, pred.dists)


def _focal_terms(
    probs: np.ndarray, target: np.ndarray, alpha: float, gamma: float
) -> tuple[float, np.ndarray]:
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = target > 0.5
    loss = np.where(
        pos,
        -alpha * (1.0 - p) ** gamma * np.log(p),
        -alpha * p**gamma * np.log(1.0 - p),
    )
    dpos = alpha * gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p) - alpha * (1.0 - p) ** gamma / p
    dneg = -alpha * gamma * p ** (gamma - 1.0) * np.log(1.0 - p) + alpha * p**gamma / (1.0 - p)
    grad = np.where(pos, dpos, dneg) / probs.size
    grad[(probs <= PROB_CLAMP) | (probs >= 1.0 - PROB_CLAMP)] = 0.0
    return float(loss.mean()), grad


def focal_map_loss(
    maps: HeatmapPair, params: FocalParams = FocalParams()
) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Focal loss over the vertex and edge probability maps, summed.

    Each map contributes its per-pixel mean; gradients are returned per map.
    """
    loss_v, grad_v = _focal_terms(maps.vertex_probs, maps.vertex_target, params.alpha, params.gamma)
    loss_e, grad_e = _focal_terms(maps.edge_probs, maps.edge_target, params.alpha, params.gamma)
    return loss_v + loss_e, (grad_v, grad_e)


def cls_loss(labels: list[int], probs: list[float]) -> float:
    """Mean binary cross entropy between 0/1 labels and predicted scores."""
    value, _ = cls_loss_with_grad(labels, probs)
    return value


def cls_loss_with_grad(labels, probs) -> tuple[float, np.ndarray]:
    y = np.asarray(labels, dtype=np.float64)
    p_raw = np.asarray(probs, dtype=np.float64)
    if y.size == 0:
        raise ValueError("classification loss needs at least one sample")
    if y.shape != p_raw.shape:
        raise ValueError(f"labels and probs lengths differ: {y.shape} vs {p_raw.shape}")
    p = np.clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))
    grad = (-(y / p) + (1.0 - y) / (1.0 - p)) / y.size
    grad[(p_raw <= PROB_CLAMP) | (p_raw >= 1.0 - PROB_CLAMP)] = 0.0
    return loss, grad


def bbox_l1_loss(gt: list[BBox], pred: list[BBox]) -> float:
    """Mean over boxes of the summed absolute (cx, cy, w, h) differences."""
    value, _ = bbox_l1_with_grad(gt, pred)
    return value


def bbox_l1_with_grad(gt: list[BBox], pred: list[BBox]) -> tuple[float, np.ndarray]:
    if len(gt) == 0:
        raise ValueError("box regression loss needs at least one pair")
    if len(gt) != len(pred):
        raise ValueError(f"box list lengths differ: {len(gt)} vs {len(pred)}")
    g = np.array([(b.cx, b.cy, b.w, b.h) for b in gt], dtype=np.float64)
    p = np.array([(b.cx, b.cy, b.w, b.h) for b in pred], dtype=np.float64)
    diff = p - g
    loss = float(np.abs(diff).sum(axis=1).mean())
    grad = np.sign(diff) / len(gt)
    return loss, grad


def total_loss(cls: float, bbox: float, poly: float, w: LossWeights = LossWeights()) -> float:
    """Weighted sum of the three head losses."""
    for name, v in (("cls", cls), ("bbox", bbox), ("poly", poly)):
        if not math.isfinite(v):
            raise ValueError(f"{name} loss is not finite: {v}")
    return w.lambda_cls * cls + w.lambda_bbox * bbox + w.lambda_poly * poly
