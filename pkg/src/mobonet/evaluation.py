"""Boundary evaluation: NMS thinning, tolerant matching, precision-recall and AP, EPE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .flowdata import bilinear_sample
from .tensor import ShapeError

DEFAULT_THRESHOLDS = tuple(round(i / 100, 2) for i in range(1, 100))
DEFAULT_TOL_FRAC = 0.0075


@dataclass
class EvalConfig:
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    tol_frac: float = DEFAULT_TOL_FRAC
    nms: bool = True
    per_image: bool = False  # average per-image AP instead of pooling counts

    def validate(self) -> None:
        t = np.asarray(self.thresholds, dtype=np.float64)
        if t.size == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
            raise ValueError("thresholds must be strictly increasing inside (0, 1)")
        if self.tol_frac <= 0:
            raise ValueError("tol_frac must be positive")


@dataclass
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0


# --- thinning -------------------------------------------------------------------


def boundary_normal(prob: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Angle in [0, pi) of the direction across the boundary.

    Taken from the dominant eigenvector of the structure tensor built from
    gradients of the Gaussian-smoothed map; unlike the raw gradient it stays
    defined on the crest of a ridge.
    """
    s = ndimage.gaussian_filter(prob.astype(np.float64), sigma, mode="nearest")
    gy, gx = np.gradient(s)
    jxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    jyy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    jxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    theta = np.mod(0.5 * np.arctan2(2.0 * jxy, jxx - jyy), np.pi)
    theta[theta > np.pi - 1e-9] = 0.0
    return theta


def nms_thin(prob: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Keep pixels that are maxima along the boundary normal; zero the rest.

    Neighbours one pixel away along the normal are linearly interpolated,
    with coordinates clamped to the image. A pixel survives when it is strictly above the
    neighbour on the negative side and not below the one on the positive
    side, so a flat plateau keeps a single line and a constant map keeps nothing.
    """
    prob = np.asarray(prob, dtype=np.float64)
    h, w = prob.shape
    theta = boundary_normal(prob, sigma)
    dx, dy = np.cos(theta), np.sin(theta)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ahead = bilinear_sample(prob, xs + dx, ys + dy)
    behind = bilinear_sample(prob, xs - dx, ys - dy)
    keep = (prob > behind) & (prob >= ahead)
    return np.where(keep, prob, 0.0)


# --- matching ---------------------------------------------------------------------


def _offsets(tolerance: float):
    r = int(np.floor(tolerance))
    offs = [(dy * dy + dx * dx, dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= tolerance * tolerance]
    return [(dy, dx) for _, dy, dx in sorted(offs)]


def match_boundaries(pred: np.ndarray, gt: np.ndarray, tolerance: float) -> Tuple[int, int, int]:
    """One-to-one matching of predicted to ground-truth boundary pixels within ``tolerance`` (Euclidean px).

    Predicted pixels are visited in row-major order and take the nearest free
    ground-truth pixel (row-major among equals). Augmenting paths then lift the
    greedy assignment to a maximum-cardinality matching. Returns (tp, fp, fn).
    """
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if tolerance < 0:
        raise ValueError("tolerance must be nonnegative")
    n_pred, n_gt = int(pred.sum()), int(gt.sum())
    if n_pred == 0 or n_gt == 0:
        return 0, n_pred, n_gt
    offs = _offsets(tolerance)
    if offs == [(0, 0)]:
        tp = int((pred & gt).sum())
        return tp, n_pred - tp, n_gt - tp

    h, w = gt.shape
    gt_id = np.full(gt.shape, -1, dtype=np.int64)
    gt_id[gt] = np.arange(n_gt)
    adj: List[List[int]] = []
    for y, x in zip(*np.nonzero(pred)):
        cands = []
        for dy, dx in offs:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and gt_id[yy, xx] >= 0:
                cands.append(int(gt_id[yy, xx]))
        adj.append(cands)

    match_gt = [-1] * n_gt
    match_pred = [-1] * len(adj)
    for i, cands in enumerate(adj):
        for g in cands:
            if match_gt[g] < 0:
                match_gt[g], match_pred[i] = i, g
                break
    for i in range(len(adj)):
        if match_pred[i] < 0 and adj[i]:
            _augment(i, adj, match_gt, match_pred)
    tp = sum(1 for m in match_pred if m >= 0)
    return tp, n_pred - tp, n_gt - tp


def _augment(root: int, adj, match_gt, match_pred) -> bool:
    """Iterative DFS for an augmenting path starting at an unmatched prediction."""
    visited = set()
    stack = [(root, iter(adj[root]))]
    via = {}  # pred -> gt it tries to take
    while stack:
        i, it = stack[-1]
        advanced = False
        for g in it:
            if g in visited:
                continue
            visited.add(g)
            via[i] = g
            owner = match_gt[g]
            if owner < 0:
                # flip the path
                for j, _ in stack:
                    gg = via[j]
                    match_gt[gg], match_pred[j] = j, gg
                return True
            stack.append((owner, iter(adj[owner])))
            advanced = True
            break
        if not advanced:
            stack.pop()
    return False


# --- curves -------------------------------------------------------------------------


def image_tolerance(shape, tol_frac: float = DEFAULT_TOL_FRAC) -> float:
    return tol_frac * float(np.hypot(shape[0], shape[1]))


def _frame_counts(prob, gt, cfg: EvalConfig) -> np.ndarray:
    prob = np.asarray(prob, dtype=np.float64)
    gt = np.asarray(gt)
    if prob.shape != gt.shape:
        raise ShapeError(f"probability map {prob.shape} and ground truth {gt.shape} differ")
    thin = nms_thin(prob) if cfg.nms else prob
    tol = image_tolerance(prob.shape, cfg.tol_frac)
    return np.array([match_boundaries(thin >= t, gt, tol) for t in cfg.thresholds], dtype=np.int64)


def pr_curve(prob_maps: Sequence[np.ndarray], gt_maps: Sequence[np.ndarray], cfg: Optional[EvalConfig] = None) -> List[PRPoint]:
    """Pooled precision/recall per threshold over all frames."""
    cfg = cfg or EvalConfig()
    cfg.validate()
    if len(prob_maps) == 0 or len(prob_maps) != len(gt_maps):
        raise ValueError("probability and ground-truth lists must be nonempty and aligned")
    total = np.zeros((len(cfg.thresholds), 3), dtype=np.int64)
    for p, g in zip(prob_maps, gt_maps):
        total += _frame_counts(p, g, cfg)
    return [PRPoint(t, int(c[0]), int(c[1]), int(c[2])) for t, c in zip(cfg.thresholds, total)]


def average_precision(curve: Sequence[PRPoint]) -> float:
    """Trapezoidal area under precision(recall).

    Points are walked from the highest threshold down (recall ascending) and
    the walk starts at recall 0 with the first point's precision.
    """
    pts = sorted(curve, key=lambda p: -p.threshold)
    pts = sorted(pts, key=lambda p: p.recall)  # stable: keeps threshold order within equal recall
    if not pts:
        raise ValueError("empty curve")
    r_prev, p_prev = 0.0, pts[0].precision
    area = 0.0
    for pt in pts:
        r, p = pt.recall, pt.precision
        area += (r - r_prev) * (p + p_prev) / 2.0
        r_prev, p_prev = r, p
    return area


def dataset_ap(prob_maps, gt_maps, cfg: Optional[EvalConfig] = None) -> float:
    """Pooled AP, or the mean of per-image APs when ``cfg.per_image`` is set."""
    cfg = cfg or EvalConfig()
    if not cfg.per_image:
        return average_precision(pr_curve(prob_maps, gt_maps, cfg))
    if len(prob_maps) == 0 or len(prob_maps) != len(gt_maps):
        raise ValueError("probability and ground-truth lists must be nonempty and aligned")
    return float(np.mean([average_precision(pr_curve([p], [g], cfg)) for p, g in zip(prob_maps, gt_maps)]))


def format_pr_table(curve: Sequence[PRPoint], ap: Optional[float] = None) -> str:
    lines = ["# threshold tp fp fn precision recall\n"]
    for pt in curve:
        lines.append(f"{pt.threshold:.4f} {pt.tp:d} {pt.fp:d} {pt.fn:d} {pt.precision:.6f} {pt.recall:.6f}\n")
    lines.append(f"AP {average_precision(curve) if ap is None else ap:.6f}\n")
    return "".join(lines)


def parse_pr_table(text: str) -> Tuple[List[PRPoint], float]:
    curve, ap = [], float("nan")
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "AP":
            ap = float(parts[1])
        else:
            curve.append(PRPoint(float(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])))
    return curve, ap


# --- flow ---------------------------------------------------------------------------


def endpoint_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"flow {pred.shape} and ground truth {gt.shape} differ")
    d = pred - gt
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def epe_stats(pred_flows: Sequence[np.ndarray], gt_flows: Sequence[np.ndarray]) -> float:
    """Mean endpoint error over every pixel of every frame."""
    if len(pred_flows) != len(gt_flows) or len(pred_flows) == 0:
        raise ValueError("flow lists must be nonempty and aligned")
    total, count = 0.0, 0
    for p, g in zip(pred_flows, gt_flows):
        e = endpoint_errors(p, g)
        total += float(e.sum())
        count += e.size
    return total / count


def format_epe_table(names: Sequence[str], per_frame: Sequence[float], mean: float) -> str:
    lines = ["# frame epe\n"]
    lines += [f"{n} {e:.6f}\n" for n, e in zip(names, per_frame)]
    lines.append(f"mean {mean:.6f}\n")
    return "".join(lines)
