"""Training objectives for the boundary network and the fusion network."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LOG_CLAMP = 1e-7

# horizontal and vertical 3x3 Prewitt kernels
PREWITT = np.array(
    [
        [[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]],
        [[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
    ]
)


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def balance_weight(gt: np.ndarray) -> float:
    """Fraction of non-boundary pixels; weights the boundary term."""
    return float((gt == 0).sum()) / gt.size


def class_balanced_bce(pred: Tensor, gt) -> Tensor:
    """Class-balanced cross-entropy summed over pixels.

    ``gt`` is binary with 1 marking boundary pixels. The boundary term is
    weighted by the non-boundary fraction and vice versa, so the rare class
    carries the large weight. Probabilities are clamped to
    [LOG_CLAMP, 1 - LOG_CLAMP] before the log; clamped entries get no gradient.
    """
    gt = np.asarray(_array(gt))
    if gt.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary")
    pos = gt == 1
    beta = balance_weight(gt)
    p = pred.data
    pc = np.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP)
    loss = -beta * np.log(pc[pos]).sum() - (1.0 - beta) * np.log1p(-pc[~pos]).sum()
    inside = (p >= LOG_CLAMP) & (p <= 1.0 - LOG_CLAMP)

    def _back(g):
        d = np.where(pos, -beta / pc, (1.0 - beta) / (1.0 - pc))
        return (g * d * inside,)

    return Tensor.from_op(np.asarray(loss, dtype=p.dtype), (pred,), _back, "reduce")


def epe(flow: Tensor, gt) -> Tensor:
    """Mean endpoint error over all pixels; flows are (N, 2, H, W)."""
    gt = _array(gt)
    if gt.shape != flow.shape or flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"flow {flow.shape} and ground truth {gt.shape} must both be (N, 2, H, W)")
    d = flow.data - gt
    mag = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
    n = mag.size

    def _back(g):
        safe = np.where(mag > 0, mag, 1.0)
        # subgradient 0 where the endpoint error vanishes
        unit = np.where(mag[:, None] > 0, d / safe[:, None], 0.0)
        return (g * unit / n,)

    return Tensor.from_op(np.asarray(mag.sum() / n, dtype=flow.dtype), (flow,), _back, "reduce")


def prewitt(flow) -> Tensor:
    """Prewitt responses (x then y) of each flow channel, replicate borders."""
    return T.fixed_filter_conv(T.as_tensor(flow), PREWITT)


def boundary_preserving_loss(flow: Tensor, gt) -> Tensor:
    """Squared Prewitt-response difference, summed over filters and channels, divided by the pixel count."""
    gt = _array(gt)
    if gt.shape != flow.shape:
        raise ShapeError(f"flow {flow.shape} and ground truth {gt.shape} differ")
    n = flow.shape[0] * flow.shape[2] * flow.shape[3]
    target = Tensor(prewitt(Tensor(gt.astype(flow.dtype))).data)
    return T.scale(T.sum_squares(T.sub(prewitt(flow), target)), 1.0 / n)


def flow_loss(flow: Tensor, gt) -> Tensor:
    """Endpoint error plus the boundary-preserving Prewitt term."""
    return T.add(epe(flow, gt), boundary_preserving_loss(flow, gt))


def combined_flow_loss(residues: Sequence[Tensor], f0, gt) -> Tensor:
    """Deep supervision: every residue is added to ``f0`` and scored with equal weight."""
    if not residues:
        raise ValueError("need at least one residue")
    f0 = T.as_tensor(f0)
    total = None
    for r in residues:
        term = flow_loss(T.add(f0, r), gt)
        total = term if total is None else T.add(total, term)
    return total
