"""Two-phase training: boundary network first, then the fusion network with the boundary network frozen."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import losses
from . import tensor as T
from .flowdata import Sample, augment, sample_augment_params
from .nets import FusionNet, RefineNet, batch_stack, flow_tensor
from .optim import AdaGrad, TrainingLog, lr_schedule


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    base_lr: Optional[float] = None  # None keeps the phase default rate
    divisor: float = 1000.0
    seed: int = 0
    augment_prob: float = 0.0


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless epoch-shuffled index batches."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i : i + batch_size]


def _maybe_augment(samples: Sequence[Sample], cfg: TrainConfig, rng) -> List[Sample]:
    out = []
    for s in samples:
        if cfg.augment_prob > 0 and rng.random() < cfg.augment_prob:
            s = augment(s, sample_augment_params(rng), rng)
        out.append(s)
    return out


def _check_finite(value: float, it: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value!r} at iteration {it}")


def train_boundary(
    net: RefineNet,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    log: Optional[TrainingLog] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> List[float]:
    """Minimise the class-balanced cross-entropy with AdaGrad; returns the loss per iteration."""
    if not samples and cfg.iterations > 0:
        raise ValueError("no training samples")
    rng = np.random.default_rng(cfg.seed)
    dtype = net.parameters()[0].dtype
    opt = AdaGrad(net.params)
    batches = _batches(len(samples), min(cfg.batch_size, len(samples)), rng) if samples else None
    history = []
    for it in range(cfg.iterations):
        batch = _maybe_augment([samples[i] for i in next(batches)], cfg, rng)
        x = batch_stack(batch, dtype)
        gt = np.stack([s.gt_boundary for s in batch])[:, None]
        opt.zero_grad()
        loss = losses.class_balanced_bce(net.forward(x), gt)
        value = float(loss.data)
        _check_finite(value, it)
        T.backward(loss)
        lr = lr_schedule("boundary", it, cfg.divisor, cfg.base_lr)
        opt.step(lr)
        history.append(value)
        if log is not None:
            log.write(it, lr, value)
        if callback is not None:
            callback(it, value)
    return history


def predict_boundaries(net: RefineNet, samples: Sequence[Sample], batch_size: int = 8) -> List[np.ndarray]:
    """Boundary probability maps (H, W) for each sample, no gradient tracking."""
    net.set_requires_grad(False)
    dtype = net.parameters()[0].dtype
    out = []
    try:
        for i in range(0, len(samples), batch_size):
            y = net.forward(batch_stack(samples[i : i + batch_size], dtype))
            out.extend(np.asarray(p[0], dtype=np.float64) for p in y.data)
    finally:
        net.set_requires_grad(True)
    return out


def train_fusion(
    net: FusionNet,
    samples: Sequence[Sample],
    boundaries: Sequence[np.ndarray],
    cfg: TrainConfig,
    log: Optional[TrainingLog] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> List[float]:
    """Minimise the deep-supervised flow loss; ``boundaries`` come from the frozen boundary network."""
    if len(boundaries) != len(samples):
        raise ValueError("one boundary map per sample is required")
    if cfg.augment_prob > 0:
        raise ValueError("fusion training uses precomputed boundary maps; augmentation is not supported")
    if not samples and cfg.iterations > 0:
        raise ValueError("no training samples")
    rng = np.random.default_rng(cfg.seed)
    dtype = net.parameters()[0].dtype
    opt = AdaGrad(net.params)
    batches = _batches(len(samples), min(cfg.batch_size, len(samples)), rng) if samples else None
    history = []
    for it in range(cfg.iterations):
        idx = next(batches)
        f0 = flow_tensor([samples[i].fwd_flow for i in idx], dtype)
        m = T.Tensor(np.stack([boundaries[i] for i in idx])[:, None].astype(dtype))
        gt = flow_tensor([samples[i].gt_flow for i in idx], dtype).data
        opt.zero_grad()
        residues, _ = net.forward(f0, m)
        loss = losses.combined_flow_loss(residues, f0, gt)
        value = float(loss.data)
        _check_finite(value, it)
        T.backward(loss)
        lr = lr_schedule("fusion", it, cfg.divisor, cfg.base_lr)
        opt.step(lr)
        history.append(value)
        if log is not None:
            log.write(it, lr, value)
        if callback is not None:
            callback(it, value)
    return history


def refine_flows(net: FusionNet, flows: Sequence[np.ndarray], boundaries: Sequence[np.ndarray], batch_size: int = 4) -> List[np.ndarray]:
    """Refined (H, W, 2) flows, no gradient tracking."""
    net.set_requires_grad(False)
    dtype = net.parameters()[0].dtype
    out = []
    try:
        for i in range(0, len(flows), batch_size):
            f0 = flow_tensor(flows[i : i + batch_size], dtype)
            m = T.Tensor(np.stack(boundaries[i : i + batch_size])[:, None].astype(dtype))
            _, f1 = net.forward(f0, m)
            out.extend(np.ascontiguousarray(f.transpose(1, 2, 0)) for f in f1.data)
    finally:
        net.set_requires_grad(True)
    return out
