"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def projected(fn: Callable[..., Tensor], out_shape, rng: np.random.Generator) -> Callable[..., Tensor]:
    """Turn a tensor-valued op into a scalar by a fixed random projection."""
    proj = rng.standard_normal(out_shape)

    def loss(*args):
        y = fn(*args)
        return T.sum(_mul_const(y, proj))

    return loss


def _mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    return Tensor.from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, index=None, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. entries of ``t`` (all, or the flat ``index`` list)."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(loss_fn().data)
        flat[i] = orig - step
        fm = float(loss_fn().data)
        flat[i] = orig
        out[k] = (fp - fm) / (2 * step)
    return out if index is not None else out.reshape(t.shape)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    step: float = FD_STEP,
    floor: float = 1e-6,
) -> float:
    """Max relative error over ``wrt`` between backward() and central differences.

    With ``max_entries`` set, only that many randomly chosen entries per
    tensor are probed.
    """
    for t in wrt:
        t.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    analytic = [t.grad.copy() for t in wrt]
    worst = 0.0
    for t, a in zip(wrt, analytic):
        if max_entries is None or t.data.size <= max_entries:
            num = numeric_grad(loss_fn, t, step=step)
            worst = max(worst, relative_error(a, num, floor))
        else:
            rng = rng or np.random.default_rng(0)
            idx = list(rng.choice(t.data.size, size=max_entries, replace=False))
            num = numeric_grad(loss_fn, t, index=idx, step=step)
            worst = max(worst, relative_error(a.reshape(-1)[idx], num, floor))
    return worst


@dataclass
class OpCheck:
    name: str
    max_rel_error: float
    instances: int


def _rand(rng, shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


def _distinct(rng, shape):
    # well separated values so a 1e-5 nudge never changes an argmax
    vals = rng.permutation(int(np.prod(shape))).astype(np.float64) * 0.1
    return Tensor(vals.reshape(shape), requires_grad=True)


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    x += np.sign(x) * 0.05
    return Tensor(x, requires_grad=True)


def default_op_checks(instances: int = 20, seed: int = 0) -> list:
    """Finite-difference check of every differentiable tensor op (double precision)."""
    from . import losses

    rng = np.random.default_rng(seed)
    results = []

    def run(name, make):
        worst = 0.0
        for _ in range(instances):
            fn, wrt = make()
            worst = max(worst, check_gradients(fn, wrt))
        results.append(OpCheck(name, worst, instances))

    def conv_case(dilation=1, stride=1, pad=1):
        def make():
            x, w, b = _rand(rng, (2, 3, 8, 8)), _rand(rng, (4, 3, 3, 3)), _rand(rng, (4,))
            y_shape = T.conv2d(x, w, b, stride, pad, dilation).shape
            f = projected(lambda: T.conv2d(x, w, b, stride, pad, dilation), y_shape, rng)
            return f, [x, w, b]
        return make

    run("conv2d", conv_case())
    run("conv2d_dilated", conv_case(dilation=2, pad=2))
    run("conv2d_strided", conv_case(stride=2, pad=1))

    def deconv():
        x, w, b = _rand(rng, (2, 3, 4, 5)), _rand(rng, (3, 4, 2, 2)), _rand(rng, (4,))
        f = projected(lambda: T.conv_transpose2d(x, w, b, 2), (2, 4, 8, 10), rng)
        return f, [x, w, b]

    run("conv_transpose2d", deconv)

    def pool():
        x = _distinct(rng, (2, 3, 6, 8))
        return projected(lambda: T.maxpool2(x), (2, 3, 3, 4), rng), [x]

    run("maxpool2", pool)

    def relu():
        x = _away_from_zero(rng, (2, 3, 5, 5))
        return projected(lambda: T.relu(x), x.shape, rng), [x]

    run("relu", relu)

    def sigmoid():
        x = _rand(rng, (2, 3, 5, 5))
        return projected(lambda: T.sigmoid(x), x.shape, rng), [x]

    run("sigmoid", sigmoid)

    def add():
        a, b = _rand(rng, (2, 3, 4, 4)), _rand(rng, (2, 3, 4, 4))
        return projected(lambda: T.add(a, b), a.shape, rng), [a, b]

    run("add", add)

    def concat():
        a, b = _rand(rng, (2, 3, 4, 4)), _rand(rng, (2, 2, 4, 4))
        return projected(lambda: T.concat_channels(a, b), (2, 5, 4, 4), rng), [a, b]

    run("concat_channels", concat)

    def prewitt():
        x = _rand(rng, (2, 2, 6, 7))
        return projected(lambda: T.fixed_filter_conv(x, losses.PREWITT), (2, 4, 6, 7), rng), [x]

    run("fixed_filter_conv", prewitt)

    def bce():
        p = Tensor(rng.uniform(0.05, 0.95, (1, 1, 6, 6)), requires_grad=True)
        gt = (rng.random((1, 1, 6, 6)) < 0.3).astype(np.float64)
        return (lambda: losses.class_balanced_bce(p, gt)), [p]

    run("class_balanced_bce", bce)

    def epe():
        f = _rand(rng, (1, 2, 5, 6))
        gt = rng.standard_normal((1, 2, 5, 6))
        return (lambda: losses.epe(f, gt)), [f]

    run("epe", epe)

    def bpl():
        f = _rand(rng, (1, 2, 5, 6))
        gt = rng.standard_normal((1, 2, 5, 6))
        return (lambda: losses.boundary_preserving_loss(f, gt)), [f]

    run("boundary_preserving_loss", bpl)

    def combined():
        r1, r2 = _rand(rng, (1, 2, 5, 6)), _rand(rng, (1, 2, 5, 6))
        f0 = Tensor(rng.standard_normal((1, 2, 5, 6)))
        gt = rng.standard_normal((1, 2, 5, 6))
        return (lambda: losses.combined_flow_loss([r1, r2], f0, gt)), [r1, r2]

    run("combined_flow_loss", combined)
    return results
