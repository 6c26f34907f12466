"""Small reverse-mode autodiff engine over numpy arrays.

Only the operators needed by the boundary and fusion networks are provided.
Data layout for images is (batch, channels, height, width).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class Tensor:
    """Dense array with an optional gradient and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Wrap an op result; ``backward(gout)`` returns one gradient per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topo_order(root: Tensor) -> list:
    # iterative post-order DFS; each node appears once
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf with requires_grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g), "add")


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor.from_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow free and gives exactly 0.5 at 0
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: non-channel extents differ {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor.from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return Tensor.from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "reduce")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return Tensor.from_op(
        np.asarray(x.data.sum() / n), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "reduce"
    )


def sum_squares(x: Tensor) -> Tensor:
    d = x.data
    return Tensor.from_op(np.asarray((d * d).sum()), (x,), lambda g: (2.0 * g * d,), "reduce")


# ---------------------------------------------------------------------------
# pooling and convolution


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first maximum in row-major order."""
    if x.ndim != 4:
        raise ShapeError("maxpool2 expects a 4-D tensor")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _back(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor.from_op(out, (x,), _back, "maxpool")


def conv_output_size(size: int, k: int, stride: int = 1, pad: int = 0, dilation: int = 1) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation, weight shaped (out_ch, in_ch, k, k), zero padding."""
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError(f"invalid conv arguments stride={stride} pad={pad} dilation={dilation}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(w, kw, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wd = weight.data

    def window(i, j):
        r0, c0 = i * dilation, j * dilation
        return (slice(None), slice(None), slice(r0, r0 + stride * (ho - 1) + 1, stride), slice(c0, c0 + stride * (wo - 1) + 1, stride))

    # accumulate one kernel tap at a time: memory stays O(output)
    acc = np.zeros((o, n, ho, wo), dtype=np.result_type(x.data, wd))
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(wd[:, :, i, j], xp[window(i, j)], axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def _back(g):
        gt = g.transpose(1, 0, 2, 3)
        gw = np.empty_like(wd) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                sl = window(i, j)
                if gw is not None:
                    gw[:, :, i, j] = np.tensordot(gt, xp[sl], axes=([1, 2, 3], [0, 2, 3]))
                if gxp is not None:
                    gxp[sl] += np.tensordot(wd[:, :, i, j], gt, axes=([0], [0])).transpose(1, 0, 2, 3)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb)

    parents = (x, weight) + ((bias,) if bias is not None else (Tensor(np.zeros(o)),))
    return Tensor.from_op(out, parents, _back, "conv")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution, weight shaped (in_ch, out_ch, k, k).

    Output extent is (size - 1) * stride + k, so a 2x2 kernel with stride 2
    exactly doubles the resolution.
    """
    if stride < 1:
        raise ValueError(f"invalid stride {stride}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv_transpose2d expects 4-D input and weight")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({o},)")
    ho, wo = (h - 1) * stride + kh, (w - 1) * stride + kw
    wd = weight.data

    def window(a, b):
        return (slice(None), slice(None), slice(a, a + stride * (h - 1) + 1, stride), slice(b, b + stride * (w - 1) + 1, stride))

    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x.data, wd))
    for a in range(kh):
        for b in range(kw):
            out[window(a, b)] += np.tensordot(x.data, wd[:, :, a, b], axes=([1], [0])).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def _back(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.empty_like(wd) if weight.requires_grad else None
        for a in range(kh):
            for b in range(kw):
                gs = g[window(a, b)]
                if gx is not None:
                    gx += np.tensordot(gs, wd[:, :, a, b], axes=([1], [1])).transpose(0, 3, 1, 2)
                if gw is not None:
                    gw[:, :, a, b] = np.tensordot(x.data, gs, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb)

    parents = (x, weight) + ((bias,) if bias is not None else (Tensor(np.zeros(o)),))
    return Tensor.from_op(out, parents, _back, "transposed-conv")


def replicate_pad(x: Tensor, pad: int) -> Tensor:
    """Pad the two spatial axes by repeating border values."""
    n, c, h, w = x.shape
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    out = x.data[:, :, rows][:, :, :, cols]

    def _back(g):
        gr = np.zeros((n, c, h, w + 2 * pad), dtype=g.dtype)
        np.add.at(gr, (slice(None), slice(None), rows), g)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), cols), gr)
        return (gx,)

    return Tensor.from_op(out, (x,), _back, "pad")


def fixed_filter_conv(x: Tensor, kernels: np.ndarray) -> Tensor:
    """Apply each fixed (non-trainable) kernel to each channel separately.

    ``kernels`` has shape (K, k, k) with odd k; borders are replicate padded so
    the spatial size is preserved. Output channel ``c * K + m`` holds kernel
    ``m`` applied to input channel ``c``.
    """
    kernels = np.asarray(kernels, dtype=x.dtype)
    if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2] or kernels.shape[1] % 2 == 0:
        raise ShapeError(f"fixed_filter_conv: kernels must be (K, k, k) with odd k, got {kernels.shape}")
    n, c, h, w = x.shape
    nk, k, _ = kernels.shape
    padded = replicate_pad(x, k // 2)
    # depthwise: fold channels into batch and run one shared 1->K conv
    flat = Tensor.from_op(
        padded.data.reshape(n * c, 1, h + k - 1, w + k - 1),
        (padded,),
        lambda g: (g.reshape(padded.shape),),
        "reshape",
    )
    y = conv2d(flat, Tensor(kernels[:, None]), None)
    return Tensor.from_op(
        y.data.reshape(n, c * nk, h, w), (y,), lambda g: (g.reshape(y.shape),), "fixed-filter-conv"
    )


def parameters_require_grad(tensors: Iterable[Tensor], flag: bool) -> None:
    for t in tensors:
        t.requires_grad = flag
        t.grad = np.zeros_like(t.data) if flag else None
