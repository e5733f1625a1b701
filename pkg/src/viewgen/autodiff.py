"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every op records its parents and a backward closure on the output tensor; the
graph is rebuilt on each forward pass.  ``Tensor.backward`` walks the graph in
reverse topological order and accumulates gradients into leaf tensors.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numba
import numpy as np

_DTYPE = np.float64


class ContractError(ValueError):
    """Raised when an op receives inputs that violate its shape contract."""


def set_default_dtype(dtype) -> None:
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


def default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "tag")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name
        self.tag = None  # free-form provenance label (e.g. "input", "render")

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor(self.data)
        out.tag = self.tag
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ----------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(a.data**exponent, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _stable_sigmoid(x),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    """Leaky ReLU; the derivative at exactly 0 is taken from the positive branch."""
    a = as_tensor(a)
    if not 0.0 <= slope < 1.0:
        raise ContractError(f"leaky_relu slope must be in [0, 1), got {slope}")
    mask = a.data >= 0
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _make(np.where(cond, a.data, b.data), (a, b), backward)


# ------------------------------------------------------------------ reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / max(count, 1))


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` with zero subgradient at the origin."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(scale, axis),)

    return _make(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


# --------------------------------------------------------------- shape ops
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


def take(a, indices) -> Tensor:
    """Gather rows (axis 0) with an integer index array of any shape; repeats allowed."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, indices, g)
        return (acc,)

    return _make(a.data[indices], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.ndim == 1 or b.ndim == 1:
            raise ContractError("matmul backward supports ndim >= 2 only")
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def sparse_matmul(matrix, a) -> Tensor:
    """Constant (scipy sparse or dense) matrix times a tensor over its first axis."""
    a = as_tensor(a)
    flat = a.data.reshape(a.shape[0], -1)
    out = np.asarray(matrix @ flat).reshape((matrix.shape[0],) + a.shape[1:])

    def backward(g):
        gflat = np.asarray(matrix.T @ g.reshape(g.shape[0], -1))
        return (gflat.reshape(a.shape),)

    return _make(out, (a,), backward)


def linear(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, D) and weight (O, D)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ContractError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), backward)


# -------------------------------------------------------------- convolution
@numba.njit(cache=True)
def _col2im(gcols, hp, wp, stride):
    n, ho, wo, c, k, _ = gcols.shape
    out = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                y0, x0 = oy * stride, ox * stride
                for ch in range(c):
                    for i in range(k):
                        for j in range(k):
                            out[b, ch, y0 + i, x0 + j] += gcols[b, oy, ox, ch, i, j]
    return out


def conv2d(x, weight, bias, stride: int = 2, pad: int = 2) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW layout, square odd kernels."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, k, k2 = weight.shape
    if cw != c:
        raise ContractError(f"conv2d: input has {c} channels but weight expects {cw}")
    if k != k2 or k % 2 == 0:
        raise ContractError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if bias.shape != (f,):
        raise ContractError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ContractError(f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {k}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, Ho, Wo, C, k, k) contiguous columns
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(f, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = _col2im(gcols, xp.shape[2], xp.shape[3], stride)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, weight, bias), backward)


def norm_layer(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W) with batch statistics."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g4 = gamma.data[None, :, None, None]
    out = xhat * g4 + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * g4
        gx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def avg_pool(x, factor: int) -> Tensor:
    """Non-overlapping mean pooling of an NCHW tensor by an integer factor."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ContractError(f"avg_pool: {h}x{w} not divisible by {factor}")
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (up / (factor * factor),)

    return _make(out, (x,), backward)


# ------------------------------------------------------------ bilinear sampling
def _axis_weights(coord: np.ndarray, extent: int, wrap: bool):
    """Lattice position, lower index, upper index, fraction and d(pos)/d(coord).

    Align-corners convention: coord 0 sits on the first sample, coord 1 on the
    last.  With ``wrap`` the chart is periodic with period ``extent - 1``
    samples (first and last sample lie on the same seam); otherwise clamped.
    """
    if extent == 1:
        zeros = np.zeros(coord.shape, dtype=np.int64)
        return zeros, zeros, np.zeros(coord.shape), np.zeros(coord.shape)
    span = extent - 1
    pos = coord * span
    if wrap:
        outside = (pos < 0) | (pos > span)
        pos = np.where(outside, np.mod(pos, span), pos)
        dpos = np.full(coord.shape, float(span))
    else:
        dpos = np.where((pos >= 0) & (pos <= span), float(span), 0.0)
        pos = np.clip(pos, 0.0, span)
    lo = np.minimum(np.floor(pos).astype(np.int64), extent - 2)
    frac = pos - lo
    return lo, lo + 1, frac, dpos


def bilinear_grid_sample(field, coords, wrap_u: bool = True) -> Tensor:
    """Sample a (C, H, W) or (N, C, H, W) field at (u, v) chart coordinates.

    ``u`` indexes columns (wrapped by default), ``v`` rows (clamped).  ``coords``
    has shape (L, 2) shared across the batch, or (N, L, 2) per sample.  Output
    has shape (C, L) or (N, C, L).  Gradients flow to the field and to coords.
    """
    field = as_tensor(field)
    coords = as_tensor(coords)
    batched = field.ndim == 4
    fdata = field.data if batched else field.data[None]
    n, c, h, w = fdata.shape
    cdata = coords.data
    if cdata.ndim == 2:
        cdata = np.broadcast_to(cdata, (n,) + cdata.shape)
    length = cdata.shape[1]
    if length == 0:
        out = np.zeros((n, c, 0), dtype=fdata.dtype)
        out_t = Tensor(out if batched else out[0])
        return out_t
    x0, x1, fx, dxdu = _axis_weights(cdata[..., 0], w, wrap_u)
    y0, y1, fy, dydv = _axis_weights(cdata[..., 1], h, False)
    if h == 1:
        y1 = y0
    if w == 1:
        x1 = x0
    bidx = np.arange(n)[:, None]

    def gather(yi, xi):
        # (N, L, C) -> (N, C, L)
        return fdata.transpose(0, 2, 3, 1)[bidx, yi, xi].transpose(0, 2, 1)

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    fxe, fye = fx[:, None, :], fy[:, None, :]
    w00 = (1 - fye) * (1 - fxe)
    w01 = (1 - fye) * fxe
    w10 = fye * (1 - fxe)
    w11 = fye * fxe
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def backward(g):
        gfield = None
        if field.requires_grad:
            acc = np.zeros((n, h, w, c), dtype=fdata.dtype)
            for wgt, yi, xi in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
                np.add.at(acc, (np.broadcast_to(bidx, yi.shape), yi, xi), (g * wgt).transpose(0, 2, 1))
            gfield = acc.transpose(0, 3, 1, 2)
            if not batched:
                gfield = gfield[0]
        gcoords = None
        if coords.requires_grad:
            du = ((1 - fye) * (v01 - v00) + fye * (v11 - v10)) * dxdu[:, None, :]
            dv = ((1 - fxe) * (v10 - v00) + fxe * (v11 - v01)) * dydv[:, None, :]
            gc = np.stack([(g * du).sum(axis=1), (g * dv).sum(axis=1)], axis=-1)
            gcoords = gc if coords.ndim == 3 else gc.sum(axis=0)
        return gfield, gcoords

    result = out if batched else out[0]
    return _make(result, (field, coords), backward)


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Dense (dst, src) align-corners interpolation weights along one axis."""
    m = np.zeros((dst, src))
    coords = np.zeros(dst) if dst == 1 else np.arange(dst) / (dst - 1)
    lo, hi, frac, _ = _axis_weights(coords, src, False)
    if src == 1:
        m[:, 0] = 1.0
        return m
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x, height: int, width: int) -> Tensor:
    """Align-corners bilinear resize of a (C, H, W) or (N, C, H, W) tensor.

    Equivalent to clamped ``bilinear_grid_sample`` on the target lattice,
    evaluated separably.
    """
    x = as_tensor(x)
    if height < 1 or width < 1:
        raise ContractError(f"bilinear_resize target must be >= 1, got {height}x{width}")
    ah = _resize_matrix(x.shape[-2], height).astype(x.data.dtype)
    aw = _resize_matrix(x.shape[-1], width).astype(x.data.dtype)
    out = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return _make(out, (x,), backward)


# ------------------------------------------------------------ parameter sets
class ParameterSet:
    """Ordered name -> trainable Tensor map; iteration order is insertion order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def merged(self, prefix: str, other: "ParameterSet") -> None:
        for name, t in other:
            key = f"{prefix}{name}"
            if key in self._params:
                raise KeyError(f"duplicate parameter name {key!r}")
            self._params[key] = t


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, eps: float = 1e-4, probes: Iterable[tuple] | None = None):
    """Central finite differences of ``fn`` w.r.t. entries of ``array`` (mutated in place)."""
    indices = list(probes) if probes is not None else list(np.ndindex(array.shape))
    values = []
    for idx in indices:
        orig = array[idx]
        array[idx] = orig + eps
        fp = fn()
        array[idx] = orig - eps
        fm = fn()
        array[idx] = orig
        values.append((fp - fm) / (2 * eps))
    return indices, np.array(values)


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-4, n_probes: int = 20, rng=None, floor: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences on random probes.

    ``fn`` rebuilds the graph from the current values of ``tensors`` and
    returns a scalar.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat_count = t.data.size
        k = min(n_probes, flat_count)
        picks = rng.choice(flat_count, size=k, replace=False)
        probes = [np.unravel_index(p, t.shape) for p in picks]
        _, num = numerical_gradient(lambda: fn().item(), t.data, eps, probes)
        for idx, nv in zip(probes, num):
            av = a[idx]
            err = abs(av - nv) / max(abs(av), abs(nv), floor)
            worst = max(worst, err)
    return worst
