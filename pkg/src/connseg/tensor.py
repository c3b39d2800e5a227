"""A small reverse-mode autodiff tensor on top of numpy.

Only the operations the connectivity model needs are provided. Broadcasting is
limited to tensor-scalar and equal shapes so every backward rule stays easy to
audit against finite differences.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

LOG_CLAMP = 1e-7

_grad_enabled = True
_relu_watch: list | None = None


@contextlib.contextmanager
def watch_relu_inputs():
    """Collect ``min |z|`` over every ReLU input evaluated inside the block."""
    global _relu_watch
    prev, _relu_watch = _relu_watch, []
    try:
        yield _relu_watch
    finally:
        _relu_watch = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def tape(self) -> list["Tensor"]:
        """Recorded operations reachable from this tensor, producers first."""
        order, seen = [], set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(self.tape()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else scale(other, -1.0))

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], tuple) else axes)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _check_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_shapes(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_shapes(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = x.dtype.type(s)
    return _result(x.data * s, (x,), lambda g: (g * s,), "scale")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    if _relu_watch is not None and x.data.size:
        _relu_watch.append(float(np.abs(x.data).min()))
    on = x.data > 0
    return _result(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,), "relu")


# shape / reductions -----------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _result(out, (a, b), backward, "matmul")


# convolutions ---------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    span = size + 2 * padding - dilation * (k - 1) - 1
    if span < 0:
        raise ValueError(
            f"kernel {k} (dilation {dilation}) does not fit input {size} with padding {padding}"
        )
    return span // stride + 1


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), xp.dtype)
    for a in range(kh):
        r0 = a * dilation
        for b in range(kw):
            c0 = b * dilation
            cols[:, :, a, b] = xp[:, :, r0:r0 + stride * (oh - 1) + 1:stride,
                                  c0:c0 + stride * (ow - 1) + 1:stride]
    return cols


def _col2im(cols, out_shape, stride, dilation):
    n, c, kh, kw, oh, ow = cols.shape
    out = np.zeros((n, c) + tuple(out_shape), cols.dtype)
    for a in range(kh):
        r0 = a * dilation
        for b in range(kw):
            c0 = b * dilation
            out[:, :, r0:r0 + stride * (oh - 1) + 1:stride,
                c0:c0 + stride * (ow - 1) + 1:stride] += cols[:, :, a, b]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    oh = conv_output_size(h, kh, stride, dilation, padding)
    ow = conv_output_size(w, kw, stride, dilation, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow).reshape(n, cin * kh * kw, oh * ow)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols).reshape(n, cout, oh, ow)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        g2 = g.reshape(n, cout, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, cin, kh, kw, oh, ow)
            gxp = _col2im(gcols, xp.shape[2:], stride, dilation)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
                     padding: int = 0) -> Tensor:
    """Fractionally strided convolution; ``weight`` is (Cin, Cout, kh, kw).

    Output size is ``(H - 1) * stride - 2 * padding + kh``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv_transpose2d expects 4-D input and kernel")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv_transpose2d: input has {cin} channels, kernel expects {wcin}")
    fh, fw = (h - 1) * stride + kh, (w - 1) * stride + kw
    oh, ow = fh - 2 * padding, fw - 2 * padding
    if oh < 1 or ow < 1:
        raise ValueError("conv_transpose2d: padding removes the whole output")
    w2 = weight.data.reshape(cin, cout * kh * kw)
    x2 = x.data.reshape(n, cin, h * w)
    cols = np.matmul(w2.T, x2).reshape(n, cout, kh, kw, h, w)
    full = _col2im(cols, (fh, fw), stride, 1)
    out = full[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gfull, kh, kw, stride, 1, h, w).reshape(n, cout * kh * kw, h * w)
        gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gx = np.matmul(w2, gcols).reshape(x.shape) if x.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv_transpose2d")


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights (n_out, n_in) for half-pixel-centre linear resampling."""
    m = np.zeros((n_out, n_in), dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize the two trailing axes of ``x`` (align_corners=False convention)."""
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"bilinear_resize: target size must be >= 1, got {size}")
    h, w = x.shape[-2:]
    if (oh, ow) == (h, w):
        return x
    rh = resize_matrix(h, oh, x.dtype)
    rw = resize_matrix(w, ow, x.dtype)
    out = np.matmul(rh, np.matmul(x.data, rw.T))

    def backward(g):
        return (np.matmul(rh.T, np.matmul(g, rw)),)

    return _result(out, (x,), backward, "bilinear_resize")


def resize_array(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Non-differentiable bilinear resize of a plain array's two trailing axes."""
    h, w = a.shape[-2:]
    if (h, w) == tuple(size):
        return a
    dtype = a.dtype if a.dtype.kind == "f" else np.float64
    rh = resize_matrix(h, size[0], dtype)
    rw = resize_matrix(w, size[1], dtype)
    return np.matmul(rh, np.matmul(a.astype(dtype, copy=False), rw.T))


# losses -------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a 0/1 target.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the log; the
    gradient is always ``(sigmoid(z) - y) / n``.
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    if y.shape != logits.shape:
        raise ValueError(f"bce: logits {logits.shape} vs target {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce: target must be binary")
    y = y.astype(logits.dtype, copy=False)
    p = _sigmoid(logits.data)
    pc = np.clip(p, LOG_CLAMP, 1 - LOG_CLAMP)
    n = y.size
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).sum() / n

    def backward(g):
        return ((p - y) * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "bce_with_logits")
