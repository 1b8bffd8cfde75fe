"""A small dense-tensor engine with reverse-mode differentiation.

Only the operations needed by the counting networks and their losses are
provided: dilated/strided 2-D convolution, ReLU, channel softmax and a
handful of elementwise reductions. Arrays are plain numpy arrays in
(batch, channel, height, width) layout; no broadcasting beyond "same shape
or python scalar" is supported.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NumericError, ValidationError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, cached features)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Array plus an optional gradient record.

    Leaves created with ``requires_grad=True`` accumulate into ``.grad`` on
    :meth:`backward`; intermediate nodes never keep their gradients.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self) -> None:
        """Back-propagate from a scalar; leaf gradients accumulate."""
        if self.data.size != 1:
            raise ValidationError(f"backward() needs a scalar, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise NumericError(f"non-finite loss value {self.item()}")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if not np.isfinite(g).all():
                    raise NumericError(f"non-finite gradient for {node!r}")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic ---------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ValidationError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _check_operand(a: Tensor, b) -> None:
    if isinstance(b, Tensor):
        b = b.data
    if np.ndim(b) and np.shape(b) != a.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {np.shape(b)}")


def add(a: Tensor, b) -> Tensor:
    _check_operand(a, b)
    if isinstance(b, Tensor):
        return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))
    return Tensor._result(a.data + b, (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    _check_operand(a, b)
    if isinstance(b, Tensor):
        return Tensor._result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    c = np.asarray(b, dtype=a.dtype)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor._result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, g / n),)
    )


def square(a: Tensor) -> Tensor:
    return Tensor._result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tabs(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def log(a: Tensor) -> Tensor:
    # log(0) = -inf is reported by backward() as a NumericError, not as a warning
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing; advanced indexing with repeats is not supported."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor._result(np.ascontiguousarray(a.data[index]), (a,), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    return Tensor._result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 for every (batch, y, x) position."""
    if x.ndim != 4 or x.shape[1] < 2:
        raise ValidationError(f"softmax_channels expects (N, C>=2, H, W), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._result(s, (x,), backward)


# -- convolution -------------------------------------------------------

def conv_output_extent(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


@dataclass
class ConvSpec:
    """Convolution parameters: weights (out, in, kh, kw), bias (out,) and geometry."""

    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ValidationError(f"kernel must be rank 4, got {self.kernel.shape}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValidationError(
                f"bad conv geometry stride={self.stride} dilation={self.dilation} "
                f"padding={self.padding}"
            )
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ValidationError(
                f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}"
            )

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def output_shape(self, input_shape: tuple) -> tuple:
        n, c, h, w = input_shape
        if c != self.in_channels:
            raise ValidationError(
                f"conv2d channel mismatch: input {tuple(input_shape)} vs kernel {self.kernel.shape}"
            )
        _, _, kh, kw = self.kernel.shape
        ho = conv_output_extent(h, kh, self.stride, self.dilation, self.padding)
        wo = conv_output_extent(w, kw, self.stride, self.dilation, self.padding)
        if ho < 1 or wo < 1:
            raise ValidationError(
                f"conv2d output would be empty: input {tuple(input_shape)} vs kernel "
                f"{self.kernel.shape} (stride={self.stride}, dilation={self.dilation}, "
                f"padding={self.padding})"
            )
        return n, self.out_channels, ho, wo


def _non_overlapping(kh, kw, stride, dilation, padding) -> bool:
    return dilation == 1 and padding == 0 and stride == kh == kw


def _im2col(xp: np.ndarray, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    n, c = xp.shape[:2]
    s_n, s_c, s_h, s_w = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s_n, s_c, dilation * s_h, dilation * s_w, stride * s_h, stride * s_w),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, padded_shape, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    if _non_overlapping(kh, kw, stride, dilation, 0):
        block = cols.transpose(0, 1, 4, 2, 5, 3).reshape(n, c, ho * kh, wo * kw)
        out[:, :, : ho * kh, : wo * kw] = block
        return out
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            out[:, :, y0 : y0 + h_span : stride, x0 : x0 + w_span : stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation with stride, dilation and zero padding (im2col + GEMM)."""
    if x.ndim != 4:
        raise ValidationError(f"conv2d input must be rank 4, got {x.shape}")
    n, o, ho, wo = spec.output_shape(x.shape)
    w = spec.kernel
    _, c, kh, kw = w.shape
    p, s, d = spec.padding, spec.stride, spec.dilation

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, d, ho, wo)
    w2d = w.data.reshape(o, c * kh * kw)
    out = np.matmul(w2d, cols)
    if spec.bias is not None:
        out += spec.bias.data[:, None]
    out = out.reshape(n, o, ho, wo)

    parents = (x, w) if spec.bias is None else (x, w, spec.bias)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(w2d.T, g2)
            gxp = _col2im(gcols, padded_shape, kh, kw, s, d, ho, wo)
            gx = gxp[:, :, p : padded_shape[2] - p, p : padded_shape[3] - p] if p else gxp
        if spec.bias is not None and spec.bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if spec.bias is None else (gx, gw, gb)

    return Tensor._result(out, parents, backward)


def conv2d_direct(x: np.ndarray, kernel: np.ndarray, bias=None, stride=1, dilation=1, padding=0):
    """Tap-by-tap reference convolution (forward only, no im2col)."""
    n, c, h, w = x.shape
    o, c2, kh, kw = kernel.shape
    if c != c2:
        raise ValidationError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    ho = conv_output_extent(h, kh, stride, dilation, padding)
    wo = conv_output_extent(w, kw, stride, dilation, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, kernel))
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            patch = xp[:, :, y0 : y0 + stride * (ho - 1) + 1 : stride, x0 : x0 + stride * (wo - 1) + 1 : stride]
            out += np.einsum("oc,nchw->nohw", kernel[:, :, i, j], patch)
    if bias is not None:
        out += np.asarray(bias)[None, :, None, None]
    return out
