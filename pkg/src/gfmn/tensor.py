"""Dense float tensors with reverse-mode differentiation.

The graph is recorded dynamically: every operation returns a new immutable
:class:`Tensor` that remembers its parents and a closure mapping the output
gradient to parent gradients.  :func:`backward` walks the recorded graph in
reverse topological order and returns gradients for the requested leaves
without storing anything on the tensors themselves.

Conventions
-----------
* Values are 32-bit floats unless a caller explicitly builds 64-bit leaves
  (the gradient checker does this).  Reductions accumulate in 64-bit.
* The ReLU (and abs) derivative at exactly 0 is 0.
* Convolutions take explicit zero padding; there is no "same" inference.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonScalarLossError, ShapeError

DEFAULT_DTYPE = np.float32

# When not None, kink-sensitive ops append their branch masks here so the
# gradient checker can tell when a perturbation crossed a nondifferentiable
# point.
_kink_trace: list | None = None
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.op = op
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _scalar_error(t: Tensor):
    raise NonScalarLossError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _trace(mask: np.ndarray) -> None:
    if _kink_trace is not None:
        _kink_trace.append(mask.copy())


# ---------------------------------------------------------------- elementwise


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, "operands do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0 and isinstance(a, Tensor):
        c = b

        def backward_scalar(g):
            return (g * c,)

        return Tensor._node(a.data * c, (a,), "scale", backward_scalar)
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data * b.data, (a, b), "mul", backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * x.data * g,)

    return Tensor._node(x.data * x.data, (x,), "square", backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    _trace(sign)

    def backward(g):
        return (g * sign,)

    return Tensor._node(np.abs(x.data), (x,), "abs", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _trace(mask)

    def backward(g):
        return (g * mask,)

    return Tensor._node(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), "relu", backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return Tensor._node(y, (x,), "tanh", backward)


# ---------------------------------------------------------------- reductions


def _axes(ndim: int, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _axes(x.ndim, axis)
    out = np.sum(x.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(x.data.dtype)

    def backward(g):
        return (_expand(g, x.shape, axes, keepdims).astype(x.data.dtype),)

    return Tensor._node(np.asarray(out), (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(x.ndim, axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(x.data.dtype)

    def backward(g):
        return ((_expand(g, x.shape, axes, keepdims) / n).astype(x.data.dtype),)

    return Tensor._node(np.asarray(out), (x,), "mean", backward)


def variance(x: Tensor, axis=0, keepdims: bool = False) -> Tensor:
    """Population variance E[x^2] - E[x]^2 along ``axis``.

    Accumulated in 64-bit and clamped at zero, so rounding can never produce
    a negative variance.  Clamped entries get a zero gradient.
    """
    axes = _axes(x.ndim, axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=axes, keepdims=True)
    raw = (x64 * x64).mean(axis=axes, keepdims=True) - mu * mu
    keep = raw >= 0
    var = np.where(keep, raw, 0.0)
    out = var if keepdims else np.squeeze(var, axis=axes)

    def backward(g):
        g = g if keepdims else np.expand_dims(g, axes)
        gx = 2.0 * (x64 - mu) / n * (g * keep)
        return (gx.astype(x.data.dtype),)

    return Tensor._node(np.asarray(out.astype(x.data.dtype)), (x,), "variance", backward)


# ---------------------------------------------------------------- shape / linear algebra


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", shape, x.shape, "element counts differ") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._node(out, (x,), "reshape", backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"(..., k) @ (..., k, m) with k={a.shape[-1] if a.ndim else '?'}",
                         f"{a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data @ b.data, (a, b), "matmul", backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError("upsample2x", "(N, C, H, W)", x.shape)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._node(out, (x,), "upsample2x", backward)


# ---------------------------------------------------------------- convolutions


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


def _scatter(cols: np.ndarray, hw: tuple[int, int], k: int, s: int) -> np.ndarray:
    # cols: (N, C, Ho, Wo, k, k) -> summed patches on an (N, C, H, W) canvas
    n, c, ho, wo = cols.shape[:4]
    out = np.zeros((n, c) + hw, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += cols[..., i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with weights ``(out, in, k, k)``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"(N, {w.shape[1] if w.ndim == 4 else '?'}, H, W)", x.shape)
    k = w.shape[2]
    n, c, h, wd = x.shape
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"spatial size >= {k - 2 * padding}", x.shape)
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = _windows(xp, k, stride, ho, wo)
    y = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gxp = _scatter(cols, xp.shape[2:], k, stride)
            gx = gxp[:, :, p : p + h, p : p + wd]
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._node(y, parents, "conv2d", backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution with weights ``(in, out, k, k)``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError("conv_transpose2d", f"(N, {w.shape[0] if w.ndim == 4 else '?'}, H, W)", x.shape)
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ShapeError("conv_transpose2d", f"output_padding < stride={stride}", output_padding)
    k = w.shape[2]
    n, c, h, wd = x.shape
    p = padding
    ho = conv_transpose_output_size(h, k, stride, p, output_padding)
    wo = conv_transpose_output_size(wd, k, stride, p, output_padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d", "positive output size", (ho, wo))
    full = ((h - 1) * stride + k + output_padding, (wd - 1) * stride + k + output_padding)
    cols = np.tensordot(x.data, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    y = _scatter(cols, full, k, stride)[:, :, p : p + ho, p : p + wo]
    y = np.ascontiguousarray(y)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1)

    def backward(g):
        gfull = np.zeros((n, w.shape[1]) + full, dtype=g.dtype)
        gfull[:, :, p : p + ho, p : p + wo] = g
        win = _windows(gfull, k, stride, h, wd)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._node(y, parents, "conv_transpose2d", backward)


# ---------------------------------------------------------------- normalisation


def channel_axes(ndim: int) -> tuple[int, ...]:
    return (0,) if ndim == 2 else (0, 2, 3)


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Training-mode batch normalisation over all axes except channels.

    Returns the normalised tensor and the (mean, variance) used, so callers
    can maintain running statistics.
    """
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise ShapeError("batch_norm", f"(N, {gamma.shape[0]}, ...)", x.shape)
    axes = channel_axes(x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=axes, keepdims=True)
    var = np.maximum((x64 * x64).mean(axis=axes, keepdims=True) - mu * mu, 0.0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    gam = _channel_view(gamma.data, x.ndim).astype(np.float64)
    y = (gam * xhat + _channel_view(beta.data, x.ndim)).astype(x.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        gx = ggam = gbeta = None
        if x.requires_grad:
            dxhat = g64 * gam
            gx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            gx = gx.astype(x.data.dtype)
        if gamma.requires_grad:
            ggam = (g64 * xhat).sum(axis=axes).astype(gamma.data.dtype)
        if beta.requires_grad:
            gbeta = g64.sum(axis=axes).astype(beta.data.dtype)
        return gx, ggam, gbeta

    out = Tensor._node(y, (x, gamma, beta), "batch_norm", backward)
    return out, mu.reshape(-1), var.reshape(-1)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``scale * x + shift`` (frozen batch normalisation)."""
    if x.ndim not in (2, 4) or x.shape[1] != scale.shape[0]:
        raise ShapeError("channel_affine", f"(N, {scale.shape[0]}, ...)", x.shape)
    return add(mul(x, reshape(scale, (1, -1) + (1,) * (x.ndim - 2))),
               reshape(shift, (1, -1) + (1,) * (x.ndim - 2)))


# ---------------------------------------------------------------- differentiation


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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Sequence[Tensor]) -> dict | list:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    ``params`` may be a mapping (returns a dict with the same keys) or a
    sequence (returns a list).  Parameters that do not influence the loss get
    zero gradients of their own shape.
    """
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topological(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            if node._parents:
                del grads[id(node)]
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    def lookup(p: Tensor) -> np.ndarray:
        g = grads.get(id(p))
        if g is None:
            return np.zeros_like(p.data)
        return np.asarray(g, dtype=p.data.dtype).reshape(p.shape)

    if isinstance(params, Mapping):
        return {name: lookup(p) for name, p in params.items()}
    return [lookup(p) for p in params]


def forward(fn: Callable[..., Tensor], inputs: Mapping[str, np.ndarray | Tensor],
            shapes: Mapping[str, tuple[int, ...]] | None = None) -> Tensor:
    """Evaluate ``fn(**inputs)`` after checking declared input shapes."""
    for name, expected in (shapes or {}).items():
        if name not in inputs:
            raise ShapeError(name, expected, None, "input missing")
        actual = tuple(np.shape(inputs[name].data if isinstance(inputs[name], Tensor) else inputs[name]))
        if len(actual) != len(expected) or any(e not in (-1, a) for e, a in zip(expected, actual)):
            raise ShapeError(name, expected, actual)
    return fn(**{k: as_tensor(v) for k, v in inputs.items()})


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradReport:
    epsilon: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped: list[tuple[str, int]] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def ok(self, tol: float = 1e-3) -> bool:
        return self.worst < tol


def relative_error(a: float, n: float) -> float:
    return math.fabs(a - n) / max(math.fabs(a), math.fabs(n), 1e-8)


def _evaluate(loss_fn: Callable[[], Tensor]) -> tuple[float, list]:
    global _kink_trace
    _kink_trace = []
    try:
        value = float(loss_fn().data.reshape(-1)[0])
        return value, _kink_trace
    finally:
        _kink_trace = None


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], epsilon: float = 1e-3,
               max_elements: int = 64, seed: int = 0, dtype=np.float64) -> GradReport:
    """Compare analytic gradients with central differences.

    Parameters are promoted to ``dtype`` (64-bit by default) for the duration
    of the check, so the comparison measures the derivative formulas and not
    32-bit rounding.  Elements whose perturbation changes a ReLU/abs branch
    are skipped and listed in ``report.skipped``.  Tensors with more than
    ``max_elements`` entries are checked on a fixed-seed random sample.
    """
    if not 0 < epsilon <= 0.1:
        raise ValueError("epsilon must lie in (0, 0.1]")
    rng = np.random.default_rng(seed)
    saved = {name: p.data for name, p in params.items()}
    report = GradReport(epsilon=epsilon)
    try:
        for p in params.values():
            p.data = p.data.astype(dtype)
        analytic = backward(loss_fn(), params)
        for name, p in params.items():
            flat = p.data.reshape(-1)
            if flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            else:
                idx = np.arange(flat.size)
            worst = 0.0
            count = 0
            a_flat = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + epsilon
                lp, tp = _evaluate(loss_fn)
                flat[i] = orig - epsilon
                lm, tm = _evaluate(loss_fn)
                flat[i] = orig
                if not _same_branches(tp, tm):
                    report.skipped.append((name, int(i)))
                    continue
                numeric = (lp - lm) / (2.0 * epsilon)
                worst = max(worst, relative_error(float(a_flat[i]), numeric))
                count += 1
            report.max_rel_error[name] = worst
            report.checked[name] = count
    finally:
        for name, p in params.items():
            p.data = saved[name]
    return report
