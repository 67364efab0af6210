"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a NumPy array plus an
optional gradient buffer, every operation is a pure function that records its
inputs and a gradient closure on the output, and ``backward`` replays the
recorded graph in reverse topological order. Kernels cover exactly what the
network needs: matmul, softmax, convolution, pooling, the three
normalizations, and a suite of elementwise/reduction/layout ops.

Layout convention is channels-last (B, H, W, C) everywhere. Default storage
is 64-bit for gradient-check headroom; ``set_default_dtype(np.float32)``
switches to the fast mode.
"""

from __future__ import annotations

import contextlib
import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ConfigError, NumericsError, ShapeError, UsageError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_FINITE_CHECKS = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported default dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the storage dtype (float64 verify / float32 fast)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_finite_checks(enabled: bool) -> None:
    """When enabled, every kernel output is validated to be finite."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / finite-difference evaluations)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def assert_finite(data, what: str) -> None:
    arr = data.data if isinstance(data, Tensor) else data
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericsError(f"{what} produced {bad} non-finite value(s)")


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    ``grad`` is populated by :meth:`backward` and accumulates across calls
    until reset to ``None``. Non-leaf tensors remember their parents and a
    gradient closure; together these form the tape replayed by backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if any(extent <= 0 for extent in self.data.shape):
            raise ShapeError(f"tensor extents must be positive, got shape {self.data.shape}")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        The loss must be a single element unless an explicit seed gradient is
        supplied. Repeated calls accumulate into existing ``grad`` buffers.
        """
        if not self.requires_grad:
            raise UsageError("backward on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise UsageError(f"backward requires a scalar loss, got shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {seed.shape} != tensor shape {self.shape}")
        tape = GradTape.from_root(self)
        tape.backprop(self, seed)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_promote(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_promote(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else _axis_count(self.shape, axis)
        return reduce_sum(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def gelu(self):
        return gelu(self)


class GradTape:
    """Ordered record of the op graph reachable from a backward root.

    ``nodes`` is a forward topological order; iterating it reversed visits
    every node exactly once in reverse topological order, which is the
    traversal :meth:`backprop` performs.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def backprop(self, root: Tensor, seed: np.ndarray) -> None:
        flowing = {id(root): seed}
        for node in reversed(self.nodes):
            upstream = flowing.pop(id(node), None)
            if upstream is None:
                continue
            if node.grad is None:
                node.grad = upstream.copy()
            else:
                node.grad = node.grad + upstream
            if node._grad_fn is None:
                continue
            parent_grads = node._grad_fn(upstream)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pgrad
                else:
                    flowing[key] = pgrad


# -- graph construction helpers ----------------------------------------------


def _promote(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _node(data: np.ndarray, parents, grad_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = requires
    out._parents = tuple(parents) if requires else ()
    out._grad_fn = grad_fn if requires else None
    out._op = op
    if _FINITE_CHECKS:
        assert_finite(data, op)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    trim = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if trim:
        grad = grad.sum(axis=trim, keepdims=True)
    return grad


def _axis_count(shape, axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


# -- elementwise kernels -------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _promote(b, a)
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), grad_fn, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _promote(b, a)
    data = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _promote(b, a)
    data = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), grad_fn, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _promote(b, a)
    data = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(data, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    data = a.data ** exponent

    def grad_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(data, (a,), grad_fn, "power")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,), "exp")


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _node(data, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _node(data, (a,), lambda g: (g / (2.0 * data),), "sqrt")


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0).astype(a.dtype)
    return _node(data, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    data = expit(a.data)
    return _node(data, (a,), lambda g: (g * data * (1.0 - data),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _node(data, (a,), grad_fn, "gelu")


# -- reductions ----------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(data), (a,), grad_fn, "sum")


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max over ``axis``; ties route gradient to the first maximum in scan order."""
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    perm = kept + axes
    moved = a.data.transpose(perm)
    kept_shape = tuple(a.shape[i] for i in kept)
    flat = moved.reshape(kept_shape + (-1,))
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    if axis is None:
        out = np.asarray(data.reshape(()))
        if keepdims:
            out = out.reshape((1,) * a.ndim)
    elif keepdims:
        shape = list(a.shape)
        for ax in axes:
            shape[ax] = 1
        out = data.reshape(shape)
    else:
        out = data

    def grad_fn(g):
        g_use = np.asarray(g).reshape(kept_shape)
        scatter = np.zeros_like(flat)
        np.put_along_axis(scatter, arg[..., None], g_use[..., None], axis=-1)
        inverse = np.argsort(perm)
        return (scatter.reshape(moved.shape).transpose(inverse),)

    return _node(np.asarray(out), (a,), grad_fn, "max")


# -- layout ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _node(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)
    return _node(data, (a,), lambda g: (g.transpose(inverse),), "transpose")


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into a zero buffer."""
    data = a.data[index]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.dtype)

    def grad_fn(g):
        buffer = np.zeros_like(a.data)
        buffer[index] += g
        return (buffer,)

    return _node(data, (a,), grad_fn, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            b != o for i, (b, o) in enumerate(zip(base, other)) if i != axis
        ):
            raise ShapeError(
                f"concat extents differ off axis {axis}: {tensors[0].shape} vs {t.shape}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        slicer = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(sizes)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(slicer)])
        return tuple(pieces)

    return _node(data, tuple(tensors), grad_fn, "concat")


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows numpy's ((before, after), ...) form."""
    pad_width = tuple((int(b), int(e)) for b, e in pad_width)
    data = np.pad(a.data, pad_width)
    slicer = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, a.shape))
    return _node(data, (a,), lambda g: (g[slicer],), "pad")


# -- matmul / softmax ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        b = _promote(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), grad_fn, "matmul")


def softmax_lastdim(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, stabilized by max subtraction."""
    if a.ndim < 1:
        raise ShapeError("softmax requires at least one axis")
    if a.shape[-1] < 1:
        raise ShapeError(f"softmax over an empty last axis, shape {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return ((g - inner) * data,)

    return _node(data, (a,), grad_fn, "softmax")


# -- convolution / pooling --------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation over (B, H, W, Cin) with kernel (KH, KW, Cin/groups, Cout).

    Zero padding, no kernel flip. Depthwise convolution is ``groups == Cin``
    with a (KH, KW, 1, Cin) kernel.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be (B,H,W,C), got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (KH,KW,Cin/groups,Cout), got {w.shape}")
    batch, height, width, cin = x.shape
    kh, kw, cin_per_group, cout = w.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ShapeError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cin_per_group != cin // groups:
        raise ShapeError(
            f"kernel expects {cin_per_group} channels/group but input has {cin // groups}"
        )
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} != ({cout},)")
    stride = int(stride)
    padding = int(padding)
    h_out = (height + 2 * padding - kh) // stride + 1
    w_out = (width + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    og = cout // groups
    xg = xp.reshape(batch, *xp.shape[1:3], groups, cin_per_group)
    wg = w.data.reshape(kh, kw, cin_per_group, groups, og)

    out = np.zeros((batch, h_out, w_out, groups, og), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xg[:, u:u + (h_out - 1) * stride + 1:stride,
                    v:v + (w_out - 1) * stride + 1:stride]
            out += np.einsum("bijgc,cgo->bijgo", xs, wg[u, v])
    data = out.reshape(batch, h_out, w_out, cout)
    if b is not None:
        data = data + b.data

    def grad_fn(g):
        gg = g.reshape(batch, h_out, w_out, groups, og)
        dw = np.zeros_like(wg)
        dxp = np.zeros_like(xg)
        for u in range(kh):
            for v in range(kw):
                rows = slice(u, u + (h_out - 1) * stride + 1, stride)
                cols = slice(v, v + (w_out - 1) * stride + 1, stride)
                xs = xg[:, rows, cols]
                dw[u, v] = np.einsum("bijgc,bijgo->cgo", xs, gg)
                dxp[:, rows, cols] += np.einsum("bijgo,cgo->bijgc", gg, wg[u, v])
        dx = dxp.reshape(batch, *xp.shape[1:3], cin)
        if padding:
            dx = dx[:, padding:padding + height, padding:padding + width, :]
        grads = [dx, dw.reshape(w.shape)]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, grad_fn, "conv2d")


def pool2d(x: Tensor, kind: str, window, stride=None, pad: bool = False) -> Tensor:
    """Average or max pooling over (B, H, W, C) windows.

    Max pooling sends gradient to the first maximum in row-major window scan
    order. Without ``pad`` the window/stride must tile the extents exactly.
    """
    if kind not in ("avg", "max"):
        raise ConfigError(f"unknown pooling kind {kind!r}")
    if x.ndim != 4:
        raise ShapeError(f"pool2d input must be (B,H,W,C), got {x.shape}")
    wh, ww = (window, window) if isinstance(window, int) else tuple(window)
    if stride is None:
        sh, sw = wh, ww
    else:
        sh, sw = (stride, stride) if isinstance(stride, int) else tuple(stride)
    batch, height, width, channels = x.shape

    pad_h = pad_w = 0
    if pad:
        pad_h = (-(height - wh)) % sh if height >= wh else wh - height
        pad_w = (-(width - ww)) % sw if width >= ww else ww - width
    elif height < wh or width < ww or (height - wh) % sh or (width - ww) % sw:
        raise ShapeError(
            f"pool window {(wh, ww)}/stride {(sh, sw)} does not tile extents "
            f"{(height, width)}; pass pad=True to zero-pad"
        )
    xp = np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    h_out = (xp.shape[1] - wh) // sh + 1
    w_out = (xp.shape[2] - ww) // sw + 1

    slices = []
    for u in range(wh):
        for v in range(ww):
            slices.append(xp[:, u:u + (h_out - 1) * sh + 1:sh,
                          v:v + (w_out - 1) * sw + 1:sw])

    if kind == "avg":
        count = float(wh * ww)
        data = sum(slices) / count

        def grad_fn(g):
            dxp = np.zeros_like(xp)
            share = g / count
            for u in range(wh):
                for v in range(ww):
                    dxp[:, u:u + (h_out - 1) * sh + 1:sh,
                        v:v + (w_out - 1) * sw + 1:sw] += share
            return (dxp[:, :height, :width, :],)

        return _node(data, (x,), grad_fn, "avgpool")

    stack = np.stack(slices, axis=-1)
    arg = stack.argmax(axis=-1)
    data = np.take_along_axis(stack, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        dxp = np.zeros_like(xp)
        for k, (u, v) in enumerate((u, v) for u in range(wh) for v in range(ww)):
            contribution = np.where(arg == k, g, 0.0)
            dxp[:, u:u + (h_out - 1) * sh + 1:sh,
                v:v + (w_out - 1) * sw + 1:sw] += contribution
        return (dxp[:, :height, :width, :],)

    return _node(data, (x,), grad_fn, "maxpool")


# -- normalization -----------------------------------------------------------------


def layernorm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
              eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance over the last axis, then optional affine."""
    if eps <= 0:
        raise ConfigError(f"layernorm eps must be positive, got {eps}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    y = centered / sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def rmsnorm(x: Tensor, gain: Optional[Tensor] = None, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) over the last axis; no mean subtraction."""
    if eps <= 0:
        raise ConfigError(f"rmsnorm eps must be positive, got {eps}")
    ms = (x * x).mean(axis=-1, keepdims=True)
    y = x / sqrt(ms + eps)
    if gain is not None:
        y = y * gain
    return y


def batchnorm(x: Tensor, gain: Tensor, bias: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5, update_running: Optional[bool] = None) -> Tensor:
    """Per-channel batch normalization over (B, H, W) of a channels-last map.

    Training mode normalizes with batch statistics (biased variance) and,
    unless ``update_running`` is False, folds them into the running buffers
    with the given momentum (unbiased variance, matching the usual
    convention). Eval mode normalizes with the running buffers.
    """
    if eps <= 0:
        raise ConfigError(f"batchnorm eps must be positive, got {eps}")
    if x.ndim != 4:
        raise ShapeError(f"batchnorm input must be (B,H,W,C), got {x.shape}")
    if training:
        mu = x.mean(axis=(0, 1, 2), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(0, 1, 2), keepdims=True)
        if update_running is None or update_running:
            n = x.size // x.shape[-1]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.data.reshape(-1)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        y = centered / sqrt(var + eps)
    else:
        mu = Tensor(running_mean.reshape(1, 1, 1, -1), dtype=x.dtype)
        sd = Tensor(np.sqrt(running_var.reshape(1, 1, 1, -1) + eps), dtype=x.dtype)
        y = (x - mu) / sd
    return y * gain + bias
