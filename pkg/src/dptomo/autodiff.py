"""Minimal reverse-mode differentiation over real and complex numpy arrays.

Operations on :class:`Tensor` objects are recorded on the innermost active
:class:`Tape`. Calling :meth:`Tape.backward` replays the recorded nodes in
reverse and returns the gradient of a real scalar loss for every leaf tensor
created with ``requires_grad=True``.

Gradient convention for complex arrays: the gradient of a real loss ``L`` with
respect to ``z`` is stored as ``dL/dRe(z) + 1j * dL/dIm(z)``. Under this
convention the vector-Jacobian product of a complex-linear map ``A`` is
``A^H g``, and that of a holomorphic function ``f`` is ``g * conj(f'(z))``.
Gradients flowing into a real-valued input keep only their real part.

Outside a tape every operation is plain numpy evaluation with no bookkeeping.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Node", "as_tensor", "backward",
    "add", "sub", "mul", "div", "neg", "exp", "sqrt", "abs2", "real", "imag",
    "conj", "make_complex", "sum", "mean", "reshape", "transpose", "getitem",
    "take", "stack", "concatenate", "pad", "roll", "fftshift", "ifftshift",
    "fftn", "ifftn", "minimum", "maximum", "leaky_relu", "linear", "conv3d",
    "upsample3d", "batch_norm", "forward_diff",
]

_TAPES: list["Tape"] = []


class Tensor:
    """An ndarray with an optional place on the gradient tape."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.inexact):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    @property
    def real(self):
        return real(self)

    @property
    def imag(self):
        return imag(self)

    def conj(self):
        return conj(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One recorded operation: kind, inputs, output and its adjoint rule."""

    kind: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records differentiable operations while active (``with Tape() as tape:``).

    Nodes are appended in execution order, which is a topological order of the
    computation graph.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, node: Node):
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        seen, out = set(), []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in self._produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of the real scalar ``loss`` for every leaf on this tape.

        Leaves that the loss does not depend on receive zeros. Each leaf's
        ``.grad`` attribute is also set.
        """
        if not isinstance(loss, Tensor) or id(loss) not in self._produced:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1 or loss.is_complex:
            raise ValueError("backward needs a real scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = _fit_grad(gi, t)
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        result = {}
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g
            result[leaf] = g
        return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _fit_grad(g, t: Tensor) -> np.ndarray:
    g = np.asarray(g)
    shape = t.shape
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        g = g.reshape(shape)
    if not t.is_complex and np.iscomplexobj(g):
        g = g.real
    return g


def _emit(kind: str, out_data, inputs: Sequence[Tensor], vjp) -> Tensor:
    if _TAPES and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        _TAPES[-1].record(Node(kind, tuple(inputs), out, vjp))
        return out
    return Tensor(out_data)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (g * np.conj(b.data), g * np.conj(a.data)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = a.data / b.data

    def vjp(g):
        ga = g / np.conj(b.data)
        return ga, -ga * np.conj(y)

    return _emit("div", y, (a, b), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * np.conj(y),))


def sqrt(a) -> Tensor:
    """Square root (principal branch for complex input).

    The derivative at exactly zero is taken as zero so that amplitude losses
    stay finite at dark pixels.
    """
    a = as_tensor(a)
    y = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y == 0, 0.0, 0.5 / np.where(y == 0, 1.0, y))
        return (g * np.conj(d),)

    return _emit("sqrt", y, (a,), vjp)


def abs2(a) -> Tensor:
    a = as_tensor(a)
    y = a.data.real ** 2 + a.data.imag ** 2 if a.is_complex else a.data ** 2
    return _emit("abs2", y, (a,), lambda g: (2.0 * g.real * a.data,))


def real(a) -> Tensor:
    a = as_tensor(a)
    return _emit("real", np.real(a.data).copy(), (a,), lambda g: (g.real,))


def imag(a) -> Tensor:
    a = as_tensor(a)
    return _emit("imag", np.imag(a.data).copy(), (a,), lambda g: (1j * g.real,))


def conj(a) -> Tensor:
    a = as_tensor(a)
    return _emit("conj", np.conj(a.data), (a,), lambda g: (np.conj(g),))


def make_complex(re, im) -> Tensor:
    """Pack two real tensors into ``re + 1j * im``."""
    re, im = as_tensor(re), as_tensor(im)
    if re.is_complex or im.is_complex:
        raise TypeError("make_complex expects real inputs")
    return _emit("complex", re.data + 1j * im.data, (re, im),
                 lambda g: (np.real(g), np.imag(g)))


def minimum(a, c: float) -> Tensor:
    """Elementwise ``min(a, c)`` against a constant; real input only."""
    a = as_tensor(a)
    keep = a.data < c
    return _emit("minimum", np.where(keep, a.data, c), (a,), lambda g: (g * keep,))


def maximum(a, c: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data > c
    return _emit("maximum", np.where(keep, a.data, c), (a,), lambda g: (g * keep,))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _emit("leaky_relu", np.where(pos, a.data, slope * a.data), (a,),
                 lambda g: (np.where(pos, g, slope * g),))


def linear(a) -> Tensor:
    """Identity activation."""
    return as_tensor(a)


# ---------------------------------------------------------------- reductions and shapes

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    y = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _emit("sum", y, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    y = a.data[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        gx = np.zeros(a.shape, dtype=np.result_type(a.dtype, g.dtype))
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _emit("getitem", y.copy() if basic else y, (a,), vjp)


def take(a, flat_index: np.ndarray) -> Tensor:
    """Gather ``a.ravel()[flat_index]``; the adjoint scatter-adds."""
    a = as_tensor(a)
    flat_index = np.asarray(flat_index)
    y = a.data.reshape(-1)[flat_index]

    def vjp(g):
        idx = flat_index.reshape(-1)
        n = a.data.size
        gr = np.bincount(idx, weights=np.real(g).reshape(-1), minlength=n)
        if np.iscomplexobj(g):
            gr = gr + 1j * np.bincount(idx, weights=np.imag(g).reshape(-1), minlength=n)
        return (gr.reshape(a.shape),)

    return _emit("take", y, (a,), vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    y = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return [np.take(g, i, axis=axis) for i in range(len(ts))]

    return _emit("stack", y, ts, vjp)


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    y = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concatenate", y, ts, lambda g: np.split(g, splits, axis=axis))


def pad(a, pad_width) -> Tensor:
    """Zero padding with ``np.pad`` semantics."""
    a = as_tensor(a)
    pw = np.broadcast_to(np.asarray(pad_width, dtype=int), (a.ndim, 2))
    y = np.pad(a.data, pw)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.shape))
    return _emit("pad", y, (a,), lambda g: (g[crop],))


def roll(a, shift, axis) -> Tensor:
    a = as_tensor(a)
    shift_back = tuple(-s for s in np.atleast_1d(shift))
    return _emit("roll", np.roll(a.data, shift, axis), (a,),
                 lambda g: (np.roll(g, shift_back, axis),))


def fftshift(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(np.atleast_1d(axes))
    return roll(a, tuple(a.shape[ax] // 2 for ax in axes), axes)


def ifftshift(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(np.atleast_1d(axes))
    return roll(a, tuple(-(a.shape[ax] // 2) for ax in axes), axes)


def fftn(a, axes) -> Tensor:
    """Unitary DFT over ``axes``; its adjoint is the unitary inverse DFT."""
    a = as_tensor(a)
    axes = tuple(np.atleast_1d(axes))
    return _emit("fftn", np.fft.fftn(a.data, axes=axes, norm="ortho"), (a,),
                 lambda g: (np.fft.ifftn(g, axes=axes, norm="ortho"),))


def ifftn(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(np.atleast_1d(axes))
    return _emit("ifftn", np.fft.ifftn(a.data, axes=axes, norm="ortho"), (a,),
                 lambda g: (np.fft.fftn(g, axes=axes, norm="ortho"),))


def forward_diff(a, axis: int) -> Tensor:
    """``a[i+1] - a[i]`` along ``axis`` with a zero difference at the far edge."""
    a = as_tensor(a)
    y = np.zeros_like(a.data)
    n = a.shape[axis]
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
    lo, hi = tuple(lo), tuple(hi)
    y[lo] = a.data[hi] - a.data[lo]

    def vjp(g):
        gx = np.zeros_like(g)
        gx[hi] += g[lo]
        gx[lo] -= g[lo]
        return (gx,)

    return _emit("forward_diff", y, (a,), vjp)


# ---------------------------------------------------------------- network layers

def conv3d(x, w, b=None, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """3D convolution (cross-correlation) of a ``(C_in, X, Y, Z)`` volume.

    ``w`` has shape ``(C_out, C_in, k, k, k)``. Zero padding defaults to
    ``k // 2``. Every input extent must be divisible by ``stride``.
    """
    x, w = as_tensor(x), as_tensor(w)
    c_out, c_in, kx, ky, kz = w.shape
    if x.ndim != 4 or x.shape[0] != c_in:
        raise ValueError(f"conv3d input {x.shape} does not match kernel {w.shape}")
    p = kx // 2 if padding is None else padding
    ext = [n + 2 * p for n in x.shape[1:]]
    for n in x.shape[1:]:
        if n % stride:
            raise ValueError(f"stride {stride} does not divide extent {n}")
    out_shape = tuple((e - k) // stride + 1 for e, k in zip(ext, (kx, ky, kz)))
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))
    n_out = int(np.prod(out_shape))
    offsets = list(itertools.product(range(kx), range(ky), range(kz)))

    def window(arr, a, b_, c):
        return arr[:, a:a + stride * out_shape[0]:stride,
                   b_:b_ + stride * out_shape[1]:stride,
                   c:c + stride * out_shape[2]:stride]

    y = np.zeros((c_out, n_out), dtype=np.result_type(x.dtype, w.dtype))
    for a, b_, c in offsets:
        y += w.data[:, :, a, b_, c] @ window(xp, a, b_, c).reshape(c_in, n_out)
    y = y.reshape((c_out,) + out_shape)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[:, None, None, None]
        inputs.append(b)

    def vjp(g):
        g2 = g.reshape(c_out, n_out)
        gxp = np.zeros_like(xp, dtype=np.result_type(xp.dtype, g.dtype))
        gw = np.zeros(w.shape, dtype=np.result_type(w.dtype, g.dtype))
        for a, b_, c in offsets:
            wa = w.data[:, :, a, b_, c]
            window(gxp, a, b_, c)[...] += (wa.T @ g2).reshape((c_in,) + out_shape)
            gw[:, :, a, b_, c] = g2 @ window(xp, a, b_, c).reshape(c_in, n_out).T
        gx = gxp[:, p:p + x.shape[1], p:p + x.shape[2], p:p + x.shape[3]]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return _emit("conv3d", y, inputs, vjp)


def upsample3d(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the three trailing axes."""
    x = as_tensor(x)
    y = x.data
    for ax in (-3, -2, -1):
        y = np.repeat(y, factor, axis=ax)
    lead = x.shape[:-3]
    X, Y, Z = x.shape[-3:]

    def vjp(g):
        g = g.reshape(lead + (X, factor, Y, factor, Z, factor))
        n = len(lead)
        return (g.sum(axis=(n + 1, n + 3, n + 5)),)

    return _emit("upsample3d", y, (x,), vjp)


def batch_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of a ``(C, X, Y, Z)`` activation.

    Statistics always come from the current activation (training mode).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (1, 2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gam = gamma.data[:, None, None, None]
    y = gam * xhat + beta.data[:, None, None, None]

    def vjp(g):
        gmean = g.mean(axis=axes, keepdims=True)
        gxhat_mean = (g * xhat).mean(axis=axes, keepdims=True)
        gx = gam * inv * (g - gmean - xhat * gxhat_mean)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _emit("batch_norm", y, (x, gamma, beta), vjp)
