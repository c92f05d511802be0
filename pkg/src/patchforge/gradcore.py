"""Minimal numpy tensor with reverse-mode autodiff.

Only the handful of operations needed by the detector, the patch compositor and
the losses are provided. Every graph node gets a monotonically increasing id at
creation, so a node's inputs always carry smaller ids than the node itself and
sorting by id yields a valid topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_dtype = np.float32

MAGIC = b"PFT1"


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the working float type (float64 is used by gradient checks)."""
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


def default_dtype():
    return _dtype


_branches = None


@contextlib.contextmanager
def branch_trace():
    """Record which branch every piecewise op (leaky_relu, clip, max) takes.

    Yields a list that collects one boolean/index array per op evaluated inside
    the block. Two evaluations with equal traces lie on the same smooth piece,
    which is what a finite-difference check needs.
    """
    global _branches
    old, _branches = _branches, []
    try:
        yield _branches
    finally:
        _branches = old


def same_branches(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


class Tensor:
    """Dense array plus the bookkeeping needed to backpropagate through it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.ascontiguousarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def make(data, parents, backward, op):
    """Create a graph node. `backward(g)` must return one gradient (or None) per parent."""
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise ------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data + b.data, (a, b),
                lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data * b.data, (a, b),
                lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
                "mul")


def neg(a):
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a):
    out = 1.0 / a.data
    return make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def square(a):
    return make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a):
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    out = _sigmoid(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def leaky_relu(a, slope=0.1):
    pos = a.data > 0
    if _branches is not None:
        _branches.append(pos)
    scale = np.where(pos, 1.0, slope).astype(a.data.dtype)
    return make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def clip(a, lo=0.0, hi=1.0):
    """Clamp values; the sub-gradient is zero wherever the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    if _branches is not None:
        _branches.append(inside)
    return make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# shape ops ----------------------------------------------------------------------

def reshape(a, shape):
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)


def getitem(a, index):
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def tsum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis, keepdims=False):
    """Max reduction; ties route the gradient to the first maximal element."""
    idx = np.argmax(a.data, axis=axis)
    if _branches is not None:
        _branches.append(idx)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)

    def backward(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis)
        return (full,)

    return make(out if keepdims else np.squeeze(out, axis), (a,), backward, "max")


# convolution ----------------------------------------------------------------------

def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-D cross-correlation of an [N,]Cin,H,W input with a Cout,Cin,Kh,Kw kernel."""
    x, w = as_tensor(x), as_tensor(w)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if w.ndim != 4 or xd.ndim != 4:
        raise ShapeError(f"conv2d expects 3-D/4-D input and 4-D kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = xd.shape
    cout, kcin, kh, kw = w.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError("kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
    # cols: N,Ho,Wo,Cin*Kh*Kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        gmat = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i: i + stride * ho: stride, j: j + stride * wo: stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad: pad + h, pad: pad + wd] if pad else gxp
            if not batched:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make(out, parents, backward, "conv2d")


# fused losses -------------------------------------------------------------------------

def bce_with_logits(logits, target):
    """Elementwise binary cross-entropy of sigmoid(logits) against constant targets."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return make(out, (logits,), lambda g: (g * (_sigmoid(z) - t),), "bce_with_logits")


def softmax_bce(logits, onehot, axis=-1):
    """Sum over classes of BCE(softmax(logits), onehot), computed in log space.

    log(1 - p_c) is evaluated as logsumexp over the other classes minus the full
    logsumexp, so no probability is ever subtracted from one.
    """
    z = logits.data
    y = np.asarray(onehot, dtype=z.dtype)
    c = z.shape[axis]
    zm = np.moveaxis(z, axis, -1)
    ym = np.moveaxis(y, axis, -1)
    lse = _logsumexp(zm, -1)
    others = np.stack([_logsumexp(np.delete(zm, k, axis=-1), -1) for k in range(c)], axis=-1)
    logp = zm - lse[..., None]
    log1mp = others - lse[..., None]
    out = -(ym * logp + (1.0 - ym) * log1mp).sum(-1)

    def backward(g):
        p = np.exp(logp)
        grad = (c * p - ym)
        for k in range(c):
            # d/dz of -(1-y_k) * lse_{-k}; q is the softmax over classes != k
            shifted = zm - others[..., k: k + 1]
            shifted[..., k] = -np.inf
            q = np.exp(shifted)
            grad -= (1.0 - ym[..., k: k + 1]) * q
        return (np.moveaxis(grad * g[..., None], -1, axis),)

    return make(out, (logits,), backward, "softmax_bce")


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# backward + optimizer ------------------------------------------------------------------

class GradientMap(dict):
    """Leaf tensor -> gradient array, keyed by tensor identity."""

    def __getitem__(self, t):
        return super().__getitem__(t.id)

    def __contains__(self, t):
        return super().__contains__(t.id)

    def get(self, t, default=None):
        return super().get(t.id, default)


def backward(output: Tensor) -> GradientMap:
    """Backpropagate from a scalar node; returns gradients for every requires_grad leaf.

    Leaf `.grad` attributes are overwritten (not accumulated), so the same
    parameters can be pushed through a fresh forward pass afterwards.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    result = GradientMap()
    if not output.requires_grad:
        return result
    nodes = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.id in nodes:
            continue
        nodes[t.id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads = {output.id: np.ones_like(output.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g
            dict.__setitem__(result, nid, g)
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return result


class OptimState:
    """Momentum buffers, one per parameter, created lazily as zeros."""

    def __init__(self, params: Sequence[Tensor] = ()):
        self.velocity = {p.id: np.zeros_like(p.data) for p in params}

    def buffer(self, p):
        if p.id not in self.velocity:
            self.velocity[p.id] = np.zeros_like(p.data)
        return self.velocity[p.id]


def sgd_momentum_step(params, grads, state, lr, momentum):
    """v <- momentum*v + g; p <- p - lr*v, in place."""
    if lr <= 0 or not 0 <= momentum < 1:
        raise ValueError("need lr > 0 and 0 <= momentum < 1")
    for p in params:
        g = grads[p] if isinstance(grads, GradientMap) else grads[p.id]
        v = state.buffer(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"gradient/velocity shape {g.shape} does not match parameter {p.shape}")
        v *= momentum
        v += g
        p.data -= (lr * v).astype(p.data.dtype)
    return params, state


def finite_difference_gradient(f: Callable[[np.ndarray], float], point: np.ndarray,
                               epsilon: float = 1e-3, coords: Iterable | None = None):
    """Central differences (f(x+e_i) - f(x-e_i)) / 2e at the given flat coordinates.

    `f` receives a perturbed copy of `point`. Returns (flat_indices, estimates).
    """
    x = np.array(point, copy=True)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(list(coords), dtype=int)
    est = np.empty(len(idx), dtype=np.float64)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(f(x))
        flat[i] = orig - epsilon
        fm = float(f(x))
        flat[i] = orig
        est[k] = (fp - fm) / (2 * epsilon)
    return idx, est


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# serialization -----------------------------------------------------------------------------

def write_tensors(path, arrays, header: str | None = None):
    """Write arrays as consecutive PFT1 records, optionally after one text header line."""
    with open(path, "wb") as fh:
        if header is not None:
            fh.write(header.rstrip("\n").encode() + b"\n")
        for a in arrays:
            a = np.asarray(a, dtype="<f4")
            fh.write(MAGIC)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(np.ascontiguousarray(a).tobytes())


def read_tensors(path, header=False):
    raw = Path(path).read_bytes()
    text = None
    if header:
        nl = raw.index(b"\n")
        text, raw = raw[:nl].decode(), raw[nl + 1:]
    out, pos = [], 0
    while pos < len(raw):
        if raw[pos: pos + 4] != MAGIC:
            raise ValueError(f"bad tensor record at byte {pos}")
        (rank,) = struct.unpack_from("<I", raw, pos + 4)
        shape = struct.unpack_from(f"<{rank}I", raw, pos + 8)
        pos += 8 + 4 * rank
        count = int(np.prod(shape)) if rank else 1
        out.append(np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32))
        pos += 4 * count
    return (text, out) if header else out


def save_tensor(path, array):
    write_tensors(path, [array])


def load_tensor(path):
    (a,) = read_tensors(path)
    return a
