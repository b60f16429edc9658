"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are immutable wrappers around read-only numpy arrays.  A
:class:`Tape` records every primitive applied to a tensor that lives on it;
:func:`backward` walks the recorded nodes in reverse to produce gradients
for the tensors registered with :meth:`Tape.watch`.

There is no implicit broadcasting: every binary op requires identical
shapes, and bias terms are explicit arguments of ``conv2d``/``dense``.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

DTYPE = np.float64


class Tensor:
    """Immutable n-dimensional float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "__weakref__")

    def __init__(self, data, tape=None, _fresh=False):
        arr = np.asarray(data, dtype=DTYPE) if _fresh else np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        # a finite sum implies finite entries; fall back to the full scan otherwise
        if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat row-major list of the entries."""
        return self.data.ravel().tolist()

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tape is not None})"

    # operator sugar, all routed through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    vjp: Callable


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so list order is a valid
    topological order of the computation graph.
    """

    def __init__(self):
        self.nodes = []
        self.parameters = {}

    def watch(self, name, value):
        """Register ``value`` as trainable parameter ``name``; returns the tracked tensor."""
        if name in self.parameters:
            raise ContractError(f"parameter {name!r} already watched")
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(data, tape=self)
        self.parameters[name] = t
        return t

    def watch_all(self, params):
        return {name: self.watch(name, value) for name, value in params.items()}

    def release(self):
        """Drop recorded nodes so their buffers are freed without waiting for the cycle collector."""
        self.nodes.clear()

    def _record(self, out, inputs, vjp):
        t = Tensor(out, tape=self, _fresh=True)
        self.nodes.append(Node(inputs, t, vjp))
        return t


def _emit(out, inputs, vjp):
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            tape = x.tape
    if tape is None:
        return Tensor(out, _fresh=True)
    return tape._record(out, inputs, vjp)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def backward(tape, loss):
    """Gradient of scalar ``loss`` with respect to every watched parameter.

    Parameters the loss does not depend on receive zero gradients.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward requires a scalar loss tensor")
    grads = {}
    if loss.tape is tape:
        grads[id(loss)] = np.ones(loss.shape, dtype=DTYPE)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for x, gx in zip(node.inputs, in_grads):
                if gx is None or x.tape is not tape:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
    elif loss.tape is not None:
        raise ContractError("loss was recorded on a different tape")
    out = {}
    for name, p in tape.parameters.items():
        g = grads.get(id(p))
        out[name] = Tensor(np.zeros(p.shape) if g is None else g, _fresh=True)
    return out


def sgd_step(params, grads, learning_rate):
    """Return ``{name: p - learning_rate * g}``; inputs are not modified."""
    if learning_rate < 0:
        raise ContractError("learning rate must be nonnegative")
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ContractError(f"parameter/gradient keys differ: {sorted(missing)}")
    updated = {}
    for name, p in params.items():
        pv = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=DTYPE)
        gv = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        if pv.shape != gv.shape:
            raise DimensionError(f"{name}: parameter {pv.shape} vs gradient {gv.shape}")
        new = pv - learning_rate * gv
        new.setflags(write=False)
        updated[name] = new
    return updated


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b):
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def square(a):
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def total(a):
    """Sum of all entries as a scalar tensor."""
    shape = a.shape
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a):
    n = a.size
    return scale(total(a), 1.0 / n)


def relu(a):
    out = np.maximum(a.data, 0.0)
    return _emit(out, (a,), lambda g: (np.where(out > 0, g, 0.0),))


def sigmoid(a):
    out = _stable_sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(a):
    """Softmax over the last axis."""
    if a.shape[-1] < 1:
        raise DimensionError("softmax needs at least one entry")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (a,), vjp)


def log_softmax(a):
    """Log-softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (a,), vjp)


def spatial_standardize(a, eps=1e-5):
    """Per-map standardization over the last two axes: zero mean, unit variance."""
    if a.data.ndim < 2:
        raise DimensionError(f"spatial_standardize needs at least 2 axes, got {a.shape}")
    ad = a.data
    centered = ad - ad.mean(axis=(-2, -1), keepdims=True)
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=(-2, -1), keepdims=True) + eps)
    out = centered * inv

    def vjp(g):
        gm = g.mean(axis=(-2, -1), keepdims=True)
        gy = (g * out).mean(axis=(-2, -1), keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _emit(out, (a,), vjp)


def meanpool2(a):
    """2x2 average pooling over the last two axes (both must be even)."""
    *lead, h, w = a.shape
    if h % 2 or w % 2:
        raise DimensionError(f"meanpool2 needs even spatial dims, got {h}x{w}")
    ad = a.data
    out = (ad[..., 0::2, 0::2] + ad[..., 1::2, 0::2] + ad[..., 0::2, 1::2] + ad[..., 1::2, 1::2]) * 0.25

    def vjp(g):
        up = np.empty(ad.shape)
        q = g * 0.25
        up[..., 0::2, 0::2] = q
        up[..., 1::2, 0::2] = q
        up[..., 0::2, 1::2] = q
        up[..., 1::2, 1::2] = q
        return (up,)

    return _emit(out, (a,), vjp)


# ---------------------------------------------------------------------------
# layers


def conv2d(x, kernels, stride=1, padding=0, bias=None):
    """Cross-correlation of ``x`` [C,H,W] or [B,C,H,W] with ``kernels`` [K,C,kh,kw].

    Output is [K,H',W'] (or [B,K,H',W']) with
    ``H' = (H + 2*padding - kh) // stride + 1``.  ``bias`` [K] is optional.
    """
    if stride < 1 or padding < 0:
        raise ContractError("stride must be >= 1 and padding >= 0")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    if kernels.data.ndim != 4:
        raise DimensionError(f"conv2d kernels must be [K,C,kh,kw], got {kernels.shape}")
    xd = x.data if batched else x.data[None]
    kd = kernels.data
    b, c, h, w = xd.shape
    k, kc, kh, kw = kd.shape
    if kc != c:
        raise DimensionError(
            f"conv2d: input channels (input axis C) {c} != kernel channels (kernels axis C) {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding} (axes H,W)")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({k},)")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    # im2col: rows ordered (c, i, j) to match kernels.reshape(K, -1)
    cols = np.empty((c, kh, kw, b, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, b * ho * wo)
    kmat = kd.reshape(k, -1)
    out = kmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, b, ho, wo).transpose(1, 0, 2, 3))
    if not batched:
        out = out[0]
    need_x = x.tape is not None

    def vjp(g):
        gb = g if batched else g[None]
        gmat = gb.transpose(1, 0, 2, 3).reshape(k, -1)
        gk = (gmat @ cols.T).reshape(kd.shape)
        gx = None
        if need_x:
            gcols = (kmat.T @ gmat).reshape(c, kh, kw, b, ho, wo)
            gxp = np.zeros((c, b) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx if batched else gx[0])
        if bias is None:
            return gx, gk
        return gx, gk, gmat.sum(axis=1)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _emit(out, inputs, vjp)


def dense(x, weights, bias):
    """``weights @ x + bias`` for ``x`` [n] or a batch [B,n]."""
    xd, wd = x.data, weights.data
    if wd.ndim != 2 or xd.ndim not in (1, 2):
        raise DimensionError(f"dense: input {x.shape}, weights {weights.shape}")
    m, n = wd.shape
    if xd.shape[-1] != n:
        raise DimensionError(f"dense: input length {xd.shape[-1]} != weights columns {n}")
    if bias.shape != (m,):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({m},)")
    out = xd @ wd.T + bias.data

    def vjp(g):
        if xd.ndim == 1:
            return g @ wd, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _emit(out, (x, weights, bias), vjp)


def weighted_pool(features, weights):
    """Per-row weighted sum: features [B,C,N], weights [B,N] -> [B,C]."""
    fd, wd = features.data, weights.data
    if fd.ndim != 3 or wd.ndim != 2 or fd.shape[0] != wd.shape[0] or fd.shape[2] != wd.shape[1]:
        raise DimensionError(f"weighted_pool: features {features.shape}, weights {weights.shape}")
    out = np.einsum("bcn,bn->bc", fd, wd)

    def vjp(g):
        return g[:, :, None] * wd[:, None, :], np.einsum("bcn,bc->bn", fd, g)

    return _emit(out, (features, weights), vjp)


# ---------------------------------------------------------------------------
# losses (elementwise; reduction is left to the caller)


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy of ``targets`` in [0,1] under ``sigmoid(logits)``."""
    _same_shape("bce_with_logits", logits, targets)
    z, y = logits.data, targets.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = _stable_sigmoid(z)
    return _emit(out, (logits, targets), lambda g: (g * (p - y), g * -z))


def categorical_cross_entropy(logits, onehot):
    """Per-row cross-entropy for logits [B,k] against one-hot/probability targets [B,k]."""
    _same_shape("categorical_cross_entropy", logits, onehot)
    return scale(row_sum(mul(log_softmax(logits), onehot)), -1.0)


def row_sum(a):
    """Sum over the last axis."""
    shape = a.shape
    return _emit(a.data.sum(axis=-1), (a,), lambda g: (np.broadcast_to(g[..., None], shape).copy(),))
