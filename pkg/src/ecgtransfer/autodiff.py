"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient; outside a tape they are plain numpy
computations. ``Tape.backward`` walks the recorded nodes in exact reverse
order and accumulates gradients additively into leaf ``.grad`` arrays.

Only the primitives needed by the 1D DenseNet are provided. All reductions
are plain numpy calls, so results are bit-reproducible for a fixed BLAS
thread count.
"""

import threading

import numpy as np

from .errors import DegenerateBatch, ShapeMismatch
from .prng import Prng

_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    st = _stack()
    return st[-1] if st else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "fn", "tape")

    def __init__(self, out, inputs, fn, tape):
        self.out = out
        self.inputs = inputs
        self.fn = fn
        self.tape = tape


class Tape:
    """Ordered record of operations; use as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def backward(self, out, grad=None, retain_graph=False):
        """Accumulate gradients of ``out`` into leaves.

        Unless ``retain_graph`` is set, each node's closure is dropped once
        visited so activations are freed as the sweep proceeds.
        """
        if grad is None:
            if out.data.size != 1:
                raise ShapeMismatch("backward without an explicit grad needs a scalar output")
            grad = np.ones_like(out.data)
        grad = np.asarray(grad, dtype=out.dtype)
        if grad.shape != out.shape:
            raise ShapeMismatch(f"seed grad shape {grad.shape} != output shape {out.shape}")
        if out.is_leaf:
            if out.requires_grad:
                _accumulate_leaf(out, grad)
            return
        pending = {id(out): grad}
        for pos in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[pos]
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            in_grads = node.fn(g, needs)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    _accumulate_leaf(inp, gi)
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
            if not retain_graph:
                node.fn = None
                node.inputs = ()
        if not retain_graph:
            for node in self.nodes:
                node.out._node = None
                node.fn = None
                node.inputs = ()
            self.nodes = []


def _accumulate_leaf(t, g):
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss, grad=None, retain_graph=False):
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data) if grad is None else grad)
        return
    loss._node.tape.backward(loss, grad, retain_graph)


def _record(data, inputs, fn):
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        node = _Node(out, tuple(inputs), fn, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# convolution

def _im2col(xp, k, stride, lout):
    b, c, _ = xp.shape
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, k, lout), strides=(s0, s1, s2, s2 * stride), writeable=False
    )
    return view.reshape(b, c * k, lout)


def conv1d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of ``x`` (B, Cin, L) with ``w`` (Cout, Cin, k)."""
    x, w = _as_tensor(x), _as_tensor(w)
    b = None if b is None else _as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeMismatch("conv1d expects x (B,C,L) and w (Cout,Cin,k)")
    bsz, cin, length = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ShapeMismatch(f"conv1d: input has {cin} channels, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch("conv1d: bias must have shape (Cout,)")
    if length + 2 * pad < k:
        raise ShapeMismatch("conv1d: kernel longer than padded input")
    lout = (length + 2 * pad - k) // stride + 1
    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    if k == 1 and stride == 1:
        cols = xd
    else:
        cols = _im2col(xd, k, stride, lout)
    w2 = w.data.reshape(cout, cin * k)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[None, :, None]
    inputs = (x, w) if b is None else (x, w, b)

    def grad_fn(g, needs):
        gx = gw = gb = None
        if needs[1]:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2))
        if needs[0]:
            gcols = np.matmul(w2.T, g)
            if k == 1 and stride == 1:
                gxp = gcols
            else:
                gcols = gcols.reshape(bsz, cin, k, lout)
                gxp = np.zeros((bsz, cin, length + 2 * pad), dtype=g.dtype)
                span = stride * (lout - 1) + 1
                for j in range(k):
                    gxp[:, :, j:j + span:stride] += gcols[:, :, j, :]
            gx = gxp[:, :, pad:pad + length] if pad else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(out, inputs, grad_fn)


# --------------------------------------------------------------------------
# normalisation and activations

def batchnorm1d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5, update_stats=True):
    """Per-channel batch norm over (B, L).

    In training mode the batch statistics normalise and, when
    ``update_stats`` is set, the running buffers (plain numpy arrays) are
    updated in place with ``momentum``. Eval mode uses the running buffers.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    bsz, c, length = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch("batchnorm1d: gamma/beta must have shape (C,)")
    xd = x.data
    if training:
        n = bsz * length
        if n <= 1:
            raise DegenerateBatch("batch norm needs more than one value per channel")
        mean = xd.mean(axis=(0, 2))
        xc = xd - mean[None, :, None]
        var = np.mean(xc * xc, axis=(0, 2))
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mean.astype(running_mean.dtype)
            running_var *= 1 - momentum
            running_var += momentum * (var * (n / (n - 1))).astype(running_var.dtype)
    else:
        xc = xd - running_mean.astype(xd.dtype)[None, :, None]
        var = running_var.astype(xd.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * invstd[None, :, None]
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def grad_fn(g, needs):
        gx = gg = gb = None
        if needs[1]:
            gg = np.sum(g * xhat, axis=(0, 2))
        if needs[2]:
            gb = g.sum(axis=(0, 2))
        if needs[0]:
            scale = (gamma.data * invstd)[None, :, None]
            if training:
                gmean = g.mean(axis=(0, 2))[None, :, None]
                gxhat_mean = np.mean(g * xhat, axis=(0, 2))[None, :, None]
                gx = scale * (g - gmean - xhat * gxhat_mean)
            else:
                gx = g * scale
        return gx, gg, gb

    return _record(out, (x, gamma, beta), grad_fn)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    out = x.data * mask

    def grad_fn(g, needs):
        return (g * mask,)

    return _record(out, (x,), grad_fn)


def sigmoid(x):
    x = _as_tensor(x)
    out = _sigmoid(x.data)

    def grad_fn(g, needs):
        return (g * out * (1 - out),)

    return _record(out, (x,), grad_fn)


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


# --------------------------------------------------------------------------
# pooling and reshaping

def maxpool1d(x, k, stride=None, pad=0):
    """Max over windows; ties resolve to the lowest index in the window."""
    x = _as_tensor(x)
    stride = k if stride is None else stride
    bsz, c, length = x.shape
    if length + 2 * pad < k:
        raise ShapeMismatch("maxpool1d: window longer than padded input")
    lout = (length + 2 * pad - k) // stride + 1
    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad)), constant_values=-np.inf)
    s0, s1, s2 = xd.strides
    win = np.lib.stride_tricks.as_strided(
        xd, shape=(bsz, c, lout, k), strides=(s0, s1, s2 * stride, s2), writeable=False
    )
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]

    def grad_fn(g, needs):
        gxp = np.zeros((bsz, c, length + 2 * pad), dtype=g.dtype)
        span = stride * (lout - 1) + 1
        for j in range(k):
            gxp[:, :, j:j + span:stride] += g * (idx == j)
        return (gxp[:, :, pad:pad + length] if pad else gxp,)

    return _record(np.ascontiguousarray(out), (x,), grad_fn)


def avgpool1d(x, k=2, stride=2):
    x = _as_tensor(x)
    bsz, c, length = x.shape
    if length < k:
        raise ShapeMismatch("avgpool1d: window longer than input")
    lout = (length - k) // stride + 1
    s0, s1, s2 = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data, shape=(bsz, c, lout, k), strides=(s0, s1, s2 * stride, s2), writeable=False
    )
    out = win.mean(axis=3)

    def grad_fn(g, needs):
        gx = np.zeros_like(x.data)
        span = stride * (lout - 1) + 1
        gk = g / k
        for j in range(k):
            gx[:, :, j:j + span:stride] += gk
        return (gx,)

    return _record(out, (x,), grad_fn)


def adaptive_avg_pool1d(x):
    """Mean over the full length: (B, C, L) -> (B, C, 1)."""
    x = _as_tensor(x)
    length = x.shape[2]
    out = x.data.mean(axis=2, keepdims=True)

    def grad_fn(g, needs):
        return (np.broadcast_to(g / length, x.shape).copy(),)

    return _record(out, (x,), grad_fn)


def flatten(x):
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def grad_fn(g, needs):
        return (g.reshape(shape),)

    return _record(out, (x,), grad_fn)


def concat_channels(xs):
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise ShapeMismatch("concat_channels needs at least one input")
    b, _, length = xs[0].shape
    for t in xs:
        if t.data.ndim != 3 or t.shape[0] != b or t.shape[2] != length:
            raise ShapeMismatch("concat_channels: batch and length must match")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def grad_fn(g, needs):
        return tuple(g[:, bounds[i]:bounds[i + 1], :] if needs[i] else None for i in range(len(xs)))

    return _record(out, xs, grad_fn)


# --------------------------------------------------------------------------
# head and loss

def linear(x, w, b=None):
    x, w = _as_tensor(x), _as_tensor(w)
    b = None if b is None else _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"linear: x {x.shape} incompatible with w {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data[None, :]
    inputs = (x, w) if b is None else (x, w, b)

    def grad_fn(g, needs):
        gx = g @ w.data if needs[0] else None
        gw = g.T @ x.data if needs[1] else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if needs[2] else None)

    return _record(out, inputs, grad_fn)


def _softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits(z, y, pos_weight=1.0):
    """Mean of ``pos_weight*y*softplus(-z) + (1-y)*softplus(z)`` over the batch."""
    z = _as_tensor(z)
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=z.dtype).reshape(z.shape)
    n = z.data.size
    zd = z.data
    per = pos_weight * yd * _softplus(-zd) + (1 - yd) * _softplus(zd)
    out = np.asarray(per.mean(), dtype=z.dtype)

    def grad_fn(g, needs):
        s = _sigmoid(zd)
        dz = (-pos_weight * yd * (1 - s) + (1 - yd) * s) / n
        return (g * dz,)

    return _record(out, (z,), grad_fn)


# --------------------------------------------------------------------------
# verification

def gradcheck(op, shapes, seed=0, step=1e-5, inputs=None):
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps float64 Tensors (one per shape) to a Tensor. The output is
    contracted with a fixed random projection so non-scalar ops can be
    checked; error per element is ``|a - n| / max(1, |a|, |n|)``.
    """
    rng = Prng(seed)
    if inputs is None:
        arrays = [rng.normal(int(np.prod(s))).reshape(s) for s in shapes]
    else:
        arrays = [np.asarray(a, dtype=np.float64).copy() for a in inputs]
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        out = op(*leaves)
    proj = rng.normal(out.data.size).reshape(out.shape)
    tape.backward(out, proj)

    def objective():
        return float(np.sum(op(*[Tensor(a, dtype=np.float64) for a in arrays]).data * proj))

    worst = 0.0
    for arr, leaf in zip(arrays, leaves):
        analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
