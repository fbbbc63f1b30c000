"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the classifier needs are provided.  Layout is channels-last
throughout.  Every op checks its output for NaN/Inf and raises
:class:`~mbconvnext.errors.NonFiniteError` immediately.

Gradients *accumulate* into ``Tensor.grad``: calling :func:`backward` twice
without :func:`zero_grad` doubles them.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import NonFiniteError, NonScalarLoss, ShapeMismatch

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data, parents, backward_fn, op):
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt=None):
    """Back-propagate from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every reachable tensor that requires
    grad.  If ``wrt`` is given, returns their gradients as a list, with zeros for
    leaves the loss does not depend on.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if loss.requires_grad:
        order = _topo(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _accum(node, g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def tsum(x):
    x = as_tensor(x)

    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(x.data.sum(keepdims=False).reshape(()), (x,), bw, "sum")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def concat(xs, axis=-1):
    """Concatenate along ``axis`` (feature axis by default), order preserved."""
    xs = [as_tensor(x) for x in xs]
    lead = xs[0].shape[0]
    for x in xs:
        if x.shape[0] != lead:
            raise ShapeMismatch("concat inputs must share the leading dimension")
    if len(xs) == 1:
        only = xs[0]
        return _make(only.data.copy(), (only,), lambda g: (g,), "concat")
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def dropout(x, rate, train, seed=0):
    """Inverted dropout; identity in eval mode or when ``rate == 0``."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def bw(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bw, "dropout")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid_np(x.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bw, "sigmoid")


def gelu(x):
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    x = as_tensor(x)
    z = x.data
    y, cdf = kernels.gelu_forward(z)

    def bw(g):
        return (kernels.gelu_backward(z, cdf, g),)

    return _make(y, (x,), bw, "gelu")


def activation(x, kind):
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------

def dense(x, W, b=None):
    """``y = x W + b`` over the last axis (leading axes are batch)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"dense: x {x.shape} incompatible with W {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeMismatch(f"dense: bias {b.shape} != ({W.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return _make(y.reshape(*lead, W.shape[1]), parents, bw, "dense")


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x, k, b=None, stride=1, pad=0):
    """Cross-correlation, channels-last: x [N,H,W,Cin], k [kh,kw,Cin,Cout]."""
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[3] != k.shape[2]:
        raise ShapeMismatch(f"conv2d: x {x.shape} incompatible with k {k.shape}")
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch("conv2d: output would be empty")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeMismatch("conv2d: bias shape mismatch")
    xp = _pad(x.data, pad)
    if kh == stride and kw == stride and pad == 0:
        # non-overlapping patches: pure reshape, no window copy
        cols = xp[:, : ho * kh, : wo * kw].reshape(n, ho, kh, wo, kw, cin).transpose(0, 1, 3, 2, 4, 5)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3)  # [N,ho,wo,kh,kw,cin]
    cols = np.ascontiguousarray(cols).reshape(n * ho * wo, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    y = cols @ kmat
    if b is not None:
        y = y + b.data
    y = y.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for a in range(kh):
                for c in range(kw):
                    gxp[:, a : a + stride * (ho - 1) + 1 : stride, c : c + stride * (wo - 1) + 1 : stride] += gcols[:, :, :, a, c]
            gx = gxp[:, pad : pad + h, pad : pad + w] if pad else gxp
        if b is None:
            return gx, gk
        return gx, gk, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, k) if b is None else (x, k, b)
    return _make(y, parents, bw, "conv2d")


def depthwise_conv2d(x, k, b=None, stride=1, pad=0):
    """Per-channel cross-correlation: x [N,H,W,C], k [kh,kw,C]."""
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 3 or x.shape[3] != k.shape[2]:
        raise ShapeMismatch(f"depthwise_conv2d: x {x.shape} incompatible with k {k.shape}")
    n, h, w, c = x.shape
    kh, kw, _ = k.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeMismatch("depthwise_conv2d: output would be empty")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c,):
            raise ShapeMismatch("depthwise_conv2d: bias shape mismatch")
    xp = np.ascontiguousarray(_pad(x.data, pad))
    y = kernels.depthwise_forward(xp, k.data, stride, ho, wo)
    if b is not None:
        y = y + b.data

    def bw(g):
        gxp, gk = kernels.depthwise_backward(xp, k.data, g, stride)
        gx = gxp[:, pad : pad + h, pad : pad + w] if pad else gxp
        out = (gx if x.requires_grad else None, gk if k.requires_grad else None)
        if b is None:
            return out
        return out + (g.sum(axis=(0, 1, 2)) if b.requires_grad else None,)

    parents = (x, k) if b is None else (x, k, b)
    return _make(y, parents, bw, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# normalisation and pooling
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch("layer_norm: gamma/beta must have shape (C,)")
    y, xhat, inv = kernels.layer_norm_forward(x.data.reshape(-1, c), gamma.data, beta.data, eps)

    def bw(g):
        gx, gg, gb = kernels.layer_norm_backward(xhat, inv, gamma.data, g.reshape(-1, c))
        return (gx.reshape(x.shape) if x.requires_grad else None,
                gg.astype(gamma.dtype) if gamma.requires_grad else None,
                gb.astype(beta.dtype) if beta.requires_grad else None)

    return _make(y.reshape(x.shape), (x, gamma, beta), bw, "layer_norm")


def global_pool(x, kind):
    """Pool [N,H,W,C] over H and W to [N,C]; ``kind`` is ``avg`` or ``max``.

    The max gradient goes to the first maximal cell in row-major order.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatch("global_pool expects [N,H,W,C]")
    n, h, w, c = x.shape
    if kind == "avg":
        y = x.data.mean(axis=(1, 2))

        def bw(g):
            return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.dtype),)

        return _make(y, (x,), bw, "global_pool")
    if kind == "max":
        flat = x.data.reshape(n, h * w, c)
        idx = flat.argmax(axis=1)  # first occurrence
        y = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]

        def bw(g):
            gx = np.zeros((n, h * w, c), dtype=x.dtype)
            np.put_along_axis(gx, idx[:, None, :], g[:, None, :], axis=1)
            return (gx.reshape(x.shape),)

        return _make(y, (x,), bw, "global_pool")
    raise ValueError(f"unknown pool kind {kind!r}")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

P_CLAMP = 1e-7


def bce_loss(p, y, class_weights=(1.0, 1.0)):
    """Mean weighted binary cross-entropy.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]`` before the log; the gradient is that
    of the loss evaluated at the clamped probability.
    """
    p = as_tensor(p)
    y = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    if p.data.ndim != 1:
        raise ShapeMismatch("bce_loss expects p of shape [N]")
    w = np.where(y > 0.5, class_weights[1], class_weights[0]).astype(p.dtype)
    pc = np.clip(p.data, P_CLAMP, 1.0 - P_CLAMP)
    n = p.shape[0]
    val = -(w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))).mean()

    def bw(g):
        return (g * (-w * (y / pc - (1.0 - y) / (1.0 - pc)) / n),)

    return _make(np.asarray(val, dtype=p.dtype), (p,), bw, "bce_loss")
