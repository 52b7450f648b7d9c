"""Reverse-mode autodiff over numpy arrays.

A ``Variable`` wraps an ndarray and records, per parent, a closure that maps
the upstream gradient to that parent's gradient contribution. The op
vocabulary is deliberately closed: dense algebra, 2-d convolution and its
transpose, gather/scatter embedding lookups, softmax/cross-entropy, and the
handful of shape ops the models need. Verification runs in float64 (finite
differences are unreliable in float32); training runs in float32.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape construction (inference mode)."""

    def __enter__(self):
        global GRAD_ENABLED
        self._prev = GRAD_ENABLED
        GRAD_ENABLED = False

    def __exit__(self, *exc):
        global GRAD_ENABLED
        GRAD_ENABLED = self._prev
        return False


class Variable:
    __slots__ = ("data", "grad", "_parents", "requires_grad")

    def __init__(self, data, parents=(), requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        # parents: tuple of (Variable, grad_fn) where grad_fn(g) -> ndarray
        self._parents = parents if GRAD_ENABLED else ()
        self.requires_grad = requires_grad or any(
            p.requires_grad for p, _ in self._parents
        )

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
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Variable(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            v, expanded = stack.pop()
            if expanded:
                order.append(v)
                continue
            if id(v) in seen:
                continue
            seen.add(id(v))
            stack.append((v, True))
            for p, _ in v._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for v in reversed(order):
            if v.grad is None:
                continue
            for p, fn in v._parents:
                if not p.requires_grad:
                    continue
                g = fn(v.grad)
                if p.grad is None:
                    p.grad = g.astype(p.data.dtype, copy=True)
                else:
                    p.grad += g

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Variable) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Variable):
            raise TypeError("divide by Variable unsupported; use reciprocal ops")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def __repr__(self):
        return f"Variable(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Variable):
    """Trainable leaf: carries Adam state alongside value and gradient."""

    __slots__ = ("m", "v", "step", "name")

    def __init__(self, data, name=""):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def as_variable(x, dtype=None):
    if isinstance(x, Variable):
        return x
    a = np.asarray(x, dtype=dtype)
    return Variable(a)


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -------------------------------------------------------------


def add(a, b):
    a = as_variable(a)
    bv = b.data if isinstance(b, Variable) else b
    out = a.data + bv
    if isinstance(b, Variable):
        parents = (
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        )
    else:
        parents = ((a, lambda g: _unbroadcast(g, a.data.shape)),)
    return Variable(out, parents)


def mul(a, b):
    a = as_variable(a)
    if isinstance(b, Variable):
        out = a.data * b.data
        parents = (
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        )
    else:
        out = a.data * b
        parents = ((a, lambda g: _unbroadcast(g * b, a.data.shape)),)
    return Variable(out, parents)


def matmul(a, b):
    """Matrix product with leading-batch broadcast: (..., m, k) @ (..., k, n)."""
    out = a.data @ b.data

    def da(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def db(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return Variable(out, ((a, da), (b, db)))


def vsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def da(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.data.shape).copy()

    return Variable(out, ((a, da),))


def vmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in axes]))
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.data.shape
    return Variable(a.data.reshape(shape), ((a, lambda g: g.reshape(old)),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return Variable(
        a.data.transpose(axes), ((a, lambda g: g.transpose(inv)),)
    )


def concat(vars_, axis):
    datas = [v.data for v in vars_]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, v in enumerate(vars_):
        lo, hi = offsets[i], offsets[i + 1]

        def make(lo=lo, hi=hi):
            def fn(g):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                return g[tuple(sl)]

            return fn

        parents.append((v, make()))
    return Variable(out, tuple(parents))


def narrow(a, axis, start, length):
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def da(g):
        out = np.zeros_like(a.data)
        out[sl] = g
        return out

    return Variable(a.data[sl], ((a, da),))


def pow_(a, p):
    out = a.data**p
    return Variable(out, ((a, lambda g: g * p * a.data ** (p - 1)),))


# -- nonlinearities ----------------------------------------------------------


def relu(a):
    mask = a.data > 0
    return Variable(a.data * mask, ((a, lambda g: g * mask),))


def gelu(a):
    x = a.data
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(x * inv_sqrt2))
    out = x * cdf

    def da(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return g * (cdf + x * pdf)

    return Variable(out.astype(x.dtype), ((a, da),))


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    return Variable(s, ((a, lambda g: g * s * (1.0 - s)),))


def vabs(a):
    s = np.sign(a.data)
    return Variable(np.abs(a.data), ((a, lambda g: g * s),))


def vexp(a):
    e = np.exp(a.data)
    return Variable(e, ((a, lambda g: g * e),))


def vlog(a):
    return Variable(np.log(a.data), ((a, lambda g: g / a.data),))


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def da(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return s * (g - dot)

    return Variable(s, ((a, da),))


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def da(g):
        s = np.exp(out)
        return g - s * g.sum(axis=axis, keepdims=True)

    return Variable(out, ((a, da),))


def cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood over (optionally masked) positions.

    logits: (..., C); targets: int array (...); mask: bool array (...) selecting
    the positions that contribute. Returns a scalar Variable.
    """
    t = np.asarray(targets)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        count = max(int(m.sum()), 1)
        loss = (nll * m).sum() / count
    else:
        m = None
        count = nll.size
        loss = nll.sum() / count

    def da(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        d = (p - onehot) / count
        if m is not None:
            d = d * m[..., None]
        return g * d

    return Variable(np.asarray(loss, dtype=logits.dtype), ((logits, da),))


# -- lookup ------------------------------------------------------------------


def gather_rows(table, ids):
    """Embedding lookup: table (V, d), ids int (...) -> (..., d)."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def da(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return dt

    return Variable(out, ((table, da),))


def routed_linear(x, routes, weight, bias):
    """Per-position expert projection.

    x: (..., n, d); routes: int (..., n) selecting the expert; weight: (R, d, K);
    bias: (R, K). Output (..., n, K). Gradients land only on the selected
    experts' slices.
    """
    r = np.asarray(routes)
    wg = weight.data[r]  # (..., n, d, K)
    out = np.einsum("...d,...dk->...k", x.data, wg) + bias.data[r]

    def dx(g):
        return np.einsum("...k,...dk->...d", g, wg)

    def dw(g):
        contrib = np.einsum("...d,...k->...dk", x.data, g)
        dwt = np.zeros_like(weight.data)
        np.add.at(dwt, r.reshape(-1), contrib.reshape(-1, *weight.data.shape[1:]))
        return dwt

    def db(g):
        dbt = np.zeros_like(bias.data)
        np.add.at(dbt, r.reshape(-1), g.reshape(-1, bias.data.shape[-1]))
        return dbt

    return Variable(out, ((x, dx), (weight, dw), (bias, db)))


# -- convolution ---------------------------------------------------------------

# Layout is NHWC throughout: im2col lowers each convolution to one matmul,
# which is where numpy is fast.


def _im2col(xp, kh, kw, stride, oh, ow):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, OH, OW, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))  # (B,OH,OW,kh,kw,C)


def conv2d(x, w, b, stride=1, pad=None):
    """2-d convolution, NHWC. w: (kh, kw, Cin, Cout), b: (Cout,)."""
    kh, kw, cin, cout = w.data.shape
    if pad is None:
        pad = kh // 2
    B, H, W, C = x.data.shape
    if C != cin:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel {cin}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    cols2 = cols.reshape(B * oh * ow, kh * kw * cin)
    wf = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ wf + b.data).reshape(B, oh, ow, cout)

    def dxf(g):
        gf = g.reshape(B * oh * ow, cout)
        dcols = (gf @ wf.T).reshape(B, oh, ow, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                    :, :, :, i, j
                ]
        return dxp[:, pad : pad + H, pad : pad + W] if pad else dxp

    def dwf(g):
        gf = g.reshape(B * oh * ow, cout)
        return (cols2.T @ gf).reshape(w.data.shape)

    def dbf(g):
        return g.reshape(-1, cout).sum(axis=0)

    return Variable(out, ((x, dxf), (w, dwf), (b, dbf)))


def conv_transpose2d(x, w, b):
    """Stride-2, kernel-2 transposed convolution (exact 2x upsample).

    x: (B, H, W, Cin); w: (2, 2, Cin, Cout); output (B, 2H, 2W, Cout).
    Non-overlapping windows, so it is a single matmul plus a reshape.
    """
    B, H, W, cin = x.data.shape
    _, _, cin2, cout = w.data.shape
    if cin != cin2:
        raise ValueError("conv_transpose2d channel mismatch")
    wm = w.data.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    y = x.data.reshape(B * H * W, cin) @ wm  # (BHW, 4*Cout)
    y = y.reshape(B, H, W, 2, 2, cout) + b.data
    out = y.transpose(0, 1, 3, 2, 4, 5).reshape(B, 2 * H, 2 * W, cout)

    def dxf(g):
        gc = g.reshape(B, H, 2, W, 2, cout).transpose(0, 1, 3, 2, 4, 5)
        gm = gc.reshape(B * H * W, 4 * cout)
        return (gm @ wm.T).reshape(B, H, W, cin)

    def dwf(g):
        gc = g.reshape(B, H, 2, W, 2, cout).transpose(0, 1, 3, 2, 4, 5)
        gm = gc.reshape(B * H * W, 4 * cout)
        dwm = x.data.reshape(B * H * W, cin).T @ gm  # (cin, 4*cout)
        return dwm.reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3)

    def dbf(g):
        return g.reshape(-1, cout).sum(axis=0)

    return Variable(out, ((x, dxf), (w, dwf), (b, dbf)))


# -- normalization -------------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, affine transform with gamma/beta."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def dxf(g):
        gh = g * gamma.data
        t1 = gh.mean(axis=-1, keepdims=True)
        t2 = (gh * xhat).mean(axis=-1, keepdims=True)
        return inv * (gh - t1 - xhat * t2)

    def dgf(g):
        return (g * xhat).reshape(-1, n).sum(axis=0)

    def dbf(g):
        return g.reshape(-1, n).sum(axis=0)

    return Variable(out, ((x, dxf), (gamma, dgf), (beta, dbf)))


def straight_through(pre, quant):
    """Forward the quantized value; route the incoming gradient to `pre`.

    The backward contract is an element-wise identity copy onto the
    pre-quantization feature; nothing flows into `quant` through this node.
    """
    if pre.data.shape != quant.data.shape:
        raise ValueError("straight_through: shape mismatch")
    out = quant.data.copy()
    return Variable(out, ((pre, lambda g: g),))
