"""Layer vocabulary: linear, conv 3x3 (stride 1/2), transposed conv (stride 2),
layer norm, embeddings, multi-head attention, and per-route expert heads.

Modules track parameters and submodules in declaration order via
``__setattr__``; that order is the checkpoint serialization order.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Variable


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(
            isinstance(v, Module) for v in value
        ):
            for i, v in enumerate(value):
                self._modules[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
            p.step = 0


def _kaiming(rng, fan_in, shape, dtype):
    scale = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * scale).astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, dtype=np.float32):
        super().__init__()
        self.w = Parameter(_kaiming(rng, d_in, (d_in, d_out), dtype))
        self.b = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.w)
        return T.add(out, self.b) if self.b is not None else out


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.k = k
        self.w = Parameter(_kaiming(rng, k * k * c_in, (k, k, c_in, c_out), dtype))
        self.b = Parameter(np.zeros(c_out, dtype=dtype))

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride)


class ConvTranspose2d(Module):
    """Kernel-2 stride-2 transposed conv: doubles spatial resolution."""

    def __init__(self, rng, c_in, c_out, dtype=np.float32):
        super().__init__()
        self.w = Parameter(_kaiming(rng, c_in, (2, 2, c_in, c_out), dtype))
        self.b = Parameter(np.zeros(c_out, dtype=dtype))

    def __call__(self, x):
        return T.conv_transpose2d(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, rng, n_rows, dim, dtype=np.float32):
        super().__init__()
        self.table = Parameter((rng.standard_normal((n_rows, dim)) * 0.02).astype(dtype))

    def __call__(self, ids):
        return T.gather_rows(self.table, ids)


class RoutedHeads(Module):
    """Bank of per-route linear classifiers sharing an input trunk."""

    def __init__(self, rng, n_routes, d_in, n_classes, dtype=np.float32):
        super().__init__()
        self.w = Parameter(_kaiming(rng, d_in, (n_routes, d_in, n_classes), dtype))
        self.b = Parameter(np.zeros((n_routes, n_classes), dtype=dtype))

    def __call__(self, x, routes):
        return T.routed_linear(x, routes, self.w, self.b)


class MultiHeadAttention(Module):
    """Self-attention over (B, n, d) token matrices.

    attn_mode: None for full attention, "causal" for lower-triangular,
    "diag" for self-only attention (diagnostic: no cross-position mixing).
    """

    def __init__(self, rng, d, heads, dtype=np.float32):
        super().__init__()
        if d % heads != 0:
            raise ValueError("model dim must be divisible by head count")
        self.d = d
        self.heads = heads
        # No qkv bias: a key bias cancels in softmax exactly and a value bias
        # is absorbed by the output bias, leaving only finite-difference noise.
        self.qkv = Linear(rng, d, 3 * d, bias=False, dtype=dtype)
        self.out = Linear(rng, d, d, dtype=dtype)

    def __call__(self, x, attn_mode=None):
        B, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x)  # (B, n, 3d)
        qkv = T.reshape(qkv, (B, n, 3, h, dh))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, h, n, dh)
        q = T.narrow(qkv, 0, 0, 1).reshape((B, h, n, dh))
        k = T.narrow(qkv, 0, 1, 1).reshape((B, h, n, dh))
        v = T.narrow(qkv, 0, 2, 1).reshape((B, h, n, dh))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        if attn_mode is not None:
            if attn_mode == "causal":
                keep = np.tril(np.ones((n, n), dtype=bool))
            elif attn_mode == "diag":
                keep = np.eye(n, dtype=bool)
            else:
                raise ValueError(f"unknown attention mode: {attn_mode}")
            bias = np.where(keep, 0.0, -1e9).astype(scores.dtype)
            scores = scores + Variable(bias)
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)  # (B, h, n, dh)
        ctx = T.transpose(ctx, (0, 2, 1, 3)).reshape((B, n, d))
        return self.out(ctx)


class TransformerBlock(Module):
    """Pre-norm attention + MLP block with residual connections."""

    def __init__(self, rng, d, heads, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(rng, d, heads, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype=dtype)
        self.fc1 = Linear(rng, d, 4 * d, dtype=dtype)
        self.fc2 = Linear(rng, 4 * d, d, dtype=dtype)

    def __call__(self, x, attn_mode=None):
        x = x + self.attn(self.ln1(x), attn_mode=attn_mode)
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))
