"""Minimal transformer layers with hand-written backward passes.

Every module follows the same contract: forward(x) returns (y, cache) and
backward(cache, dy, param_grads=True) returns dx while accumulating parameter
gradients into Param.grad. Caches are explicit so several forward passes can
coexist before their backwards run (needed by multi-branch attack losses).
Setting param_grads=False skips weight-gradient work for input-only gradients.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "Param",
    "zero_grads",
    "Linear",
    "LayerNorm",
    "Gelu",
    "Mlp",
    "MultiHeadSelfAttention",
    "Block",
    "softmax",
]


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


def zero_grads(params) -> None:
    for p in params:
        p.grad[...] = 0.0


def _xavier(rng, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype)


class Linear:
    def __init__(self, rng, d_in, d_out, name, dtype=np.float32):
        self.w = Param(f"{name}.w", _xavier(rng, d_in, d_out, dtype))
        self.b = Param(f"{name}.b", np.zeros(d_out, dtype=dtype))

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        return x @ self.w.value + self.b.value, (x,)

    def backward(self, cache, dy, param_grads=True):
        (x,) = cache
        if param_grads:
            x2 = x.reshape(-1, x.shape[-1])
            dy2 = dy.reshape(-1, dy.shape[-1])
            self.w.grad += x2.T @ dy2
            self.b.grad += dy2.sum(axis=0)
        return dy @ self.w.value.T


class LayerNorm:
    def __init__(self, dim, name, dtype=np.float32, eps=1e-6):
        self.g = Param(f"{name}.g", np.ones(dim, dtype=dtype))
        self.b = Param(f"{name}.b", np.zeros(dim, dtype=dtype))
        self.eps = eps

    def params(self):
        return [self.g, self.b]

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        var += self.eps
        np.sqrt(var, out=var)
        inv = np.divide(1.0, var, out=var)
        xhat = xc
        xhat *= inv
        y = xhat * self.g.value
        y += self.b.value
        return y, (xhat, inv)

    def backward(self, cache, dy, param_grads=True):
        xhat, inv = cache
        if param_grads:
            self.g.grad += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
            self.b.grad += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        dxhat = dy * self.g.value
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dxhat -= m1
        dxhat -= xhat * m2
        dxhat *= inv
        return dxhat


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Gelu:
    def params(self):
        return []

    def forward(self, x):
        # phi = 0.5 * (1 + erf(x / sqrt(2))), built in place to avoid
        # temporaries: this activation runs on the widest tensors in the net
        phi = x * _INV_SQRT2
        erf(phi, out=phi)
        phi += 1.0
        phi *= 0.5
        return x * phi, (x, phi)

    def backward(self, cache, dy, param_grads=True):
        x, phi = cache
        pdf = x * x
        pdf *= -0.5
        np.exp(pdf, out=pdf)
        pdf *= _INV_SQRT2PI
        pdf *= x
        pdf += phi
        pdf *= dy
        return pdf


class Mlp:
    def __init__(self, rng, dim, hidden, name, dtype=np.float32):
        self.fc1 = Linear(rng, dim, hidden, f"{name}.fc1", dtype)
        self.act = Gelu()
        self.fc2 = Linear(rng, hidden, dim, f"{name}.fc2", dtype)

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a, c2 = self.act.forward(h)
        y, c3 = self.fc2.forward(a)
        return y, (c1, c2, c3)

    def backward(self, cache, dy, param_grads=True):
        c1, c2, c3 = cache
        da = self.fc2.backward(c3, dy, param_grads)
        dh = self.act.backward(c2, da, param_grads)
        return self.fc1.backward(c1, dh, param_grads)


def softmax(x, axis=-1, out=None):
    """Stable softmax; pass out=x to work in place on an owned buffer."""
    if out is None:
        out = x - x.max(axis=axis, keepdims=True)
    else:
        np.subtract(x, x.max(axis=axis, keepdims=True), out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)
    return out


class MultiHeadSelfAttention:
    def __init__(self, rng, dim, num_heads, name, dtype=np.float32):
        if dim % num_heads != 0:
            raise ValueError("dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.qkv = Linear(rng, dim, 3 * dim, f"{name}.qkv", dtype)
        self.proj = Linear(rng, dim, dim, f"{name}.proj", dtype)

    def params(self):
        return self.qkv.params() + self.proj.params()

    def forward(self, x):
        b, t, d = x.shape
        qkv, c_qkv = self.qkv.forward(x)
        # one contiguous copy up front keeps every batched matmul stride-free
        qkv = np.ascontiguousarray(
            qkv.reshape(b, t, 3, self.num_heads, self.head_dim)
            .transpose(2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]  # each (b, h, t, hd)
        scores = q @ k.transpose(0, 1, 3, 2)
        scores *= self.scale
        att = softmax(scores, out=scores)
        ctx = att @ v
        merged = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
        y, c_proj = self.proj.forward(merged)
        return y, (c_qkv, c_proj, q, k, v, att)

    def backward(self, cache, dy, param_grads=True):
        c_qkv, c_proj, q, k, v, att = cache
        b, h, t, hd = q.shape
        dmerged = self.proj.backward(c_proj, dy, param_grads)
        dctx = np.ascontiguousarray(
            dmerged.reshape(b, t, h, hd).transpose(0, 2, 1, 3))
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        datt -= (datt * att).sum(axis=-1, keepdims=True)
        datt *= att
        datt *= self.scale
        ds = datt
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.empty((b, t, 3, h, hd), dtype=dy.dtype)
        dqkv[:, :, 0] = dq.transpose(0, 2, 1, 3)
        dqkv[:, :, 1] = dk.transpose(0, 2, 1, 3)
        dqkv[:, :, 2] = dv.transpose(0, 2, 1, 3)
        return self.qkv.backward(c_qkv, dqkv.reshape(b, t, 3 * h * hd), param_grads)


class Block:
    """Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x))."""

    def __init__(self, rng, dim, num_heads, name, mlp_ratio=4, dtype=np.float32):
        self.ln1 = LayerNorm(dim, f"{name}.ln1", dtype)
        self.attn = MultiHeadSelfAttention(rng, dim, num_heads, f"{name}.attn", dtype)
        self.ln2 = LayerNorm(dim, f"{name}.ln2", dtype)
        self.mlp = Mlp(rng, dim, dim * mlp_ratio, f"{name}.mlp", dtype)

    def params(self):
        return (self.ln1.params() + self.attn.params()
                + self.ln2.params() + self.mlp.params())

    def forward(self, x):
        a, c1 = self.ln1.forward(x)
        b, c2 = self.attn.forward(a)
        b += x
        h = b
        m, c3 = self.ln2.forward(h)
        f, c4 = self.mlp.forward(m)
        f += h
        return f, (c1, c2, c3, c4)

    def backward(self, cache, dy, param_grads=True):
        c1, c2, c3, c4 = cache
        dm = self.mlp.backward(c4, dy, param_grads)
        dh = self.ln2.backward(c3, dm, param_grads)
        dh += dy
        da = self.attn.backward(c2, dh, param_grads)
        dx = self.ln1.backward(c1, da, param_grads)
        dx += dh
        return dx
