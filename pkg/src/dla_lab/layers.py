"""Small layer toolkit with hand-derived backward passes.

Every layer follows the same convention: ``forward(...) -> (out, cache)`` and
``backward(grad_out, cache) -> grad_inputs``. Parameter gradients accumulate
into ``Param.grad``. Caches are returned rather than stored so one layer may
be applied several times within a pass.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .numerics import DTYPE, ShapeError, conv2d, conv2d_backward

__all__ = [
    "Param",
    "Module",
    "Linear",
    "LayerNorm",
    "MLP",
    "MultiHeadAttention",
    "Conv2d",
    "relu",
    "relu_backward",
]


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Param(shape={self.value.shape})"


class Module:
    """Parameter container; attribute order defines the parameter inventory."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


class Linear(Module):
    """y = x @ W.T + b over the last axis; W has shape (out, in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None, bias: bool = True):
        w = xavier(rng, d_in, d_out, (d_out, d_in)) if rng is not None else np.zeros((d_out, d_in))
        self.weight = Param(w)
        self.bias = Param(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got {x.shape[-1]}")
        # one 2-D GEMM is much faster than a broadcast batch of small ones
        x2 = np.ascontiguousarray(x.reshape(-1, self.d_in))
        y = x2 @ self.weight.value.T
        if self.bias is not None:
            y += self.bias.value
        return y.reshape(x.shape[:-1] + (self.d_out,)), x2

    def backward(self, grad: np.ndarray, x: np.ndarray, need_input: bool = True):
        g2 = np.ascontiguousarray(grad.reshape(-1, self.d_out))
        self.weight.grad += g2.T @ x.reshape(-1, self.d_in)
        if self.bias is not None:
            self.bias.grad += g2.sum(axis=0)
        if not need_input:
            return None
        return (g2 @ self.weight.value).reshape(grad.shape[:-1] + (self.d_in,))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = Param(np.ones(d))
        self.bias = Param(np.zeros(d))
        self.eps = eps

    def forward(self, x: np.ndarray):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xh = xc * inv
        return xh * self.weight.value + self.bias.value, (xh, inv)

    def backward(self, grad: np.ndarray, cache):
        xh, inv = cache
        d = xh.shape[-1]
        self.weight.grad += (grad * xh).reshape(-1, d).sum(axis=0)
        self.bias.grad += grad.reshape(-1, d).sum(axis=0)
        gx = grad * self.weight.value
        return inv * (gx - gx.mean(axis=-1, keepdims=True) - xh * (gx * xh).mean(axis=-1, keepdims=True))


class MLP(Module):
    """Linear-ReLU stack; no activation after the last layer."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: np.ndarray):
        caches = []
        for i, layer in enumerate(self.layers):
            pre, c = layer.forward(x)
            caches.append((c, pre))
            x = relu(pre) if i < len(self.layers) - 1 else pre
        return x, caches

    def backward(self, grad: np.ndarray, caches, need_input: bool = True):
        for i in reversed(range(len(self.layers))):
            c, pre = caches[i]
            if i < len(self.layers) - 1:
                grad = relu_backward(pre, grad)
            grad = self.layers[i].backward(grad, c, need_input=need_input or i > 0)
        return grad


class MultiHeadAttention(Module):
    """Scaled dot-product attention over (B, N, d) token sets."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)
        self.d, self.n_heads = d, n_heads

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.d // self.n_heads).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, h, n, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * hd)

    def forward(self, q_in: np.ndarray, k_in: np.ndarray, v_in: np.ndarray):
        q, cq = self.q_proj.forward(q_in)
        k, ck = self.k_proj.forward(k_in)
        v, cv = self.v_proj.forward(v_in)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / np.sqrt(qh.shape[-1])
        s = qh @ kh.transpose(0, 1, 3, 2) * scale
        s -= s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        ctx = self._merge(a @ vh)
        out, co = self.out_proj.forward(ctx)
        return out, (cq, ck, cv, co, qh, kh, vh, a, scale)

    def backward(self, grad: np.ndarray, cache):
        cq, ck, cv, co, qh, kh, vh, a, scale = cache
        gctx = self._split(self.out_proj.backward(grad, co))
        ga = gctx @ vh.transpose(0, 1, 3, 2)
        gvh = a.transpose(0, 1, 3, 2) @ gctx
        gs = a * (ga - (a * ga).sum(axis=-1, keepdims=True)) * scale
        gqh = gs @ kh
        gkh = gs.transpose(0, 1, 3, 2) @ qh
        gq = self.q_proj.backward(self._merge(gqh), cq)
        gk = self.k_proj.backward(self._merge(gkh), ck)
        gv = self.v_proj.backward(self._merge(gvh), cv)
        return gq, gk, gv


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size, rng: np.random.Generator | None, stride=1, padding=None):
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        fan_in = c_in * kh * kw
        if rng is None:
            w = np.zeros((c_out, c_in, kh, kw))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kh, kw))
        self.weight = Param(w)
        self.bias = Param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding if padding is not None else (kh // 2, kw // 2)

    def forward(self, x: np.ndarray):
        return conv2d(x, self.weight.value, self.bias.value, self.padding, self.stride), x

    def backward(self, grad: np.ndarray, x: np.ndarray, need_input: bool = True):
        gx, gk, gb = conv2d_backward(x, self.weight.value, grad, self.padding, self.stride, need_input)
        self.weight.grad += gk
        self.bias.grad += gb
        return gx
