"""Small numpy layers with hand-written backward passes.

Every layer caches what it needs in ``forward`` and consumes it in
``backward``; ``backward`` returns the input gradient and *accumulates*
into ``Param.grad``. Layout is channels-last throughout (``N, H, W, C``
for images, ``B, T, D`` for sequences).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, NonFiniteError

DEFAULT_DTYPE = np.float32


@dataclass(eq=False)
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    trainable: bool = True

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)


class Layer:
    kind = "layer"

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, obj in vars(self).items():
            if isinstance(obj, Param):
                yield prefix + name, obj
            elif isinstance(obj, Layer):
                yield from obj.named_params(prefix + name + ".")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0

    def set_trainable(self, flag: bool):
        for p in self.params():
            p.trainable = flag

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def _check_last_dim(x: np.ndarray, expected: int, what: str):
    if x.ndim < 1 or x.shape[-1] != expected:
        raise ContractError(f"{what}: expected trailing dim {expected}, got shape {x.shape}")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


class Dense(Layer):
    """``y = x W^T + b`` over the last axis; ``W`` is ``(d_out, d_in)``."""

    kind = "dense"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Param(rng.uniform(-bound, bound, (d_out, d_in)).astype(dtype))
        self.bias = Param(np.zeros(d_out, dtype=dtype)) if bias else None

    def named_params(self, prefix=""):
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias

    def forward(self, x):
        _check_last_dim(x, self.d_in, "dense input")
        self._x = x
        y = x @ self.weight.value.T
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, dy):
        _check_last_dim(dy, self.d_out, "dense output grad")
        x2 = self._x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        self.weight.grad += dy2.T @ x2
        if self.bias is not None:
            self.bias.grad += dy2.sum(axis=0)
        return dy @ self.weight.value


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        self._y = expit(x)
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class LayerNorm(Layer):
    kind = "layernorm"

    def __init__(self, d: int, dtype=DEFAULT_DTYPE, eps: float = 1e-5):
        self.d, self.eps = d, eps
        self.gamma = Param(np.ones(d, dtype=dtype))
        self.beta = Param(np.zeros(d, dtype=dtype))

    def forward(self, x):
        _check_last_dim(x, self.d, "layernorm input")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = xc * self._inv
        return self._xhat * self.gamma.value + self.beta.value

    def backward(self, dy):
        xhat, inv = self._xhat, self._inv
        self.gamma.grad += (dy * xhat).reshape(-1, self.d).sum(axis=0)
        self.beta.grad += dy.reshape(-1, self.d).sum(axis=0)
        g = dy * self.gamma.value
        return inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


class Embedding(Layer):
    """Learned additive position table for ``(B, T, D)`` sequences."""

    kind = "embedding"

    def __init__(self, n_pos: int, d: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.n_pos, self.d = n_pos, d
        self.table = Param((0.02 * rng.standard_normal((n_pos, d))).astype(dtype))

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] > self.n_pos or x.shape[2] != self.d:
            raise ContractError(f"embedding: expected (B, <={self.n_pos}, {self.d}), got {x.shape}")
        self._t = x.shape[1]
        return x + self.table.value[: self._t]

    def backward(self, dy):
        self.table.grad[: self._t] += dy.sum(axis=0)
        return dy


def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """``(N, H, W, C)`` -> ``(N, Ho, Wo, k, k, C)`` contiguous copy."""
    if k == s:
        n, h, w, c = x.shape
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        blk = x[:, : ho * k, : wo * k].reshape(n, ho, k, wo, k, c)
        return np.ascontiguousarray(blk.transpose(0, 1, 3, 2, 4, 5))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _col2im(cols: np.ndarray, out_shape: tuple, k: int, s: int) -> np.ndarray:
    """Scatter-add ``(N, Ho, Wo, k, k, C)`` patches back into ``out_shape``."""
    out = np.zeros(out_shape, dtype=cols.dtype)
    ho, wo = cols.shape[1], cols.shape[2]
    if k == s:
        # non-overlapping patches: a pure reshape
        n, c = cols.shape[0], cols.shape[-1]
        blk = cols.transpose(0, 1, 3, 2, 4, 5).reshape(n, ho * k, wo * k, c)
        out[:, : ho * k, : wo * k] += blk
        return out
    for i in range(k):
        for j in range(k):
            out[:, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, :, i, j]
    return out


class Conv2d(Layer):
    """Valid-padding strided convolution, NHWC."""

    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, k: int, stride: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        fan_in = k * k * c_in
        self.weight = Param((rng.standard_normal((k, k, c_in, c_out)) * np.sqrt(2.0 / fan_in)).astype(dtype))
        self.bias = Param(np.zeros(c_out, dtype=dtype))

    def out_size(self, h: int) -> int:
        return (h - self.k) // self.stride + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[-1] != self.c_in or min(x.shape[1:3]) < self.k:
            raise ContractError(f"conv2d: expected (N, H>={self.k}, W>={self.k}, {self.c_in}), got {x.shape}")
        self._xshape = x.shape
        cols = _im2col(x, self.k, self.stride)
        self._cols = cols.reshape(-1, self.k * self.k * self.c_in)
        y = self._cols @ self.weight.value.reshape(-1, self.c_out) + self.bias.value
        return y.reshape(*cols.shape[:3], self.c_out)

    def backward(self, dy):
        n, ho, wo, _ = dy.shape
        dy2 = dy.reshape(-1, self.c_out)
        self.weight.grad += (self._cols.T @ dy2).reshape(self.weight.value.shape)
        self.bias.grad += dy2.sum(axis=0)
        dcols = (dy2 @ self.weight.value.reshape(-1, self.c_out).T).reshape(n, ho, wo, self.k, self.k, self.c_in)
        return _col2im(dcols, self._xshape, self.k, self.stride)


class ConvTranspose2d(Layer):
    """Adjoint of :class:`Conv2d`; output extent ``(H - 1) * stride + k``."""

    kind = "conv_transpose2d"

    def __init__(self, c_in: int, c_out: int, k: int, stride: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        fan_in = c_in * (k // stride) ** 2 if k >= stride else c_in
        self.weight = Param((rng.standard_normal((c_in, k, k, c_out)) * np.sqrt(1.0 / fan_in)).astype(dtype))
        self.bias = Param(np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        if x.ndim != 4 or x.shape[-1] != self.c_in:
            raise ContractError(f"conv_transpose2d: expected (N, H, W, {self.c_in}), got {x.shape}")
        n, h, w, _ = x.shape
        self._x2 = x.reshape(-1, self.c_in)
        cols = (self._x2 @ self.weight.value.reshape(self.c_in, -1)).reshape(n, h, w, self.k, self.k, self.c_out)
        ho, wo = (h - 1) * self.stride + self.k, (w - 1) * self.stride + self.k
        return _col2im(cols, (n, ho, wo, self.c_out), self.k, self.stride) + self.bias.value

    def backward(self, dy):
        n = dy.shape[0]
        self.bias.grad += dy.reshape(-1, self.c_out).sum(axis=0)
        dcols = _im2col(dy, self.k, self.stride).reshape(self._x2.shape[0], -1)
        self.weight.grad += (self._x2.T @ dcols).reshape(self.weight.value.shape)
        dx = dcols @ self.weight.value.reshape(self.c_in, -1).T
        h = (dy.shape[1] - self.k) // self.stride + 1
        w = (dy.shape[2] - self.k) // self.stride + 1
        return dx.reshape(n, h, w, self.c_in)


class SelfAttention(Layer):
    """Single-head attention along the time axis of ``(B, T, D)`` input.

    No output projection: the result is ``softmax(q k^T / sqrt(D)) v``.
    ``q``, ``k`` and ``v`` are plain :class:`Dense` maps so that adapters
    can be swapped in for them.
    """

    kind = "attention"

    def __init__(self, d: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.d = d
        self.q = Dense(d, d, rng, dtype)
        self.k = Dense(d, d, rng, dtype)
        self.v = Dense(d, d, rng, dtype)

    def forward(self, x):
        if x.ndim != 3 or x.shape[-1] != self.d:
            raise ContractError(f"attention: expected (B, T, {self.d}), got {x.shape}")
        q, k, v = self.q(x), self.k(x), self.v(x)
        self._scale = 1.0 / np.sqrt(self.d)
        self._attn = softmax(q @ k.transpose(0, 2, 1) * self._scale, axis=-1)
        self._q, self._k, self._v = q, k, v
        return self._attn @ v

    def backward(self, dy):
        a = self._attn
        dv = a.transpose(0, 2, 1) @ dy
        ds = softmax_backward(a, dy @ self._v.transpose(0, 2, 1), axis=-1) * self._scale
        dq = ds @ self._k
        dk = ds.transpose(0, 2, 1) @ self._q
        return self.q.backward(dq) + self.k.backward(dk) + self.v.backward(dv)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def named_params(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}{i}.")

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class Adam:
    """Adaptive-moment optimizer with bias correction.

    Parameters whose ``trainable`` flag is off are skipped entirely, so their
    values and moment buffers stay untouched.
    """

    def __init__(self, params: list[Param], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            g = p.grad
            if g.shape != p.value.shape:
                raise ContractError(f"adam: grad shape {g.shape} != param shape {p.value.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0


def adam_step(opt: Adam, params: list[Param], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Functional form: load ``grads`` into ``params`` and take one step."""
    if len(params) != len(grads):
        raise ContractError(f"adam_step: {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.value.shape != np.shape(g):
            raise ContractError(f"adam_step: grad shape {np.shape(g)} != param shape {p.value.shape}")
        p.grad[...] = g
    opt.step()
    return [p.value for p in params]


def projection_loss(y: np.ndarray, seed: int = 0) -> tuple[float, np.ndarray]:
    """``sum(r * y) + 0.5 * sum(y**2)`` with a fixed random ``r``; used by grad checks."""
    r = np.random.default_rng(seed).standard_normal(y.shape)
    return float((r * y).sum() + 0.5 * (y * y).sum()), r + y


def grad_check(
    fragment: Layer,
    x: np.ndarray,
    eps: float = 1e-5,
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]] = projection_loss,
    include_input: bool = False,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs over every trainable scalar of ``fragment`` (and of ``x`` when
    ``include_input``). Relative error is ``|a - n| / max(|a| + |n|, 1e-6)``; the floor absorbs
    finite-difference round-off on structurally-zero gradients.
    """
    x = np.array(x, dtype=np.float64)
    named = [p for p in fragment.params() if p.trainable]
    if not named and not include_input:
        return 0.0

    def evaluate(inp):
        val, dy = loss(fragment.forward(inp))
        if not np.isfinite(val):
            raise NonFiniteError(f"grad_check: non-finite loss {val}")
        return val, dy

    fragment.zero_grad()
    _, dy = evaluate(x)
    dx = fragment.backward(dy)
    analytic = [p.grad.copy() for p in named]
    targets = list(zip(named, analytic))

    worst = 0.0

    def compare(arr: np.ndarray, grad: np.ndarray):
        nonlocal worst
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp, _ = evaluate(x)
            flat[i] = old - eps
            lm, _ = evaluate(x)
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            err = abs(num - gflat[i]) / max(abs(num) + abs(gflat[i]), 1e-6)
            worst = max(worst, err)

    for p, g in targets:
        compare(p.value, g)
    if include_input:
        compare(x, np.asarray(dx))
    return worst
