"""Parameter containers and the layers the models are built from."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=T.DTYPE), requires_grad=True, name=name)


class Module:
    """Base class; parameters are discovered by walking attributes."""

    training = True
    _buffers = ()

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            else:
                yield name, value

    def named_buffers(self, prefix=""):
        for key in self._buffers:
            yield f"{prefix}{key}", getattr(self, key)
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)
        return self

    def train(self, flag=True):
        for m in self.modules():
            m.training = flag
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update((name, b.copy()) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state):
        own = {name: p.data for name, p in self.named_parameters()}
        own.update(self.named_buffers())
        missing = sorted(set(own) - set(state))
        if missing:
            raise ContractError(f"state dict is missing {missing[:5]}")
        for name, target in own.items():
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != target.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != {target.shape}")
            target[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, std=None):
        std = (1.0 / np.sqrt(d_in)) if std is None else std
        self.weight = parameter(rng.normal(0.0, std, (d_in, d_out)) if std else np.zeros((d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight) if x.ndim >= 2 else T.matmul(T.reshape(x, (1, -1)), self.weight)[0]
        return y + self.bias if self.bias is not None else y

    def zero_(self):
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0
        return self


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    """Per-channel normalisation over every axis but the last.

    Training mode uses the batch statistics and updates running averages;
    evaluation mode uses the running averages, so a single frame is normalised
    the same way regardless of what else is in the batch.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, dim, eps=1e-5, momentum=0.1):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        axes = tuple(range(x.ndim - 1))
        if self.training:
            mu = T.mean(x, axis=axes, keepdims=True)
            xc = x - mu
            var = T.mean(xc * xc, axis=axes, keepdims=True)
            count = int(np.prod(x.shape[:-1]))
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
            self.running_var[...] = (1 - m) * self.running_var + m * unbiased
            xhat = xc / T.sqrt(var + self.eps)
        else:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * scale
        return xhat * self.gamma + self.beta


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in, d_hidden, d_out, rng, zero_out=False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, std=0.0 if zero_out else None)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` parallel heads.

    ``forward(q, kv)`` lets every row of ``q`` attend over the rows of ``kv``;
    self-attention is ``forward(x, x)``. Leading axes are batch axes.
    """

    def __init__(self, dim, heads, rng, std=None):
        if heads < 1 or dim % heads:
            raise ConfigError(f"width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q = Linear(dim, dim, rng, std=std)
        self.k = Linear(dim, dim, rng, std=std)
        self.v = Linear(dim, dim, rng, std=std)
        self.out = Linear(dim, dim, rng, std=std)

    def _split(self, x):
        *lead, n, _ = x.shape
        dh = self.dim // self.heads
        return T.swapaxes(T.reshape(x, (*lead, n, self.heads, dh)), -2, -3)

    def attention_weights(self, q, kv):
        qh, kh = self._split(self.q(q)), self._split(self.k(kv))
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        return T.softmax(T.matmul(qh, T.swapaxes(kh, -1, -2)) * scale, axis=-1)

    def forward(self, q, kv):
        if q.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise DimensionError(f"attention width {self.dim} vs inputs {q.shape}, {kv.shape}")
        if kv.shape[-2] == 0:
            raise ContractError("attention context is empty")
        weights = self.attention_weights(q, kv)
        ctx = T.matmul(weights, self._split(self.v(kv)))
        *lead, _, m, dh = ctx.shape
        merged = T.reshape(T.swapaxes(ctx, -2, -3), (*lead, m, self.dim))
        return self.out(merged)


def mhsa(x, attn):
    """Multi-head self-attention of ``x`` through ``attn``."""
    return attn(x, x)


def cross_attention(queries, keys_values, attn):
    """Each query row attends over the context rows."""
    return attn(queries, keys_values)


class TransformerBlock(Module):
    """Pre-norm self-attention + MLP block with residuals."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, rng)

    def forward(self, x):
        h = self.norm1(x)
        z = x + self.attn(h, h)
        return z + self.mlp(self.norm2(z))
