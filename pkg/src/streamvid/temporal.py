"""Recurrent temporal modules sharing the interface ``h_t, s_t = S(X_t, s_{t-1})``.

Every module offers two evaluation paths:

* ``step(X_t, state)`` advances one frame (the streaming path);
* ``forward_sequence(X, state)`` consumes a whole clip ``(..., T, M, D)``.
  Mamba-family modules batch their spatial blocks over all frames and run
  the SSM as a scan over time, so the two paths share no code beyond the
  layer weights and must agree numerically.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .ssm import SelectiveSSM, SSMState
from .tensor import Tensor

VARIANTS = ("rvm_rnn", "mamba", "mambamix", "gmmix")
ALL_VARIANTS = VARIANTS + ("none",)

STATE_MAGIC = b"VFMS"
STATE_VERSION = 1


@dataclass
class RecurrentState:
    """Per-sequence memory: one tensor for RVM_RNN, one per layer for Mamba variants."""

    variant: str
    tensors: list = field(default_factory=list)
    step: int = 0

    def detach(self):
        return RecurrentState(self.variant, [Tensor(t.data.copy()) for t in self.tensors], self.step)


# ---------------------------------------------------------------------------
# Mamba family
# ---------------------------------------------------------------------------

class SSMBranch(nn.Module):
    """``out(SSM(LN(x)))`` applied independently to every token."""

    def __init__(self, dim, n, rng, out_std=None):
        self.norm = nn.LayerNorm(dim)
        self.ssm = SelectiveSSM(dim, n, rng)
        self.out = nn.Linear(dim, dim, rng, std=out_std)

    def step(self, x, h):
        y, new = self.ssm.step(self.norm(x), SSMState(h))
        return self.out(y), new.h

    def sequence(self, x, h, chunk=None):
        # (..., T, M, D) -> (..., M, T, D) so the scan runs over time per token
        xt = T.swapaxes(self.norm(x), -2, -3)
        ys, new = self.ssm(xt, SSMState(h), chunk=chunk)
        return self.out(T.swapaxes(ys, -2, -3)), new.h


class MambaLayer(nn.Module):
    """Pre-norm residual SSM layer with no cross-token mixing."""

    def __init__(self, dim, n, heads, rng, out_std=None):
        self.branch = SSMBranch(dim, n, rng, out_std)

    def step(self, x, h):
        y, h = self.branch.step(x, h)
        return x + y, h

    def sequence(self, x, h, chunk=None):
        y, h = self.branch.sequence(x, h, chunk)
        return x + y, h


class MambaMixLayer(nn.Module):
    """Per-frame spatial transformer block followed by the residual SSM."""

    def __init__(self, dim, n, heads, rng, out_std=None):
        self.spatial = nn.TransformerBlock(dim, heads, rng)
        self.branch = SSMBranch(dim, n, rng, out_std)

    def _combine(self, z, z_tilde):
        return z_tilde

    def step(self, x, h):
        z = self.spatial(x)
        y, h = self.branch.step(z, h)
        return self._combine(z, z + y), h

    def sequence(self, x, h, chunk=None):
        z = self.spatial(x)
        y, h = self.branch.sequence(z, h, chunk)
        return self._combine(z, z + y), h


class GMMixLayer(MambaMixLayer):
    """MambaMix layer whose output interpolates between pre- and post-SSM tokens."""

    def __init__(self, dim, n, heads, rng, out_std=None, gate_bias=0.0):
        super().__init__(dim, n, heads, rng, out_std)
        # zero weights: at init the gate is exactly sigmoid(gate_bias) for every token
        self.gate = nn.Linear(2 * dim, dim, rng)
        self.gate.zero_()
        self.gate.bias.data[...] = gate_bias

    def _combine(self, z, z_tilde):
        g = T.sigmoid(self.gate(T.concat([z, z_tilde], axis=-1)))
        return (1.0 - g) * z + g * z_tilde


_LAYERS = {"mamba": MambaLayer, "mambamix": MambaMixLayer, "gmmix": GMMixLayer}


class MambaFamily(nn.Module):
    def __init__(self, variant, dim, rng, layers=2, n=16, heads=4, gate_bias=0.0, chunk=None):
        self.variant = variant
        self.dim = dim
        self.n = n
        self.chunk = chunk
        kwargs = {"gate_bias": gate_bias} if variant == "gmmix" else {}
        # residual-branch scaling: each SSM branch starts 1/sqrt(2K) smaller than a plain linear
        out_std = 1.0 / np.sqrt(2 * layers * dim)
        self.layers = [_LAYERS[variant](dim, n, heads, rng, out_std, **kwargs) for _ in range(layers)]
        self.final_norm = nn.LayerNorm(dim)

    def init_state(self, lead):
        return RecurrentState(
            self.variant, [Tensor(np.zeros((*lead, self.dim, self.n))) for _ in self.layers], 0
        )

    def step(self, x, state):
        _check_input(x, self.dim)
        new = []
        for layer, h in zip(self.layers, state.tensors):
            x, h = layer.step(x, h)
            new.append(h)
        return self.final_norm(x), RecurrentState(self.variant, new, state.step + 1)

    def forward_sequence(self, xs, state):
        new = []
        for layer, h in zip(self.layers, state.tensors):
            xs, h = layer.sequence(xs, h, self.chunk)
            new.append(h)
        return self.final_norm(xs), RecurrentState(self.variant, new, state.step + xs.shape[-3])


def strip_gates(module):
    """A MambaMix module sharing every weight of a GMMix module except the gates."""
    if module.variant != "gmmix":
        raise ConfigError("strip_gates expects a gmmix module")
    view = MambaFamily.__new__(MambaFamily)
    view.variant = "mambamix"
    view.dim, view.n, view.chunk = module.dim, module.n, module.chunk
    view.layers = []
    for layer in module.layers:
        plain = MambaMixLayer.__new__(MambaMixLayer)
        plain.spatial, plain.branch = layer.spatial, layer.branch
        view.layers.append(plain)
    view.final_norm = module.final_norm
    return view


# ---------------------------------------------------------------------------
# RVM recurrent core
# ---------------------------------------------------------------------------

class TxLayer(nn.Module):
    """Cross-attention to the gated state, then MLP, then self-attention (all pre-norm)."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        self.norm_cross = nn.LayerNorm(dim)
        self.cross = nn.MultiHeadAttention(dim, heads, rng)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.MLP(dim, mlp_ratio * dim, dim, rng)
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = nn.MultiHeadAttention(dim, heads, rng)

    def forward(self, y, context):
        y = y + self.cross(self.norm_cross(y), context)
        y = y + self.mlp(self.norm_mlp(y))
        h = self.norm_self(y)
        return y + self.self_attn(h, h)


class RVMRNNCore(nn.Module):
    variant = "rvm_rnn"

    def __init__(self, dim, rng, layers=2, heads=4):
        self.dim = dim
        self.update_frame = nn.Linear(dim, dim, rng)
        self.update_state = nn.Linear(dim, dim, rng, bias=False)
        self.reset_frame = nn.Linear(dim, dim, rng)
        self.reset_state = nn.Linear(dim, dim, rng, bias=False)
        self.state_norm = nn.LayerNorm(dim)
        self.tx = [TxLayer(dim, heads, rng) for _ in range(layers)]
        self.out_norm = nn.LayerNorm(dim)

    def init_state(self, lead):
        return RecurrentState(self.variant, [Tensor(np.zeros((*lead, self.dim)))], 0)

    def transformer(self, frame, context):
        y = frame
        for layer in self.tx:
            y = layer(y, context)
        return y

    def gates(self, x, s):
        u = T.sigmoid(self.update_frame(x) + self.update_state(s))
        r = T.sigmoid(self.reset_frame(x) + self.reset_state(s))
        return u, r

    def step(self, x, state):
        _check_input(x, self.dim)
        (s,) = state.tensors
        if s.shape != x.shape:
            raise DimensionError(f"state {s.shape} does not match frame tokens {x.shape}")
        u, r = self.gates(x, s)
        candidate = self.transformer(x, r * self.state_norm(s))
        s_new = (1.0 - u) * s + u * candidate
        return self.out_norm(s_new), RecurrentState(self.variant, [s_new], state.step + 1)

    def forward_sequence(self, xs, state):
        outs = []
        for t in range(xs.shape[-3]):
            h, state = self.step(xs[..., t, :, :], state)
            outs.append(h)
        return T.stack(outs, axis=-3), state


class IdentityTemporal(nn.Module):
    """Frame-only baseline: passes tokens through and keeps no memory."""

    variant = "none"

    def __init__(self, dim):
        self.dim = dim

    def init_state(self, lead):
        return RecurrentState(self.variant, [], 0)

    def step(self, x, state):
        _check_input(x, self.dim)
        return x, RecurrentState(self.variant, [], state.step + 1)

    def forward_sequence(self, xs, state):
        return xs, RecurrentState(self.variant, [], state.step + xs.shape[-3])


def _check_input(x, dim):
    if x.ndim < 2 or x.shape[-1] != dim:
        raise DimensionError(f"temporal module expects (..., M, {dim}) tokens, got {x.shape}")


def build_temporal(variant, dim, rng, layers=2, n=16, heads=4, gate_bias=0.0, chunk=None):
    if variant == "none":
        return IdentityTemporal(dim)
    if variant == "rvm_rnn":
        return RVMRNNCore(dim, rng, layers=layers, heads=heads)
    if variant in _LAYERS:
        return MambaFamily(variant, dim, rng, layers=layers, n=n, heads=heads,
                           gate_bias=gate_bias, chunk=chunk)
    raise ConfigError(f"unknown temporal variant {variant!r}; expected one of {ALL_VARIANTS}")


def temporal_forward(module, frames, state=None):
    """Run ``module`` over ``frames`` (``(..., T, M, D)``) from ``state`` (zeros if None)."""
    frames = T.as_tensor(frames)
    if frames.ndim < 3 or frames.shape[-3] < 1:
        raise DimensionError(f"expected a non-empty (..., T, M, D) sequence, got {frames.shape}")
    if state is None:
        state = module.init_state(frames.shape[:-3] + frames.shape[-2:-1])
    return module.forward_sequence(frames, state)


def stream(module, frames, state=None):
    """Frame-by-frame reference path: same contract as :func:`temporal_forward`."""
    frames = T.as_tensor(frames)
    if state is None:
        state = module.init_state(frames.shape[:-3] + frames.shape[-2:-1])
    outs = []
    for t in range(frames.shape[-3]):
        h, state = module.step(frames[..., t, :, :], state)
        outs.append(h)
    return T.stack(outs, axis=-3), state


def load_temporal_weights(module, state_dict, prefix=""):
    """Initialise a temporal module from stored weights (e.g. a pretrained core)."""
    own = {k[len(prefix):]: v for k, v in state_dict.items() if k.startswith(prefix)}
    module.load_state_dict(own)
    return module


# ---------------------------------------------------------------------------
# state snapshots
# ---------------------------------------------------------------------------

def state_to_bytes(state):
    tag = state.variant.encode()
    parts = [STATE_MAGIC, struct.pack("<IH", STATE_VERSION, len(tag)), tag,
             struct.pack("<QI", state.step, len(state.tensors))]
    for t in state.tensors:
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def state_from_bytes(buf):
    def need(offset, size):
        if offset + size > len(buf):
            raise FormatError("truncated state snapshot", len(buf))

    need(0, 4)
    if buf[:4] != STATE_MAGIC:
        raise FormatError("bad magic, expected b'VFMS'", 0)
    need(4, 6)
    version, tag_len = struct.unpack_from("<IH", buf, 4)
    if version != STATE_VERSION:
        raise FormatError(f"unsupported state version {version}", 4)
    off = 10
    need(off, tag_len)
    variant = buf[off:off + tag_len].decode()
    if variant not in ALL_VARIANTS:
        raise FormatError(f"unknown variant tag {variant!r}", off)
    off += tag_len
    need(off, 12)
    step, count = struct.unpack_from("<QI", buf, off)
    off += 12
    tensors = []
    for _ in range(count):
        need(off, 4)
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 8 * ndim)
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape)) * 8
        need(off, size)
        arr = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape)
        tensors.append(Tensor(arr.astype(np.float64)))
        off += size
    if off != len(buf):
        raise FormatError("trailing bytes after state snapshot", off)
    return RecurrentState(variant, tensors, step)
