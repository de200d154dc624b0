"""Multi-depth feature adaptation and token assembly."""
from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

FEATURE_MODES = ("multi_depth", "final_layer")


class DepthAdapter(nn.Module):
    """Four residual MLP branches, one per tapped depth.

    Each branch computes ``F + MLP(norm(F))``. The second MLP layer starts at
    zero, so an untrained adapter is the identity.
    """

    def __init__(self, dim, rng, hidden=None, norm="batch"):
        if norm not in ("batch", "token"):
            raise ConfigError(f"unknown adapter norm {norm!r}")
        hidden = 4 * dim if hidden is None else hidden
        self.dim = dim
        self.norm_kind = norm
        self.norms = [nn.BatchNorm(dim) if norm == "batch" else nn.LayerNorm(dim) for _ in range(4)]
        self.mlps = [nn.MLP(dim, hidden, dim, rng, zero_out=True) for _ in range(4)]

    def adapt_layer(self, features, j):
        if j not in (1, 2, 3, 4):
            raise ContractError(f"depth index must be in 1..4, got {j}")
        features = T.as_tensor(features)
        if features.shape[-1] != self.dim:
            raise DimensionError(f"adapter width {self.dim} vs features {features.shape}")
        return features + self.mlps[j - 1](self.norms[j - 1](features))

    def forward(self, per_depth):
        return [self.adapt_layer(f, j) for j, f in enumerate(per_depth, start=1)]


def fuse_depths(adapted):
    if len(adapted) != 4:
        raise ContractError(f"expected 4 depth tensors, got {len(adapted)}")
    adapted = [T.as_tensor(a) for a in adapted]
    shape = adapted[0].shape
    if any(a.shape != shape for a in adapted):
        raise DimensionError(f"depth tensors disagree in shape: {[a.shape for a in adapted]}")
    return (adapted[0] + adapted[1] + adapted[2] + adapted[3]) * 0.25


def assemble_frame_tokens(fused, cls, registers):
    """Concatenate ``[patch tokens; CLS; registers]`` along the token axis."""
    fused, cls, registers = T.as_tensor(fused), T.as_tensor(cls), T.as_tensor(registers)
    dim = fused.shape[-1]
    if cls.shape[-1] != dim or registers.shape[-1] != dim or cls.shape[-2] != 1:
        raise DimensionError(
            f"cannot assemble patches {fused.shape} with cls {cls.shape} and registers {registers.shape}"
        )
    lead = fused.shape[:-2]
    if registers.shape[:-2] != lead:
        registers = T.Tensor(np.broadcast_to(registers.data, (*lead, *registers.shape[-2:])))
    return T.concat([fused, cls, registers], axis=-2)


def final_layer_only(stack):
    """Token sequence built from the last tap alone, no adapters."""
    return assemble_frame_tokens(stack.per_depth[3], stack.cls, stack.registers)


class FeatureFusion(nn.Module):
    """Turns encoder taps into the temporal module's input tokens."""

    def __init__(self, dim, rng, mode="multi_depth", hidden=None, norm="batch"):
        if mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")
        self.mode = mode
        self.adapter = DepthAdapter(dim, rng, hidden=hidden, norm=norm)

    def forward(self, per_depth, cls, registers):
        """``per_depth``: sequence of 4 arrays ``(..., N, D)``."""
        if self.mode == "final_layer":
            return assemble_frame_tokens(per_depth[3], cls, registers)
        fused = fuse_depths(self.adapter([Tensor(f) if not isinstance(f, Tensor) else f for f in per_depth]))
        return assemble_frame_tokens(fused, cls, registers)

    def from_stack(self, stack):
        return self.forward(stack.per_depth, stack.cls, stack.registers)
