"""Selective state-space recurrence with sequential and chunk-parallel scans.

Discretisation is zero-order hold on a diagonal, strictly negative ``A``:
``A_bar = exp(delta * A)`` and ``B_bar = (A_bar - 1) / A * B_t``. The step size
``delta = softplus(x W + b)`` and the vectors ``B_t``, ``C_t`` depend on the
current input, which is what makes the scan selective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class SSMState:
    """Hidden matrix ``h`` of shape ``(..., d, n)`` and the number of steps taken."""

    h: Tensor
    step: int = 0

    @classmethod
    def zeros(cls, lead, d, n):
        return cls(Tensor(np.zeros((*lead, d, n))), 0)


def discretize(delta, A, B_t):
    """Zero-order-hold discretisation.

    ``delta``: ``(..., d)`` positive step sizes; ``A``: ``(d, n)``; ``B_t``:
    ``(..., n)``. Returns ``(A_bar, B_bar)``, both ``(..., d, n)``.
    """
    delta, A, B_t = T.as_tensor(delta), T.as_tensor(A), T.as_tensor(B_t)
    if np.any(delta.data <= 0):
        raise ContractError("discretize requires delta > 0")
    dA = T.unsqueeze(delta, -1) * A
    A_bar = T.exp(dA)
    # expm1 keeps B_bar accurate when delta * A is tiny
    B_bar = T.expm1(dA) / A * T.unsqueeze(B_t, -2)
    return A_bar, B_bar


def _inverse_softplus(y):
    return y + np.log(-np.expm1(-y))


class SelectiveSSM(nn.Module):
    """Diagonal selective SSM over ``d`` channels with ``n`` states per channel."""

    def __init__(self, d, n=16, rng=None, dt_min=1e-3, dt_max=1e-1):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d, self.n = d, n
        self.A_log = nn.parameter(np.log(np.tile(np.arange(1, n + 1, dtype=float), (d, 1))))
        self.dt_proj = nn.Linear(d, d, rng)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d))
        self.dt_proj.bias.data[...] = _inverse_softplus(dt)
        self.B_proj = nn.Linear(d, n, rng)
        self.C_proj = nn.Linear(d, n, rng)
        self.skip = nn.parameter(np.ones(d))

    @property
    def A(self):
        return -T.exp(self.A_log)

    def selectivity(self, x):
        """Input-dependent ``(delta, B_t, C_t)`` for ``x`` of shape ``(..., d)``."""
        if x.shape[-1] != self.d:
            raise DimensionError(f"SSM expects {self.d} channels, got {x.shape}")
        delta = T.softplus(self.dt_proj(x))
        return delta, self.B_proj(x), self.C_proj(x)

    def _readout(self, h, C_t, x):
        return T.tsum(T.unsqueeze(C_t, -2) * h, axis=-1) + self.skip * x

    def init_state(self, lead):
        return SSMState.zeros(lead, self.d, self.n)

    def step(self, x_t, state):
        """One recurrence step. ``x_t``: ``(..., d)``; returns ``(y_t, state')``."""
        x_t = T.as_tensor(x_t)
        if state.h.shape != (*x_t.shape, self.n):
            raise DimensionError(f"state {state.h.shape} does not match input {x_t.shape}")
        delta, B_t, C_t = self.selectivity(x_t)
        A_bar, B_bar = discretize(delta, self.A, B_t)
        h = A_bar * state.h + B_bar * T.unsqueeze(x_t, -1)
        return self._readout(h, C_t, x_t), SSMState(h, state.step + 1)

    def _prepare(self, xs):
        delta, B_t, C_t = self.selectivity(xs)
        A_bar, B_bar = discretize(delta, self.A, B_t)
        u = B_bar * T.unsqueeze(xs, -1)
        return delta, A_bar, u, C_t

    def scan_sequential(self, xs, state=None):
        """Fold :meth:`step` over axis ``-2`` of ``xs`` (``(..., T, d)``)."""
        xs = T.as_tensor(xs)
        steps = xs.shape[-2]
        if steps < 1:
            raise ContractError("scan needs at least one time step")
        state = self.init_state(xs.shape[:-2]) if state is None else state
        _, A_bar, u, C_t = self._prepare(xs)
        H = T.linear_recurrence(A_bar, u, state.h, axis=-3)
        return self._readout(H, C_t, xs), SSMState(H[..., steps - 1, :, :], state.step + steps)

    def scan_chunked(self, xs, chunk, state=None):
        """Blockwise scan: inside each chunk the recurrence is unrolled in closed form.

        With ``S_i`` the running sum of ``delta * A`` inside the chunk,
        ``h_i = exp(S_i) h_0 + sum_{j<=i} exp(S_i - S_j) B_bar_j x_j``.
        """
        xs = T.as_tensor(xs)
        steps = xs.shape[-2]
        if chunk < 1:
            raise ContractError(f"chunk must be >= 1, got {chunk}")
        if steps < 1:
            raise ContractError("scan needs at least one time step")
        state = self.init_state(xs.shape[:-2]) if state is None else state
        delta, _, u, C_t = self._prepare(xs)
        dA = T.unsqueeze(delta, -1) * self.A
        h = state.h
        blocks = []
        for start in range(0, steps, chunk):
            stop = min(start + chunk, steps)
            length = stop - start
            S = T.cumsum(dA[..., start:stop, :, :], axis=-3)
            u_c = u[..., start:stop, :, :]
            diff = T.unsqueeze(S, -3) - T.unsqueeze(S, -4)  # [..., i, j, d, n] = S_i - S_j
            causal = np.tril(np.ones((length, length), dtype=bool))[:, :, None, None]
            weights = T.exp(T.where(causal, diff, -np.inf))
            carried = T.exp(S) * T.unsqueeze(h, -3)
            H = T.tsum(weights * T.unsqueeze(u_c, -4), axis=-3) + carried
            blocks.append(H)
            h = H[..., length - 1, :, :]
        H = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=-3)
        return self._readout(H, C_t, xs), SSMState(h, state.step + steps)

    def forward(self, xs, state=None, chunk=None):
        if chunk is None:
            return self.scan_sequential(xs, state)
        return self.scan_chunked(xs, chunk, state)


def selective_scan_sequential(ssm, xs, init=None):
    return ssm.scan_sequential(xs, init)


def selective_scan_chunked(ssm, xs, chunk, init=None):
    return ssm.scan_chunked(xs, chunk, init)
