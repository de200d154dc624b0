"""AdamW, the warmup + cosine schedule, and global-norm clipping."""
from __future__ import annotations

import math

import numpy as np

ETA_MIN = 1e-7


def lr_schedule(step, peak, warmup, total, eta_min=ETA_MIN):
    """Linear 0 -> peak over ``warmup`` steps, then cosine down to ``eta_min`` at ``total``.

    The floor never exceeds the peak, so ``peak=0`` means no updates at all.
    """
    eta_min = min(eta_min, peak)
    if step >= total:
        return eta_min
    if step <= warmup:
        return peak * step / warmup if warmup else peak
    progress = (step - warmup) / (total - warmup)
    return eta_min + (peak - eta_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads, max_norm):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm`` (0 disables)."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


class AdamW:
    """Decoupled weight decay, applied before the moment update."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr):
        """``grads`` is a list aligned with ``params``; arrays, updated in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            p.data *= 1.0 - lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays, t):
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"m.{i}"]
            self.v[i][...] = arrays[f"v.{i}"]
        self.t = t
