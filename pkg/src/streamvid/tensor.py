"""Dense fp64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`GradTape` is active and
at least one input is tracked, the operation appends a node to the tape holding
its parents and a closure mapping the output gradient to parent gradients.
Nodes are appended in execution order, so the tape is topologically sorted by
construction and the backward sweep is a single reverse pass.
"""
from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, DimensionError

DTYPE = np.float64

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager::

        with GradTape() as tape:
            loss = model.loss(batch)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("GradTape exited out of order")
        stack.pop()
        return False

    def tracks(self, t):
        return t.requires_grad or t._tape is self

    def gradient(self, loss, sources=None):
        return backward(self, loss, sources)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tape")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method aliases ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(tape.tracks(p) for p in parents):
        out._tape = tape
        tape.nodes.append((out, parents, backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape, loss, sources=None):
    """Reverse sweep over ``tape`` from scalar ``loss``.

    Returns a dict mapping each reached leaf tensor (``requires_grad=True``) to
    its gradient as a Tensor. When ``sources`` is given, only those tensors are
    returned, with zero gradients for unreached ones.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ContractError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = fn(g)
        for p, pg in zip(parents, pgrads):
            if pg is None or not tape.tracks(p):
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=DTYPE), p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p.requires_grad and p._tape is not tape:
                leaves[key] = p
    if sources is None:
        return {p: Tensor(grads[k]) for k, p in leaves.items()}
    return {p: Tensor(grads.get(id(p), np.zeros_like(p.data))) for p in sources}


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def power(a, exponent):
    a = as_tensor(a)
    ad = a.data
    e = float(exponent)
    return _make(ad**e, (a,), lambda g: (g * e * ad ** (e - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def expm1(a):
    a = as_tensor(a)
    ad = a.data
    return _make(np.expm1(ad), (a,), lambda g: (g * np.exp(ad),))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    a = as_tensor(a)
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _make(out, (a,), lambda g: (g * expit(ad),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    ad = a.data
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))

    def grad(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * ad * ad)
        return (g * (cdf + ad * pdf),)

    return _make(ad * cdf, (a,), grad)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (np.where(pick_a, g, 0.0), np.where(pick_a, 0.0, g)),
    )


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (np.where(pick_a, g, 0.0), np.where(pick_a, 0.0, g)),
    )


def unsqueeze(a, axis):
    a = as_tensor(a)
    shape = list(a.shape)
    ax = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(ax, 1)
    return reshape(a, tuple(shape))


def where(cond, a, b):
    """Select from ``a`` where ``cond`` (a plain boolean array) holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
    )


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def grad(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), grad)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(
                f"cannot concatenate shapes {[t.shape for t in tensors]} along axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), grad)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def grad(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(out, tuple(tensors), grad)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    return _make(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims),),
    )


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([shape[i] for i in axes]))
    return _make(
        a.data.mean(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,),
    )


def cumsum(a, axis):
    a = as_tensor(a)

    def grad(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), grad)


def linear_recurrence(a, u, h0, axis):
    """All states of ``h_t = a_t * h_{t-1} + u_t`` along ``axis``, starting from ``h0``.

    ``a`` and ``u`` share a shape; ``h0`` is that shape without ``axis``. Each
    step is the same elementwise expression a one-step update would evaluate,
    and the reverse sweep runs in one pass instead of one slice gradient per step.
    """
    a, u, h0 = as_tensor(a), as_tensor(u), as_tensor(h0)
    if a.shape != u.shape:
        raise DimensionError(f"recurrence coefficients {a.shape} and inputs {u.shape} differ")
    ax = axis % a.ndim
    A = np.moveaxis(a.data, ax, 0)
    U = np.moveaxis(u.data, ax, 0)
    if h0.shape != A.shape[1:]:
        raise DimensionError(f"initial state {h0.shape} does not match {A.shape[1:]}")
    H = np.empty_like(U)
    h = h0.data
    for t in range(A.shape[0]):
        h = A[t] * h + U[t]
        H[t] = h

    def grad(g):
        G = np.moveaxis(g, ax, 0)
        ga = np.empty_like(G)
        gu = np.empty_like(G)
        carry = np.zeros_like(h0.data)
        for t in range(G.shape[0] - 1, -1, -1):
            gh = G[t] + carry
            gu[t] = gh
            ga[t] = gh * (H[t - 1] if t else h0.data)
            carry = gh * A[t]
        return np.moveaxis(ga, 0, ax), np.moveaxis(gu, 0, ax), carry

    return _make(np.moveaxis(H, 0, ax), (a, u, h0), grad)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def _stable_product(a, w):
    """``a @ w`` whose rows do not depend on how many rows are computed together.

    BLAS switches to a matrix-vector kernel for a single row, which sums in a
    different order. Flattening to one 2D product with at least two rows keeps
    a frame's result bit-identical whether it is processed alone or in a clip.
    """
    if w.ndim != 2:
        return a @ w
    rows = a.reshape(-1, a.shape[-1])
    if rows.shape[0] == 1:
        rows = np.concatenate([rows, np.zeros_like(rows)])
        return (rows @ w)[:1].reshape(*a.shape[:-1], w.shape[1])
    return (rows @ w).reshape(*a.shape[:-1], w.shape[1])


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad(g):
        if bd.ndim == 2:
            # shared weight: one 2D product instead of a batch of them summed afterwards
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return g @ bd.T, gb
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(_stable_product(ad, bd), (a, b), grad)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def grad(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), grad)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    dim = x.shape[-1] if x.ndim else 0
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise DimensionError(
            f"layer_norm: last extent {dim} of input {x.shape} does not match "
            f"gamma {gamma.shape} / beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def grad(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g * xhat, g

    return _make(xhat * gd + beta.data, (x, gamma, beta), grad)


# ---------------------------------------------------------------------------
# losses (elementwise unless noted)
# ---------------------------------------------------------------------------

def huber(diff, delta):
    """Elementwise Huber penalty: quadratic inside ``delta``, linear outside."""
    diff = as_tensor(diff)
    d = diff.data
    ad = np.abs(d)
    inside = ad <= delta
    out = np.where(inside, 0.5 * d * d, delta * (ad - 0.5 * delta))
    return _make(out, (diff,), lambda g: (g * np.where(inside, d, delta * np.sign(d)),))


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy computed from logits."""
    logits = as_tensor(logits)
    x = logits.data
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (logits,), lambda g: (g * (expit(x) - y),))


def l1(pred, target):
    return absolute(sub(pred, target))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits[..., C]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    flat = reshape(logp, (-1, logits.shape[-1]))
    picked = getitem(flat, (np.arange(flat.shape[0]), labels.reshape(-1)))
    return mul(mean(picked), -1.0)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def finite_difference(fn, param, index, step=1e-5):
    """Central difference of scalar ``fn()`` with respect to ``param.data[index]``."""
    orig = param.data[index]
    try:
        param.data[index] = orig + step
        up = fn().item()
        param.data[index] = orig - step
        down = fn().item()
    finally:
        param.data[index] = orig
    return (up - down) / (2.0 * step)


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / (abs(numeric) + 1e-8)


def gradient_check(fn, params, rng, samples=30, step=1e-5, accept=None):
    """Compare tape gradients of ``fn()`` against central differences.

    Draws ``samples`` random (parameter, index) pairs among ``params``. ``accept``
    may veto a candidate (e.g. one sitting on a kink); vetoed picks are redrawn.
    Returns a list of ``(name, index, analytic, numeric, rel_err)``.
    """
    with GradTape() as tape:
        loss = fn()
    grads = backward(tape, loss, params)
    sizes = np.array([p.size for p in params], dtype=float)
    results = []
    attempts = 0
    while len(results) < samples:
        attempts += 1
        if attempts > 50 * samples:
            raise RuntimeError("could not draw enough admissible gradient-check points")
        k = rng.choice(len(params), p=sizes / sizes.sum())
        p = params[k]
        index = tuple(int(rng.integers(n)) for n in p.shape)
        if accept is not None and not accept(p, index):
            continue
        num = finite_difference(fn, p, index, step)
        ana = float(grads[p].data[index])
        results.append((p.name, index, ana, num, relative_error(ana, num)))
    return results
