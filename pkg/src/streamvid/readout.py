"""Attentive readout heads and their training losses.

Streaming heads see one frame's tokens ``(..., M, D)`` at a time; box and
point heads additionally carry their query tokens from frame to frame.
Offline heads see the whole clip ``(..., T, M, D)`` flattened to ``T*M``
context tokens, with learned temporal embeddings added per frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

TASKS = ("classify", "box_track", "point_track", "depth", "pose")
# (dim, heads) of the full-size heads, and the head counts used at desk
# scale (classification drops from 12 to 4 so heads divide small widths).
FULL_SIZE_READOUT = {
    "classify": (768, 12),
    "box_track": (1024, 4),
    "point_track": (1024, 8),
    "depth": (1024, 16),
    "pose": (1024, None),
}
DESK_HEADS = {"classify": 4, "box_track": 4, "point_track": 8, "depth": 16, "pose": None}


def fourier_encode(x, n_freq=16):
    """``[sin(2^k pi x)]_k`` followed by ``[cos(2^k pi x)]_k`` per scalar.

    For input of shape ``(..., c)`` the result is ``(..., c * 2 * n_freq)``
    with each coordinate's sine block then cosine block kept together.
    """
    if n_freq < 1:
        raise ConfigError("n_freq must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    angles = x[..., None] * (np.pi * 2.0 ** np.arange(n_freq))
    enc = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return enc.reshape(*x.shape[:-1], -1) if x.ndim else enc


@dataclass
class PoseDelta:
    """Frame-to-frame camera motion: translation and a 6D rotation code."""

    translation: np.ndarray
    rotation6d: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation6d = np.asarray(self.rotation6d, dtype=np.float64).reshape(6)

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:9])

    def to_vector(self):
        return np.concatenate([self.translation, self.rotation6d])

    @property
    def matrix(self):
        return rot6d_to_matrix(self.rotation6d)


def rot6d_to_matrix(r6):
    """Gram-Schmidt the two 3-vectors of ``r6`` into rotation matrix columns."""
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., :3], r6[..., 3:6]
    b1 = a1 / np.linalg.norm(a1, axis=-1, keepdims=True)
    a2 = a2 - (b1 * a2).sum(-1, keepdims=True) * b1
    b2 = a2 / np.linalg.norm(a2, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R):
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


@dataclass
class ReadoutQuery:
    """Query tokens of one head for one sequence; ``persistent`` ones carry over frames."""

    task: str
    tokens: Tensor
    persistent: bool = True


def _broadcast_query(query, lead):
    return T.Tensor(np.zeros((*lead, *query.shape))) + query


class QueryBlock(nn.Module):
    """Queries cross-attend over context tokens, then pass through a residual MLP."""

    def __init__(self, dim, heads, rng, hidden=None):
        hidden = 4 * dim if hidden is None else hidden
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiHeadAttention(dim, heads, rng)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.MLP(dim, hidden, dim, rng)

    def forward(self, q, context):
        q = q + self.attn(self.norm_q(q), self.norm_kv(context))
        return q + self.mlp(self.norm_mlp(q))


class _TemporalContext(nn.Module):
    def _offline_context(self, H):
        steps = H.shape[-3]
        if steps > self.temporal_embed.shape[0]:
            raise DimensionError(f"clip of {steps} frames exceeds {self.temporal_embed.shape[0]} temporal embeddings")
        ctx = H + T.unsqueeze(self.temporal_embed[:steps], -2)
        *lead, t, m, d = ctx.shape
        return T.reshape(ctx, (*lead, t * m, d))


class ClassifyHead(_TemporalContext):
    task = "classify"

    def __init__(self, dim, classes, heads, rng, max_frames=16):
        self.query = nn.parameter(rng.normal(0.0, 0.02, (1, dim)))
        self.block = QueryBlock(dim, heads, rng)
        self.proj = nn.Linear(dim, classes, rng)
        self.temporal_embed = nn.parameter(np.zeros((max_frames, dim)))

    def _logits(self, context):
        q = self.block(_broadcast_query(self.query, context.shape[:-2]), context)
        return self.proj(q)[..., 0, :]

    def step(self, h_t):
        return self._logits(h_t)

    def offline(self, H):
        return self._logits(self._offline_context(H))


class BoxHead(_TemporalContext):
    task = "box_track"

    def __init__(self, dim, heads, hidden, rng, max_frames=16, n_freq=16):
        self.n_freq = n_freq
        self.init_mlp = nn.MLP(4 * 2 * n_freq, hidden, dim, rng)
        self.block = QueryBlock(dim, heads, rng)
        self.out_mlp = nn.MLP(dim, hidden, 4, rng)
        self.temporal_embed = nn.parameter(np.zeros((max_frames, dim)))

    def init_query(self, box0):
        enc = Tensor(fourier_encode(np.asarray(box0)[..., None, :], self.n_freq))
        return ReadoutQuery(self.task, self.init_mlp(enc), True)

    def decode(self, q_tokens):
        return T.sigmoid(self.out_mlp(q_tokens))[..., 0, :]

    def step(self, h_t, query):
        q = self.block(query.tokens, h_t)
        return self.decode(q), ReadoutQuery(self.task, q, True)

    def offline(self, H, box0):
        q0 = self.init_query(box0).tokens  # (..., 1, D)
        steps = H.shape[-3]
        queries = q0 + self.temporal_embed[:steps]
        q = self.block(queries, self._offline_context(H))
        return T.sigmoid(self.out_mlp(q))


class PointHead(_TemporalContext):
    task = "point_track"

    def __init__(self, dim, heads, hidden, rng, max_frames=16, n_freq=16):
        self.n_freq = n_freq
        self.enc1 = nn.Linear(2 * 2 * n_freq, hidden, rng)
        self.enc2 = nn.Linear(hidden, hidden, rng)
        self.enc_proj = nn.Linear(hidden, dim, rng)
        self.block = QueryBlock(dim, heads, rng)
        self.out = nn.Linear(dim, 4, rng)
        self.temporal_embed = nn.parameter(np.zeros((max_frames, dim)))

    def init_query(self, points0):
        enc = Tensor(fourier_encode(np.asarray(points0), self.n_freq))
        tokens = self.enc_proj(T.gelu(self.enc2(T.gelu(self.enc1(enc)))))
        return ReadoutQuery(self.task, tokens, True)

    def decode(self, q_tokens):
        raw = self.out(q_tokens)
        xy = T.sigmoid(raw[..., :2])
        return T.concat([xy, raw[..., 2:]], axis=-1)

    def step(self, h_t, query):
        """Returns ``(..., P, 4)`` = x, y, visibility logit, uncertainty logit."""
        q = self.block(query.tokens, h_t)
        return self.decode(q), ReadoutQuery(self.task, q, True)

    def offline(self, H, points0):
        q0 = self.init_query(points0).tokens  # (..., P, D)
        *lead, p, d = q0.shape
        steps = H.shape[-3]
        queries = T.unsqueeze(q0, -3) + T.unsqueeze(self.temporal_embed[:steps], -2)
        flat = T.reshape(queries, (*lead, steps * p, d))
        out = self.decode(self.block(flat, self._offline_context(H)))
        return T.reshape(out, (*lead, steps, p, 4))


class DepthHead(_TemporalContext):
    task = "depth"

    def __init__(self, dim, heads, rng, image_size, patch=8, max_frames=16):
        if image_size % patch:
            raise ConfigError(f"depth map size {image_size} is not divisible by {patch}")
        self.grid = image_size // patch
        self.patch = patch
        self.queries = nn.parameter(rng.normal(0.0, 0.02, (self.grid * self.grid, dim)))
        self.block = QueryBlock(dim, heads, rng)
        self.proj = nn.Linear(dim, patch * patch, rng)
        self.temporal_embed = nn.parameter(np.zeros((max_frames, dim)))

    def rearrange(self, values):
        """``(..., Q, p*p)`` per-query values -> ``(..., H, W)`` map, row-major queries."""
        *lead, q, _ = values.shape
        g, p = self.grid, self.patch
        x = T.reshape(values, (*lead, g, g, p, p))
        x = T.swapaxes(x, -3, -2)
        return T.reshape(x, (*lead, g * p, g * p))

    def step(self, h_t):
        """Log-depth map for one frame."""
        q = self.block(_broadcast_query(self.queries, h_t.shape[:-2]), h_t)
        return self.rearrange(self.proj(q))

    def offline(self, H):
        steps = H.shape[-3]
        *lead, _, _, d = H.shape
        queries = T.unsqueeze(self.queries, -3) + T.unsqueeze(self.temporal_embed[:steps], -2)
        queries = _broadcast_query(T.reshape(queries, (steps * self.queries.shape[0], d)), tuple(lead))
        out = self.proj(self.block(queries, self._offline_context(H)))
        out = T.reshape(out, (*lead, steps, self.queries.shape[0], self.patch * self.patch))
        return self.rearrange(out)


class PoseHead(nn.Module):
    task = "pose"

    def __init__(self, dim, hidden, rng):
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden, rng)
        self.fc2 = nn.Linear(hidden, 9, rng)
        self.log_var_trans = nn.parameter(np.zeros(()))
        self.log_var_rot = nn.parameter(np.zeros(()))

    def step(self, h_t):
        pooled = T.mean(h_t, axis=-2)
        return self.fc2(T.gelu(self.fc1(self.norm(pooled))))

    def offline(self, H):
        raise ConfigError("the pose head has no offline mode")


def build_head(task, dim, rng, *, classes=4, heads=None, hidden=None, image_size=32, max_frames=16):
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    hidden = 2 * dim if hidden is None else hidden
    if heads is None:
        heads = default_heads(task, dim)
    if task == "classify":
        return ClassifyHead(dim, classes, heads, rng, max_frames)
    if task == "box_track":
        return BoxHead(dim, heads, hidden, rng, max_frames)
    if task == "point_track":
        return PointHead(dim, heads, hidden, rng, max_frames)
    if task == "depth":
        return DepthHead(dim, heads, rng, image_size, max_frames=max_frames)
    return PoseHead(dim, hidden, rng)


def default_heads(task, dim):
    full_dim, full_heads = FULL_SIZE_READOUT[task]
    heads = (full_heads if dim == full_dim else DESK_HEADS[task]) or 1
    while dim % heads:
        heads //= 2
    return max(heads, 1)


def classify_readout(head, h_t):
    return head.step(h_t)


def box_readout_step(head, h_t, query):
    return head.step(h_t, query)


def point_readout_step(head, h_t, query):
    return head.step(h_t, query)


def depth_readout(head, h_t):
    return head.step(h_t)


def pose_readout(head, h_t):
    return head.step(h_t)


def offline_readout(head, H, **inputs):
    return head.offline(H, **inputs)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_TINY = 1e-12


def box_corners(box):
    cx, cy, w, h = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def giou(pred, gt):
    """Generalised IoU of ``[cx, cy, w, h]`` boxes (Tensor inputs)."""
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    px0, py0, px1, py1 = box_corners(pred)
    gx0, gy0, gx1, gy1 = box_corners(gt)
    iw = T.maximum(T.minimum(px1, gx1) - T.maximum(px0, gx0), 0.0)
    ih = T.maximum(T.minimum(py1, gy1) - T.maximum(py0, gy0), 0.0)
    inter = iw * ih
    union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter
    hull = (T.maximum(px1, gx1) - T.minimum(px0, gx0)) * (T.maximum(py1, gy1) - T.minimum(py0, gy0))
    iou = inter / T.maximum(union, _TINY)
    return iou - (hull - union) / T.maximum(hull, _TINY)


def tracking_loss(pred_box, gt_box, giou_weight=2.0, l1_weight=5.0):
    """``2 (1 - GIoU) + 5 * sum|pred - gt|``, averaged over boxes."""
    pred_box, gt_box = T.as_tensor(pred_box), T.as_tensor(gt_box)
    per_box = giou_weight * (1.0 - giou(pred_box, gt_box)) + l1_weight * T.tsum(T.l1(pred_box, gt_box), axis=-1)
    return T.mean(per_box)


def point_loss(pred, gt_xy, gt_visible, gt_uncertain=None, delta=0.05, uncertain_radius=0.05,
               pos_weight=100.0, vis_weight=0.1, unc_weight=0.1):
    """Huber on visible positions + BCE on visibility + BCE on uncertainty.

    ``pred``: ``(..., P, 4)`` from :class:`PointHead`. When ``gt_uncertain`` is
    omitted, a point counts as uncertain if its predicted position is farther
    than ``uncertain_radius`` from the target.
    """
    pred = T.as_tensor(pred)
    gt_xy = np.asarray(gt_xy, dtype=np.float64)
    visible = np.asarray(gt_visible, dtype=bool)
    if gt_uncertain is None:
        err = np.linalg.norm(pred.data[..., :2] - gt_xy, axis=-1)
        gt_uncertain = err > uncertain_radius
    coord_mask = np.repeat(visible[..., None], 2, axis=-1).astype(np.float64)
    n_vis = coord_mask.sum()
    pos = T.huber(pred[..., :2] - gt_xy, delta) * coord_mask
    pos_term = T.tsum(pos) / n_vis if n_vis else T.tsum(pos) * 0.0
    vis_term = T.mean(T.bce_with_logits(pred[..., 2], visible.astype(np.float64)))
    unc_term = T.mean(T.bce_with_logits(pred[..., 3], np.asarray(gt_uncertain, dtype=np.float64)))
    return pos_weight * pos_term + vis_weight * vis_term + unc_weight * unc_term


def pose_loss(pred, gt, log_var_trans, log_var_rot):
    """L1 translation / rotation losses balanced by learnable log-variances."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    l_trans = T.mean(T.l1(pred[..., :3], gt[..., :3]))
    l_rot = T.mean(T.l1(pred[..., 3:9], gt[..., 3:9]))
    return (l_trans * T.exp(-log_var_trans) + log_var_trans
            + l_rot * T.exp(-log_var_rot) + log_var_rot)


def depth_loss(pred_log_depth, gt_depth, valid=None):
    """Mean squared error in log space over valid pixels."""
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    valid = gt_depth > 0 if valid is None else np.asarray(valid, dtype=bool)
    target = np.log(np.where(valid, gt_depth, 1.0))
    diff = (pred_log_depth - target) * valid.astype(np.float64)
    return T.tsum(diff * diff) / max(int(valid.sum()), 1)


def classification_loss(logits, labels):
    return T.cross_entropy(logits, labels)
