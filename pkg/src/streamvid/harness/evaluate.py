"""Streaming and offline evaluation of a trained checkpoint."""
from __future__ import annotations

import numpy as np

from .. import metrics as Mx
from ..errors import ConfigError
from ..temporal import temporal_forward
from .train import dataset_features

MODES = ("streaming", "offline")
METRIC_DIRECTIONS = {
    "top1": Mx.HIGHER, "miou": Mx.HIGHER, "aj": Mx.HIGHER,
    "absrel": Mx.LOWER, "rpe_tr_mm": Mx.LOWER, "rpe_rot_deg": Mx.LOWER,
}
METRES_TO_MM = 1000.0


def _query_init(model, labels):
    head, task = model.head, model.cfg.task
    if task == "box_track":
        return head.init_query(labels["boxes"][:, 0])
    if task == "point_track":
        return head.init_query(labels["tracks"][:, 0])
    return None


def stream_outputs(model, feats):
    """Feed frames one at a time with carried state; the readout sees one frame."""
    X = model.tokens(feats)
    B, steps, M, _ = X.shape
    state = model.temporal.init_state((B, M))
    query = _query_init(model, feats.labels)
    outs = []
    for t in range(steps):
        h, state = model.temporal.step(X[:, t], state)
        if query is None:
            out = model.head.step(h)
        else:
            out, query = model.head.step(h, query)
        outs.append(out.data)
    return np.stack(outs, axis=1)


def prefix_recompute_outputs(model, feats):
    """Reference for :func:`stream_outputs`: rerun everything from scratch for each prefix."""
    X = model.tokens(feats)
    steps = X.shape[1]
    outs = []
    for t in range(steps):
        H, _ = temporal_forward(model.temporal, X[:, : t + 1])
        query = _query_init(model, feats.labels)
        for k in range(t + 1):
            if query is None:
                out = model.head.step(H[:, k])
            else:
                out, query = model.head.step(H[:, k], query)
        outs.append(out.data)
    return np.stack(outs, axis=1)


def offline_outputs(model, feats):
    return model(feats, mode="offline").data


def task_metrics(cfg, outputs, labels):
    """Metric dict for one task from ``(B, T, ...)`` outputs (classification may be ``(B, C)``)."""
    task = cfg.task
    if task == "classify":
        logits = outputs[:, -1] if outputs.ndim == 3 else outputs
        return {"top1": Mx.top1(logits, labels["class"])}
    if task == "box_track":
        return {"miou": Mx.miou(outputs, labels["boxes"])}
    if task == "point_track":
        return {"aj": Mx.average_jaccard(outputs[..., :2], outputs[..., 2] > 0.0,
                                         labels["tracks"], labels["visible"], cfg.image_size)}
    if task == "depth":
        return {"absrel": Mx.absrel(np.exp(outputs), labels["depth"])}
    tr, rot = Mx.rpe(outputs[:, 1:], labels["pose"][:, 1:], to_mm=METRES_TO_MM)
    return {"rpe_tr_mm": tr, "rpe_rot_deg": rot}


def run_outputs(model, feats, mode, batch=32):
    if mode not in MODES:
        raise ConfigError(f"unknown evaluation mode {mode!r}; expected one of {MODES}")
    if mode == "offline" and model.cfg.task == "pose":
        raise ConfigError("the pose head has no offline readout")
    model.eval()
    fn = stream_outputs if mode == "streaming" else offline_outputs
    parts = [fn(model, feats.subset(np.arange(s, min(s + batch, len(feats)))))
             for s in range(0, len(feats), batch)]
    return np.concatenate(parts)


def evaluate(ckpt, mode="streaming", features=None, model=None):
    """Metrics of ``ckpt`` on its eval split (or ``features``) under ``mode``."""
    model = model or ckpt.build_model()
    if features is None:
        features = dataset_features(ckpt.config, model.encoder, "eval")
    outputs = run_outputs(model, features, mode)
    return task_metrics(ckpt.config, outputs, features.labels)
