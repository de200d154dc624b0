"""Training loop: one regime, one task, deterministic given the config."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingDiverged
from ..tensor import GradTape, backward
from .config import RunConfig
from .data import make_synthetic_task, precompute_features
from .model import VideoModel
from .optim import AdamW, clip_by_global_norm, lr_schedule

EVAL_SEED_OFFSET = 1_000_003
_FEATURE_CACHE = {}


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a run."""

    config: RunConfig
    params: dict
    optimizer: dict = field(default_factory=dict)
    optimizer_step: int = 0
    step: int = 0

    def build_model(self):
        model = VideoModel(self.config)
        model.load_state_dict(self.params)
        model.configure_regime()
        return model


def dataset_features(cfg, encoder, split="train"):
    """Encoder features for the train or eval split, cached per data-defining settings."""
    count = cfg.train_clips if split == "train" else cfg.eval_clips
    seed = cfg.data_seed + (0 if split == "train" else EVAL_SEED_OFFSET)
    key = (cfg.task, seed, count, cfg.frames, cfg.image_size, cfg.points, cfg.patch_size,
           cfg.encoder_depth, cfg.dim, cfg.encoder_heads, cfg.registers, cfg.encoder_seed)
    if key not in _FEATURE_CACHE:
        clips = make_synthetic_task(cfg.task, seed, count, cfg.frames, cfg.image_size, cfg.points)
        _FEATURE_CACHE[key] = precompute_features(encoder, clips, cfg.task)
    return _FEATURE_CACHE[key]


def _batch_order(rng, n, batch, steps):
    order = []
    while len(order) < batch * steps:
        order.extend(rng.permutation(n).tolist())
    return np.array(order[: batch * steps]).reshape(steps, batch) if steps else np.zeros((0, batch), int)


def train(cfg, features=None, log_path=None, on_step=None):
    """Train per ``cfg``; returns ``(checkpoint, history)``.

    ``history`` holds one record per step with the loss measured before that
    step's update, the learning rate applied and the pre-clip gradient norm.
    """
    model = VideoModel(cfg)
    params = model.configure_regime()
    names = {id(p): n for n, p in model.named_parameters()}
    if features is None:
        features = dataset_features(cfg, model.encoder, "train")
    opt = AdamW(params, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    order = _batch_order(np.random.default_rng(cfg.seed + 1), len(features), min(cfg.batch_size, len(features)),
                         cfg.steps)
    history = []
    log = open(log_path, "w") if log_path else None
    model.train()
    try:
        for step in range(1, cfg.steps + 1):
            batch = features.subset(order[step - 1])
            with GradTape() as tape:
                loss = model.loss(model(batch), batch.labels)
            grads = backward(tape, loss, params)
            tape.nodes.clear()  # drop the graph now rather than at the next cyclic GC
            arrays = [grads[p].data for p in params]
            lr = lr_schedule(step, cfg.lr, cfg.warmup, cfg.steps)
            value = float(loss.item())
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in arrays):
                norms = {names[id(p)]: float(np.linalg.norm(g)) for p, g in zip(params, arrays)}
                raise TrainingDiverged(step, lr, norms)
            arrays, norm = clip_by_global_norm(arrays, cfg.clip_norm)
            opt.step(arrays, lr)
            record = {"step": step, "loss": value, "lr": lr, "grad_norm": norm}
            history.append(record)
            if log:
                log.write(json.dumps(record) + "\n")
            if on_step:
                on_step(record)
    finally:
        if log:
            log.close()
    ckpt = Checkpoint(cfg, model.state_dict(), opt.state_arrays(), opt.t, cfg.steps)
    return ckpt, history
