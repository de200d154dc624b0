"""Frozen encoder -> feature fusion -> temporal module -> readout head."""
from __future__ import annotations

import numpy as np

from .. import nn
from .. import readout as R
from .. import tensor as T
from ..encoder import ViTEncoder
from ..errors import ConfigError
from ..fusion import FeatureFusion
from ..temporal import build_temporal, temporal_forward
from ..tensor import Tensor

ENCODER_PREFIX = "encoder."


class VideoModel(nn.Module):
    def __init__(self, cfg):
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg.image_size, cfg.patch_size, cfg.encoder_depth, cfg.dim,
                                  cfg.encoder_heads, cfg.registers, seed=cfg.encoder_seed, frozen=True)
        rng = np.random.default_rng(cfg.seed)
        self.fusion = FeatureFusion(cfg.dim, rng, mode=cfg.feature_mode, norm=cfg.adapter_norm)
        self.temporal = build_temporal(cfg.variant, cfg.dim, rng, layers=cfg.layers, n=cfg.state_dim,
                                       heads=cfg.heads, gate_bias=cfg.gate_bias, chunk=cfg.chunk or None)
        self.head = R.build_head(cfg.task, cfg.dim, rng, classes=cfg.classes, hidden=cfg.readout_hidden,
                                 image_size=cfg.image_size, max_frames=max(cfg.frames, 16))

    # -- parameter groups -------------------------------------------------------

    def configure_regime(self):
        """Mark exactly the parameters the regime trains; the encoder never trains."""
        self.set_trainable(False)
        self.head.set_trainable(True)
        if self.cfg.trains_temporal:
            self.temporal.set_trainable(True)
            if self.cfg.feature_mode == "multi_depth":
                self.fusion.set_trainable(True)
        return [p for p in self.parameters() if p.requires_grad]

    # -- forward paths ------------------------------------------------------------

    def tokens(self, feats):
        """``(B, T, M, D)`` temporal-module inputs from precomputed encoder outputs."""
        return self.fusion([Tensor(t) for t in feats.taps], Tensor(feats.cls), Tensor(feats.registers))

    def _initial_queries(self, labels):
        task = self.cfg.task
        if task == "box_track":
            return {"box0": labels["boxes"][:, 0]}
        if task == "point_track":
            return {"points0": labels["tracks"][:, 0]}
        return {}

    def readout_streaming(self, H, labels):
        """Per-frame readout of ``H`` ``(B, T, M, D)``; each output sees only its own frame."""
        task = self.cfg.task
        if task in ("classify", "depth", "pose"):
            return self.head.step(H)
        inputs = self._initial_queries(labels)
        q = (self.head.init_query(inputs["box0"]) if task == "box_track"
             else self.head.init_query(inputs["points0"]))
        outs = []
        for t in range(H.shape[1]):
            out, q = self.head.step(H[:, t], q)
            outs.append(out)
        return T.stack(outs, axis=1)

    def readout_offline(self, H, labels):
        if self.cfg.task == "pose":
            raise ConfigError("the pose head only supports the streaming readout")
        return self.head.offline(H, **self._initial_queries(labels))

    def forward(self, feats, mode=None):
        mode = mode or self.cfg.readout_mode
        X = self.tokens(feats)
        H, _ = temporal_forward(self.temporal, X)
        if mode == "streaming":
            return self.readout_streaming(H, feats.labels)
        if mode == "offline":
            return self.readout_offline(H, feats.labels)
        raise ConfigError(f"unknown readout mode {mode!r}")

    # -- losses ---------------------------------------------------------------------

    def loss(self, out, labels, mode=None):
        mode = mode or self.cfg.readout_mode
        task = self.cfg.task
        if task == "classify":
            logits = out[:, -1] if mode == "streaming" else out
            return R.classification_loss(logits, labels["class"])
        if task == "box_track":
            return R.tracking_loss(out, labels["boxes"])
        if task == "point_track":
            return R.point_loss(out, labels["tracks"], labels["visible"])
        if task == "depth":
            return R.depth_loss(out, labels["depth"])
        return R.pose_loss(out, labels["pose"], self.head.log_var_trans, self.head.log_var_rot)
