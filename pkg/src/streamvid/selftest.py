"""Quick invariant checks runnable without pytest (``streamvid selftest``)."""
from __future__ import annotations

import time

import numpy as np

from .ssm import SelectiveSSM
from .temporal import RecurrentState, VARIANTS, build_temporal, stream, strip_gates, temporal_forward
from .tensor import Tensor

DIM, TOKENS, FRAMES = 64, 21, 8


def _frames(seed, steps=FRAMES):
    return np.random.default_rng(seed).normal(size=(steps, TOKENS, DIM))


def _module(variant, seed=0, **kw):
    return build_temporal(variant, DIM, np.random.default_rng(seed), **kw)


def check_streaming_equivalence():
    worst = 0.0
    for variant in VARIANTS:
        mod = _module(variant)
        X = _frames(1)
        h_seq, _ = temporal_forward(mod, X)
        h_str, _ = stream(mod, X)
        worst = max(worst, float(np.abs(h_seq.data - h_str.data).max()))
    return worst <= 1e-10, f"max |stream - sequence| = {worst:.2e}"


def check_causality(seeds=5):
    for variant in VARIANTS:
        mod = _module(variant)
        for seed in range(seeds):
            X = _frames(100 + seed)
            t = seed % (FRAMES - 1)
            Y = X.copy()
            Y[t + 1:] += np.random.default_rng(seed).normal(size=Y[t + 1:].shape)
            a, _ = temporal_forward(mod, X)
            b, _ = temporal_forward(mod, Y)
            if a.data[: t + 1].tobytes() != b.data[: t + 1].tobytes():
                return False, f"{variant}: frames after {t} changed earlier outputs"
    return True, f"{len(VARIANTS)} variants x {seeds} perturbations"


def check_scan_equivalence():
    rng = np.random.default_rng(3)
    ssm = SelectiveSSM(16, 8, rng)
    worst = 0.0
    for steps in (1, 10, 32):
        xs = rng.normal(size=(steps, 16))
        ref, _ = ssm.scan_sequential(xs)
        for chunk in (1, 3, steps):
            out, _ = ssm.scan_chunked(xs, chunk)
            worst = max(worst, float(np.abs(out.data - ref.data).max()))
    return worst <= 1e-10, f"max |chunked - sequential| = {worst:.2e}"


def check_gate_limits():
    X = _frames(17)
    closed = _module("gmmix", gate_bias=-20.0)
    h, _ = temporal_forward(closed, X)
    ref = Tensor(X)
    for layer in closed.layers:
        ref = layer.spatial(ref)
    low = float(np.abs(h.data - closed.final_norm(ref).data).max())
    opened = _module("gmmix", gate_bias=20.0)
    h, _ = temporal_forward(opened, X)
    mix, _ = temporal_forward(strip_gates(opened), X)
    high = float(np.abs(h.data - mix.data).max())

    rvm = _module("rvm_rnn")
    rvm.update_frame.bias.data[...] = -1e6
    s0 = np.random.default_rng(5).normal(size=(TOKENS, DIM))
    state = RecurrentState("rvm_rnn", [Tensor(s0)])
    frozen = True
    for x in X:
        _, state = rvm.step(Tensor(x), state)
        frozen &= state.tensors[0].data.tobytes() == s0.tobytes()
    ok = low <= 1e-8 and high <= 1e-8 and frozen
    return ok, f"bias -20: {low:.1e}, bias +20: {high:.1e}, closed RVM gate keeps state: {frozen}"


def check_checkpoint_round_trip():
    from .harness.checkpoint import from_bytes, to_bytes
    from .harness.config import RunConfig
    from .harness.data import make_synthetic_task, precompute_features
    from .harness.model import VideoModel
    from .harness.train import train

    cfg = RunConfig(task="classify", variant="gmmix", steps=2, warmup=1, train_clips=4, eval_clips=4)
    model = VideoModel(cfg)
    feats = precompute_features(model.encoder, make_synthetic_task("classify", 9, 4), "classify")
    ckpt, _ = train(cfg, features=feats)
    loaded = from_bytes(to_bytes(ckpt))
    a = ckpt.build_model().eval()(feats).data
    b = loaded.build_model().eval()(feats).data
    same = all(ckpt.params[k].tobytes() == loaded.params[k].tobytes() for k in ckpt.params)
    return same and a.tobytes() == b.tobytes(), "params and forward outputs bit-identical after reload"


def check_frozen_encoder():
    from .harness.config import RunConfig
    from .harness.data import make_synthetic_task, precompute_features
    from .harness.model import VideoModel
    from .harness.train import train

    cfg = RunConfig(task="classify", variant="mambamix", regime="finetune", steps=3, warmup=1, train_clips=4)
    before = VideoModel(cfg).encoder.state_dict()
    feats = precompute_features(VideoModel(cfg).encoder, make_synthetic_task("classify", 2, 4), "classify")
    ckpt, _ = train(cfg, features=feats)
    after = {k[len("encoder."):]: v for k, v in ckpt.params.items() if k.startswith("encoder.")}
    same = set(before) == set(after) and all(before[k].tobytes() == after[k].tobytes() for k in before)
    return same, f"{len(before)} encoder arrays compared byte for byte"


CHECKS = {
    "streaming equals sequence": check_streaming_equivalence,
    "causality": check_causality,
    "chunked scan equals sequential": check_scan_equivalence,
    "gate limits": check_gate_limits,
    "checkpoint round trip": check_checkpoint_round_trip,
    "frozen encoder": check_frozen_encoder,
}


def run_selftest(names=None):
    """Run the named checks (all by default); returns ``[(name, passed, detail, seconds)]``."""
    results = []
    for name in names or CHECKS:
        start = time.perf_counter()
        try:
            ok, detail = CHECKS[name]()
        except Exception as exc:  # a crash is a failure, reported like one
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail, time.perf_counter() - start))
    return results
