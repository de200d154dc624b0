import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamvid import nn
from streamvid import tensor as T
from streamvid.errors import ConfigError, DimensionError, FormatError
from streamvid.ssm import SSMState
from streamvid.temporal import (
    ALL_VARIANTS, VARIANTS, RecurrentState, build_temporal, state_from_bytes, state_to_bytes,
    stream, strip_gates, temporal_forward,
)
from streamvid.tensor import Tensor

D, M = 8, 5


def build(variant, seed=0, **kw):
    kw.setdefault("layers", 2)
    return build_temporal(variant, D, np.random.default_rng(seed), n=4, heads=2, **kw)


def frames(seed, steps=6, lead=()):
    return np.random.default_rng(seed).normal(size=(*lead, steps, M, D))


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("chunk", [None, 3])
def test_streaming_matches_sequence(variant, chunk):
    mod = build(variant, chunk=chunk)
    X = frames(1, 8, (2,))
    h_seq, s_seq = temporal_forward(mod, X)
    h_str, s_str = stream(mod, X)
    assert np.abs(h_seq.data - h_str.data).max() <= 1e-10
    for a, b in zip(s_seq.tensors, s_str.tensors):
        assert np.abs(a.data - b.data).max() <= 1e-10
    assert s_seq.step == s_str.step == 8


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_split_merge_at_every_point(variant):
    mod = build(variant)
    X = frames(2)
    full, s_full = temporal_forward(mod, X)
    for t in range(1, 6):
        a, s_a = temporal_forward(mod, X[:t])
        b, s_b = temporal_forward(mod, X[t:], s_a)
        assert np.concatenate([a.data, b.data], axis=0).tobytes() == full.data.tobytes()
        assert s_b.step == 6
        for x, y in zip(s_b.tensors, s_full.tensors):
            assert x.data.tobytes() == y.data.tobytes()


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_single_frame_is_one_step(variant):
    mod = build(variant)
    X = frames(3, 1)
    h, _ = temporal_forward(mod, X)
    h1, _ = mod.step(Tensor(X[0]), mod.init_state((M,)))
    np.testing.assert_allclose(h.data[0], h1.data, rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_future_frames_do_not_leak(variant):
    mod = build(variant, chunk=4)
    rng = np.random.default_rng(4)
    X = frames(5, 6)
    base, _ = temporal_forward(mod, X)
    for t in range(5):
        pert = X.copy()
        pert[t + 1:] += rng.normal(size=pert[t + 1:].shape)
        out, _ = temporal_forward(mod, pert)
        assert out.data[: t + 1].tobytes() == base.data[: t + 1].tobytes()


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_interchangeable_shapes(variant):
    mod = build(variant)
    X = frames(6, 4, (3,))
    h, s = temporal_forward(mod, X)
    assert h.shape == X.shape
    _, s2 = temporal_forward(mod, X[:, :2], s)
    assert [t.shape for t in s.tensors] == [t.shape for t in s2.tensors]


def test_zero_initial_state():
    for variant in VARIANTS:
        s = build(variant).init_state((M,))
        assert all(not t.data.any() for t in s.tensors)


def test_unknown_variant_and_bad_width():
    with pytest.raises(ConfigError):
        build("lstm")
    with pytest.raises(DimensionError):
        temporal_forward(build("mamba"), np.zeros((2, M, D + 1)))


# --- RVM recurrent core -------------------------------------------------------

def test_rvm_update_gate_closed_keeps_state():
    mod = build("rvm_rnn")
    mod.update_frame.bias.data[...] = -1e6  # expit underflows to exactly 0
    s0 = np.random.default_rng(7).normal(size=(M, D))
    state = RecurrentState("rvm_rnn", [Tensor(s0)])
    for x in frames(8):
        _, state = mod.step(Tensor(x), state)
        assert state.tensors[0].data.tobytes() == s0.tobytes()


def test_rvm_update_gate_open_takes_candidate():
    mod = build("rvm_rnn")
    mod.update_frame.bias.data[...] = 1e6
    rng = np.random.default_rng(9)
    x, s = Tensor(rng.normal(size=(M, D))), Tensor(rng.normal(size=(M, D)))
    _, r = mod.gates(x, s)
    candidate = mod.transformer(x, r * mod.state_norm(s))
    _, new = mod.step(x, RecurrentState("rvm_rnn", [s]))
    assert new.tensors[0].data.tobytes() == candidate.data.tobytes()


def test_rvm_first_step_sees_zero_context():
    mod = build("rvm_rnn")
    x = Tensor(frames(10, 1)[0])
    h, state = mod.step(x, mod.init_state((M,)))
    cand = mod.transformer(x, Tensor(np.zeros((M, D))))
    u, _ = mod.gates(x, Tensor(np.zeros((M, D))))
    np.testing.assert_allclose(state.tensors[0].data, u.data * cand.data, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(h.data, mod.out_norm(state.tensors[0]).data)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_rvm_state_is_convex_combination(seed):
    mod = build("rvm_rnn", seed=seed % 7)
    rng = np.random.default_rng(seed)
    x, s = Tensor(rng.normal(size=(M, D))), Tensor(rng.normal(size=(M, D)))
    _, r = mod.gates(x, s)
    cand = mod.transformer(x, r * mod.state_norm(s)).data
    _, new = mod.step(x, RecurrentState("rvm_rnn", [s]))
    lo, hi = np.minimum(s.data, cand), np.maximum(s.data, cand)
    tol = 1e-12 * (1 + np.abs(cand))
    assert np.all(new.tensors[0].data >= lo - tol) and np.all(new.tensors[0].data <= hi + tol)


# --- Mamba --------------------------------------------------------------------

def test_mamba_zero_branch_is_identity():
    mod = build("mamba")
    for layer in mod.layers:
        layer.branch.out.zero_()
    x = Tensor(frames(11, 1)[0])
    y, _ = mod.layers[0].step(x, mod.init_state((M,)).tensors[0])
    assert y.data.tobytes() == x.data.tobytes()


def test_mamba_tokens_are_independent():
    mod = build("mamba")
    X = frames(12, 5)
    X[:, 3] = X[:, 1]
    h, _ = temporal_forward(mod, X)
    np.testing.assert_array_equal(h.data[:, 3], h.data[:, 1])


def test_mamba_commutes_with_token_permutation():
    mod = build("mamba")
    X = frames(13, 5)
    perm = np.random.default_rng(0).permutation(M)
    h, _ = temporal_forward(mod, X)
    hp, _ = temporal_forward(mod, X[:, perm])
    np.testing.assert_allclose(hp.data, h.data[:, perm], rtol=0, atol=1e-13)


# --- MambaMix -----------------------------------------------------------------

def test_mambamix_without_ssm_is_spatial_stack():
    mod = build("mambamix")
    for layer in mod.layers:
        layer.branch.out.zero_()
    X = frames(14, 3)
    h, _ = temporal_forward(mod, X)
    ref = Tensor(X)
    for layer in mod.layers:
        ref = layer.spatial(ref)
    np.testing.assert_allclose(h.data, mod.final_norm(ref).data, rtol=0, atol=1e-13)


def test_mambamix_single_frame_composition():
    mod = build("mambamix", layers=1)
    x = frames(15, 1)[0]
    h, _ = temporal_forward(mod, x[None])
    layer = mod.layers[0]
    z = layer.spatial(Tensor(x))
    ssm = layer.branch.ssm
    y, _ = ssm.step(layer.branch.norm(z), SSMState(Tensor(np.zeros((M, D, 4)))))
    ref = mod.final_norm(z + layer.branch.out(y)).data
    np.testing.assert_allclose(h.data[0], ref, rtol=0, atol=1e-13)


def test_mambamix_mixes_tokens_where_mamba_does_not():
    X = frames(16, 3)
    pert = X.copy()
    pert[:, 0] += np.random.default_rng(0).normal(size=pert[:, 0].shape)
    for variant, mixes in (("mamba", False), ("mambamix", True)):
        mod = build(variant)
        h, _ = temporal_forward(mod, X)
        hp, _ = temporal_forward(mod, pert)
        moved = np.abs(hp.data[:, 1:] - h.data[:, 1:]).max()
        assert (moved > 1e-6) if mixes else (moved == 0.0)


def test_mambamix_is_equivariant_without_position_embeddings():
    mod = build("mambamix")
    X = frames(16, 3)
    perm = np.array([1, 0, 2, 4, 3])
    h, _ = temporal_forward(mod, X)
    hp, _ = temporal_forward(mod, X[:, perm])
    np.testing.assert_allclose(hp.data, h.data[:, perm], atol=1e-12)


# --- GMMix --------------------------------------------------------------------

def test_gmmix_gate_limits():
    X = frames(17, 4)
    closed = build("gmmix", gate_bias=-40.0)
    h_closed, _ = temporal_forward(closed, X)
    ref = Tensor(X)
    for layer in closed.layers:
        ref = layer.spatial(ref)
    np.testing.assert_allclose(h_closed.data, closed.final_norm(ref).data, atol=1e-12)

    opened = build("gmmix", gate_bias=40.0)
    h_open, _ = temporal_forward(opened, X)
    h_mix, _ = temporal_forward(strip_gates(opened), X)
    np.testing.assert_allclose(h_open.data, h_mix.data, atol=1e-12)


def test_gmmix_output_between_branches():
    mod = build("gmmix")
    layer = mod.layers[0]
    for g in (layer.gate,):
        g.weight.data[...] = np.random.default_rng(0).normal(size=g.weight.shape)
    x = Tensor(frames(18, 1)[0])
    z = layer.spatial(x)
    y, _ = layer.branch.step(z, np.zeros((M, D, 4)))
    zt = z + y
    out, _ = layer.step(x, Tensor(np.zeros((M, D, 4))))
    lo, hi = np.minimum(z.data, zt.data), np.maximum(z.data, zt.data)
    assert np.all(out.data >= lo - 1e-12) and np.all(out.data <= hi + 1e-12)


def test_strip_gates_requires_gmmix():
    with pytest.raises(ConfigError):
        strip_gates(build("mamba"))


def test_gmmix_gradient_wrt_first_frame():
    mod = build("gmmix", chunk=2)
    for layer in mod.layers:
        layer.gate.weight.data[...] = np.random.default_rng(1).normal(0, 0.5, layer.gate.weight.shape)
    rng = np.random.default_rng(19)
    X = frames(20, 4)
    x1 = Tensor(X[0], requires_grad=True, name="x1")
    w = rng.normal(size=X.shape)

    def loss():
        xs = T.concat([T.unsqueeze(x1, 0), Tensor(X[1:])], axis=0)
        return (temporal_forward(mod, xs)[0] * w).sum()

    results = T.gradient_check(loss, [x1], rng, samples=30)
    assert max(r[-1] for r in results) < 1e-4


# --- state snapshots ----------------------------------------------------------

@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_state_snapshot_round_trip(variant):
    mod = build(variant)
    _, state = temporal_forward(mod, frames(21, 3))
    back = state_from_bytes(state_to_bytes(state))
    assert back.variant == variant and back.step == 3
    assert [t.data.tobytes() for t in back.tensors] == [t.data.tobytes() for t in state.tensors]
    h1, _ = mod.step(Tensor(frames(22, 1)[0]), state)
    h2, _ = mod.step(Tensor(frames(22, 1)[0]), back)
    assert h1.data.tobytes() == h2.data.tobytes()


def test_state_snapshot_errors():
    _, state = temporal_forward(build("mamba"), frames(23, 2))
    buf = state_to_bytes(state)
    with pytest.raises(FormatError):
        state_from_bytes(buf[:-1])
    with pytest.raises(FormatError):
        state_from_bytes(buf + b"\0")
    with pytest.raises(FormatError) as err:
        state_from_bytes(b"ABCD" + buf[4:])
    assert err.value.offset == 0
