import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamvid import tensor as T
from streamvid.errors import ContractError
from streamvid.ssm import SSMState, SelectiveSSM, discretize, selective_scan_chunked, selective_scan_sequential
from streamvid.tensor import Tensor


def taylor_discretize(delta, A, B, terms=40):
    """Series oracle: exp(z) and (exp(z)-1)/A summed term by term."""
    z = delta[:, None] * A
    a_bar = np.zeros_like(z)
    b_coef = np.zeros_like(z)
    term = np.ones_like(z)
    for k in range(terms):
        a_bar += term
        # (exp(z) - 1)/A = delta * sum_k z^k / (k+1)!
        b_coef += delta[:, None] * term / (k + 1)
        term = term * z / (k + 1)
    return a_bar, b_coef * B[None, :]


def test_discretize_small_delta_limit():
    A = -np.array([[1.0, 3.0]])
    a_bar, b_bar = discretize(Tensor([1e-12]), Tensor(A), Tensor([2.0, -1.0]))
    np.testing.assert_allclose(a_bar.data, 1.0, atol=1e-11)
    np.testing.assert_allclose(b_bar.data, [[2e-12, -1e-12]], rtol=1e-9)


def test_discretize_exact_half():
    a_bar, _ = discretize(Tensor([math.log(2.0)]), Tensor([[-1.0]]), Tensor([1.0]))
    np.testing.assert_allclose(a_bar.data, [[0.5]], rtol=1e-15)


def test_discretize_matches_series_oracle():
    rng = np.random.default_rng(0)
    delta = rng.uniform(0.01, 0.5, 5)
    A = -np.exp(rng.normal(size=(5, 3)))
    B = rng.normal(size=3)
    a_bar, b_bar = discretize(Tensor(delta), Tensor(A), Tensor(B))
    ref_a, ref_b = taylor_discretize(delta, A, B)
    np.testing.assert_allclose(a_bar.data, ref_a, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b_bar.data, ref_b, rtol=0, atol=1e-12)


def test_discretize_rejects_nonpositive_delta():
    with pytest.raises(ContractError):
        discretize(Tensor([0.1, 0.0]), Tensor(-np.ones((2, 2))), Tensor(np.ones(2)))


def make_ssm(d=4, n=3, seed=0):
    rng = np.random.default_rng(seed)
    ssm = SelectiveSSM(d, n, rng)
    ssm.A_log.data[...] = rng.normal(0.0, 0.5, (d, n))
    return ssm, rng


def test_zero_state_zero_input_zero_output():
    ssm, _ = make_ssm()
    ssm.skip.data[...] = 0.0
    y, st_ = ssm.step(Tensor(np.zeros(4)), ssm.init_state(()))
    np.testing.assert_array_equal(y.data, 0.0)
    np.testing.assert_array_equal(st_.h.data, 0.0)


def test_running_sum_when_decay_is_pinned_to_one():
    ssm = SelectiveSSM(1, 1, np.random.default_rng(0))
    ssm.A_log.data[...] = -40.0  # A ~ -4e-18, so A_bar == 1 to machine precision
    ssm.dt_proj.weight.data[...] = 0.0
    ssm.dt_proj.bias.data[...] = 1.0 + np.log(-np.expm1(-1.0))  # softplus -> delta = 1
    for proj in (ssm.B_proj, ssm.C_proj):
        proj.weight.data[...] = 0.0
        proj.bias.data[...] = 1.0
    ssm.skip.data[...] = 0.0
    xs = np.random.default_rng(1).normal(size=(9, 1))
    ys, _ = ssm.scan_sequential(Tensor(xs))
    np.testing.assert_allclose(ys.data, np.cumsum(xs, axis=0), atol=1e-10)


def test_single_step_unrolls():
    ssm, rng = make_ssm()
    x = rng.normal(size=4)
    delta, B, C = (v.data for v in ssm.selectivity(Tensor(x)))
    _, b_bar = discretize(Tensor(delta), ssm.A, Tensor(B))
    y, _ = ssm.step(Tensor(x), ssm.init_state(()))
    expected = (b_bar.data * x[:, None] * C[None, :]).sum(-1) + ssm.skip.data * x
    np.testing.assert_allclose(y.data, expected, atol=1e-14)


def test_sequential_base_case_equals_step():
    ssm, rng = make_ssm()
    x = rng.normal(size=(1, 4))
    h0 = SSMState(Tensor(rng.normal(size=(4, 3))))
    ys, final = ssm.scan_sequential(Tensor(x), h0)
    y1, s1 = ssm.step(Tensor(x[0]), h0)
    np.testing.assert_array_equal(ys.data[0], y1.data)
    np.testing.assert_array_equal(final.h.data, s1.h.data)


def test_sequential_concatenation_property():
    ssm, rng = make_ssm()
    xs = rng.normal(size=(2, 11, 4))
    full, s_full = ssm.scan_sequential(Tensor(xs))
    a, s_a = ssm.scan_sequential(Tensor(xs[:, :5]))
    b, s_b = ssm.scan_sequential(Tensor(xs[:, 5:]), s_a)
    np.testing.assert_array_equal(np.concatenate([a.data, b.data], axis=1), full.data)
    np.testing.assert_array_equal(s_b.h.data, s_full.h.data)
    assert s_b.step == 11


@pytest.mark.parametrize("steps", [1, 10, 32])
@pytest.mark.parametrize("chunk", [1, 3, None])
def test_chunked_matches_sequential(steps, chunk):
    ssm, rng = make_ssm(d=5, n=4, seed=steps)
    xs = rng.normal(size=(3, steps, 5))
    h0 = SSMState(Tensor(rng.normal(size=(3, 5, 4))))
    seq, s_seq = selective_scan_sequential(ssm, Tensor(xs), h0)
    chk, s_chk = selective_scan_chunked(ssm, Tensor(xs), chunk or steps, h0)
    assert np.abs(seq.data - chk.data).max() < 1e-10
    assert np.abs(s_seq.h.data - s_chk.h.data).max() < 1e-10


def test_chunk_one_is_exactly_sequential_up_to_rounding():
    ssm, rng = make_ssm()
    xs = rng.normal(size=(6, 4))
    a, _ = ssm.scan_sequential(Tensor(xs))
    b, _ = ssm.scan_chunked(Tensor(xs), 1)
    np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-14)


def test_scan_is_causal():
    ssm, rng = make_ssm()
    xs = rng.normal(size=(12, 4))
    base, _ = ssm.scan_chunked(Tensor(xs), 5)
    for t in range(11):
        pert = xs.copy()
        pert[t + 1:] += rng.normal(size=pert[t + 1:].shape)
        for scan in (lambda v: ssm.scan_chunked(v, 5), ssm.scan_sequential):
            out, _ = scan(Tensor(pert))
            ref, _ = scan(Tensor(xs))
            assert out.data[: t + 1].tobytes() == ref.data[: t + 1].tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_state_obeys_geometric_bound(seed):
    ssm, rng = make_ssm(d=3, n=2, seed=seed)
    xs = rng.uniform(-1.0, 1.0, size=(200, 3))
    delta, A_bar, u, _ = ssm._prepare(Tensor(xs))
    _, final = ssm.scan_sequential(Tensor(xs))
    hs = []
    h = np.zeros((3, 2))
    for t in range(200):
        h = A_bar.data[t] * h + u.data[t]
        hs.append(np.abs(h).max())
    _, b_bar = discretize(delta, ssm.A, ssm.B_proj(Tensor(xs)))
    bound = np.abs(b_bar.data).max() / (1.0 - A_bar.data.max())
    assert max(hs) <= bound * (1 + 1e-12)
    assert np.abs(final.h.data).max() <= bound * (1 + 1e-12)


def test_five_step_scan_gradient_check():
    ssm, rng = make_ssm()
    xs = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="xs")
    w = Tensor(rng.normal(size=(5, 4)))
    params = ssm.parameters() + [xs]
    results = T.gradient_check(lambda: (ssm.scan_chunked(xs, 2)[0] * w).sum(), params, rng, samples=30)
    assert max(r[-1] for r in results) < 1e-4


def test_a_is_strictly_negative():
    ssm, _ = make_ssm()
    assert (ssm.A.data < 0).all()
    delta, _, _ = ssm.selectivity(Tensor(np.random.default_rng(2).normal(size=(7, 4))))
    assert (delta.data > 0).all()
