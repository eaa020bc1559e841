import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mambatrack import dssm
from mambatrack import numerics as nx
from mambatrack.model import iter_parameters
from mambatrack.numerics import Tensor


def naive_scan(x, A_log, W_B, W_C, W_delta, b_delta, D_skip, a_bias=None):
    """Scalar triple loop, written from the recurrence without any package helpers."""
    L, E = x.shape
    N = A_log.shape[1]
    h = [[0.0] * N for _ in range(E)]
    y = np.zeros((L, E))
    for t in range(L):
        Bt = [sum(x[t, e] * W_B[e, n] for e in range(E)) for n in range(N)]
        Ct = [sum(x[t, e] * W_C[e, n] for e in range(E)) for n in range(N)]
        for d in range(E):
            z = x[t, d] * W_delta[d] + b_delta[d]
            dt = math.log1p(math.exp(z)) if z < 30 else z
            acc = 0.0
            for n in range(N):
                a = -math.exp(A_log[d, n]) + (a_bias[d] if a_bias is not None else 0.0)
                a = min(a, -1e-4)
                h[d][n] = math.exp(dt * a) * h[d][n] + dt * Bt[n] * x[t, d]
                acc += Ct[n] * h[d][n]
            y[t, d] = acc + D_skip[d] * x[t, d]
    return y


def ssm_arrays(p: dssm.SsmParams):
    return [t.data for t in (p.A_log, p.W_B, p.W_C, p.W_delta, p.b_delta, p.D_skip)]


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_frozen_state_limit(rng):
    E, N = 3, 2
    p = dssm.SsmParams.init(E, N, rng)
    p.W_delta.data[:] = 0.0
    p.b_delta.data[:] = -60.0
    x = rng.normal(size=(10, E))
    y = dssm.selective_scan_sequential(Tensor(x), p).data
    np.testing.assert_allclose(y, p.D_skip.data * x, atol=1e-20)


def test_single_token_expansion(rng):
    E, N = 4, 3
    p = dssm.SsmParams.init(E, N, rng)
    x = rng.normal(size=(1, E))
    dt = np.log1p(np.exp(x[0] * p.W_delta.data + p.b_delta.data))
    B, C = x[0] @ p.W_B.data, x[0] @ p.W_C.data
    expected = (C @ B) * dt * x[0] + p.D_skip.data * x[0]
    np.testing.assert_allclose(dssm.selective_scan_sequential(Tensor(x), p).data[0], expected, rtol=1e-13)


@pytest.mark.parametrize("with_bias", [False, True])
def test_scan_matches_naive_loop(rng, with_bias):
    E, N, L = 4, 2, 32
    p = dssm.SsmParams.init(E, N, rng)
    p.W_delta.data = rng.normal(0, 0.5, E)
    x = rng.normal(size=(L, E))
    bias = rng.uniform(0.2, 1.0, E) if with_bias else None
    y = dssm.selective_scan_sequential(Tensor(x), p, None if bias is None else Tensor(bias)).data
    np.testing.assert_allclose(y, naive_scan(x, *ssm_arrays(p), a_bias=bias), atol=1e-12, rtol=0)


def _random_scan(rng, L, E, N):
    p = dssm.SsmParams.init(E, N, rng)
    return Tensor(rng.normal(size=(L, E))), p, Tensor(rng.uniform(0, 1, E))


@pytest.mark.parametrize("chunk_of", [lambda L: L, lambda L: 1])
def test_degenerate_chunking(rng, chunk_of):
    x, p, bias = _random_scan(rng, 37, 5, 3)
    seq = dssm.selective_scan_sequential(x, p, bias).data
    chk = dssm.selective_scan_chunked(x, p, bias, chunk=chunk_of(37)).data
    assert np.max(np.abs(seq - chk)) <= 1e-12


@pytest.mark.parametrize("chunk", [2, 3, 16, 64])
def test_chunked_matches_sequential_long(rng, chunk):
    x, p, bias = _random_scan(rng, 256, 8, 4)
    seq = dssm.selective_scan_sequential(x, p, bias).data
    chk = dssm.selective_scan_chunked(x, p, bias, chunk=chunk).data
    assert np.max(np.abs(seq - chk)) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 96), st.integers(1, 40))
def test_chunked_equivalence_property(seed, L, chunk):
    rng = np.random.default_rng(seed)
    x, p, bias = _random_scan(rng, L, 3, 2)
    seq = dssm.selective_scan_sequential(x, p, bias).data
    assert np.max(np.abs(seq - dssm.selective_scan_chunked(x, p, bias, chunk=chunk).data)) < 1e-10


def test_chunk_must_be_positive(rng):
    x, p, _ = _random_scan(rng, 4, 2, 2)
    with pytest.raises(ValueError):
        dssm.selective_scan_chunked(x, p, None, chunk=0)


def test_long_sequence_stays_within_geometric_bound(rng):
    L, E, N = 10_000, 4, 4
    x = rng.normal(size=(L, E))
    delta = rng.uniform(0.05, 1.0, (L, E))
    B, C = rng.normal(size=(L, N)), rng.normal(size=(L, N))
    p = dssm.SsmParams.init(E, N, rng)
    A = dssm.compose_transition(p.A_log, Tensor(np.full(E, 5.0))).data  # every entry clamped
    y = dssm.scan_core(*(Tensor(v) for v in (x, delta, A, B, C, np.zeros(E))), chunk=100).data
    decay = np.exp(delta.min() * A.max())
    assert decay < 1
    h_bound = np.abs(delta * x).max() * np.abs(B).max() / (1 - decay)
    assert np.all(np.isfinite(y))
    assert np.abs(y).max() <= N * np.abs(C).max() * h_bound


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_input_names_token(rng):
    x, p, _ = _random_scan(rng, 6, 2, 2)
    x.data[3, 1] = np.inf
    with pytest.raises(FloatingPointError, match="token 3"):
        dssm.selective_scan_sequential(x, p)


def test_compose_transition_zero_bias_and_clamp(rng):
    p = dssm.SsmParams.init(3, 4, rng)
    static = dssm.compose_transition(p.A_log).data
    np.testing.assert_array_equal(dssm.compose_transition(p.A_log, Tensor(np.zeros(3))).data, static)
    np.testing.assert_array_equal(static, -np.exp(p.A_log.data))
    clamped = dssm.compose_transition(p.A_log, Tensor(np.array([1.5, 0.0, 10.0]))).data
    assert np.all(clamped <= dssm.A_CEILING)
    assert clamped[0, 0] == dssm.A_CEILING and clamped[2].tolist() == [dssm.A_CEILING] * 4
    x = Tensor(rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(dssm.selective_scan_sequential(x, p, Tensor(np.zeros(3))).data,
                                  dssm.selective_scan_sequential(x, p).data)


def _state(E, w_a, alpha_raw=0.0):
    return dssm.DynamicTransitionState(nx.parameter(np.asarray(w_a, float).reshape(E, 1)),
                                       nx.parameter(alpha_raw))


def test_zero_projection_gives_half_beta():
    s = _state(3, np.zeros(3))
    s.A_prev = np.zeros(3)
    a = dssm.dynamic_transition_update(s, 0.7).data
    np.testing.assert_allclose(a, 0.5 * 0.5)


def test_transition_arithmetic():
    s = _state(2, [math.log(0.8 / 0.2)] * 2)
    a = dssm.dynamic_transition_update(s, 1.0).data
    np.testing.assert_allclose(a, 0.9, rtol=1e-14)
    np.testing.assert_array_equal(s.A_prev, a)


def test_negative_density_rejected():
    with pytest.raises(ValueError):
        dssm.dynamic_transition_update(_state(2, [1.0, 1.0]), -0.1)


def test_geometric_convergence_to_beta(rng):
    E = 6
    s = _state(E, rng.uniform(-3, 3, E), alpha_raw=rng.normal())
    alpha = 1 / (1 + math.exp(-s.alpha_raw.data))
    beta = 1 / (1 + np.exp(-s.W_a.data[:, 0] * 0.3))
    a0 = s.A_prev.copy()
    for t in range(1, 40):
        a = dssm.dynamic_transition_update(s, 0.3).data
        assert np.all(np.abs(a - beta) <= dssm.transition_fixed_point_bound(a0, beta, alpha, t) + 1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.floats(0, 50), min_size=1, max_size=30))
def test_transition_stays_in_unit_interval(seed, rho):
    rng = np.random.default_rng(seed)
    s = _state(4, rng.normal(0, 3, 4), alpha_raw=rng.normal(0, 3))
    for r in rho:
        a = dssm.dynamic_transition_update(s, r).data
        assert np.all((a > 0) & (a <= 1))


def test_trajectory_is_bitwise_equal_to_updates(rng):
    s = _state(5, rng.normal(size=5), alpha_raw=0.4)
    rho = rng.uniform(0, 0.5, 12)
    traj = dssm.transition_trajectory(s, rho)
    assert np.array_equal(s.A_prev, np.ones(5))
    for k, r in enumerate(rho):
        assert np.array_equal(traj[k], s.A_prev)
        dssm.dynamic_transition_update(s, r)
    assert np.array_equal(traj[-1], s.A_prev)


def test_denser_frame_gives_larger_transition(rng):
    s = _state(8, np.abs(rng.normal(size=8)) + 0.1)
    hist = rng.uniform(0.2, 1.0, 8)
    s.A_prev = hist.copy()
    dense = dssm.dynamic_transition_update(s, 0.4).data
    s.A_prev = hist.copy()
    sparse = dssm.dynamic_transition_update(s, 0.1).data
    assert np.all(dense > sparse)


def _block(rng, D=4, N=2, K=3):
    return dssm.MambaBlockParams.init(D, N, K, rng)


def test_zero_output_projection_is_identity(rng):
    blk = _block(rng)
    blk.W_out.data[:] = 0.0
    tok = rng.normal(size=(6, 4))
    np.testing.assert_array_equal(dssm.mamba_block_forward(Tensor(tok), blk).data, tok)


def test_reversal_symmetry_with_tied_directions(rng):
    blk = _block(rng)
    blk.conv_bwd = blk.conv_fwd
    blk.ssm_bwd = blk.ssm_fwd
    tok = rng.normal(size=(7, 4))
    out = dssm.mamba_block_forward(Tensor(tok), blk).data
    out_rev = dssm.mamba_block_forward(Tensor(tok[::-1].copy()), blk).data
    np.testing.assert_allclose(out_rev, out[::-1], atol=1e-13)


def test_dynamic_block_needs_density(rng):
    blk = _block(rng)
    with pytest.raises(ValueError):
        dssm.mamba_block_forward(Tensor(rng.normal(size=(3, 4))), blk, dssm.DynamicTransitionState.init(8, rng))


def test_block_chunked_matches_sequential(rng):
    blk = _block(rng)
    tok = Tensor(rng.normal(size=(9, 4)))
    a = dssm.mamba_block_forward(tok, blk).data
    b = dssm.mamba_block_forward(tok, blk, chunk=4).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_block_gradcheck(rng):
    blk = _block(rng)
    tok = nx.parameter(rng.normal(size=(6, 4)))
    w = rng.normal(size=(6, 4))
    errs = nx.check_grads(lambda: nx.tsum(dssm.mamba_block_forward(tok, blk) * w), [tok, *iter_parameters(blk)])
    assert max(errs.values()) < 1e-4


def test_scan_core_gradcheck(rng):
    E, N, L = 3, 2, 7
    x = nx.parameter(rng.normal(size=(L, E)))
    delta = nx.parameter(rng.uniform(0.1, 1.0, (L, E)))
    A = nx.parameter(-rng.uniform(0.5, 2.0, (E, N)))
    B, C = nx.parameter(rng.normal(size=(L, N))), nx.parameter(rng.normal(size=(L, N)))
    D = nx.parameter(rng.normal(size=E))
    w = rng.normal(size=(L, E))
    for chunk in (None, 3):
        for p in (x, delta, A, B, C, D):
            p.grad = None
        errs = nx.check_grads(lambda: nx.tsum(dssm.scan_core(x, delta, A, B, C, D, chunk=chunk) * w),
                              [x, delta, A, B, C, D])
        assert max(errs.values()) < 1e-6
