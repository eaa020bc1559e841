"""Selective state-space scan, event-adaptive transition, bidirectional Mamba block.

The scan core is a single autodiff primitive with a hand-written adjoint so a
length-L sequence costs one Python loop of L numpy steps in each direction
instead of L recorded nodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import numerics as nx
from .numerics import Tensor, adjoint

A_CEILING = -1e-4  # every entry of the effective transition is clamped to <= this


@dataclass
class SsmParams:
    A_log: Tensor  # [E, N]; static transition is -exp(A_log)
    W_B: Tensor  # [E, N]
    W_C: Tensor  # [E, N]
    W_delta: Tensor  # [E]
    b_delta: Tensor  # [E]
    D_skip: Tensor  # [E]

    @classmethod
    def init(cls, E: int, N: int, rng: np.random.Generator, prefix: str = "") -> "SsmParams":
        return cls(
            A_log=nx.parameter(np.tile(np.log(np.arange(1, N + 1, dtype=float)), (E, 1)), prefix + "A_log"),
            W_B=nx.parameter(rng.normal(0, 1 / math.sqrt(E), (E, N)), prefix + "W_B"),
            W_C=nx.parameter(rng.normal(0, 1 / math.sqrt(E), (E, N)), prefix + "W_C"),
            W_delta=nx.parameter(rng.normal(0, 0.1, E), prefix + "W_delta"),
            b_delta=nx.parameter(np.full(E, math.log(math.expm1(0.5))), prefix + "b_delta"),
            D_skip=nx.parameter(np.ones(E), prefix + "D_skip"),
        )


@dataclass
class DynamicTransitionState:
    """Per-channel running transition for one sequence, plus its learnable drivers.

    ``A_prev`` is runtime state (not a parameter) and is treated as a constant
    when differentiating the current frame.
    """

    W_a: Tensor  # [E, 1]
    alpha_raw: Tensor  # scalar; alpha = sigmoid(alpha_raw)
    A_prev: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.A_prev is None:
            self.reset()

    @classmethod
    def init(cls, E: int, rng: np.random.Generator, prefix: str = "") -> "DynamicTransitionState":
        return cls(
            W_a=nx.parameter(np.abs(rng.normal(0, 1.0, (E, 1))), prefix + "W_a"),
            alpha_raw=nx.parameter(0.0, prefix + "alpha_raw"),
        )

    @property
    def dim(self) -> int:
        return self.W_a.shape[0]

    def reset(self) -> None:
        self.A_prev = np.ones(self.W_a.shape[0])


@dataclass
class MambaBlockParams:
    norm_gamma: Tensor  # [D]
    norm_beta: Tensor  # [D]
    W_in_x: Tensor  # [D, E]
    W_in_z: Tensor  # [D, E]
    conv_fwd: Tensor  # [K, E]
    conv_bwd: Tensor  # [K, E]
    ssm_fwd: SsmParams
    ssm_bwd: SsmParams
    W_out: Tensor  # [E, D]

    @classmethod
    def init(cls, D: int, N: int, K: int, rng: np.random.Generator, prefix: str = "",
             expand: int = 2) -> "MambaBlockParams":
        E = expand * D
        return cls(
            norm_gamma=nx.parameter(np.ones(D), prefix + "norm_gamma"),
            norm_beta=nx.parameter(np.zeros(D), prefix + "norm_beta"),
            W_in_x=nx.parameter(rng.normal(0, 1 / math.sqrt(D), (D, E)), prefix + "W_in_x"),
            W_in_z=nx.parameter(rng.normal(0, 1 / math.sqrt(D), (D, E)), prefix + "W_in_z"),
            conv_fwd=nx.parameter(rng.uniform(-1, 1, (K, E)) / math.sqrt(K), prefix + "conv_fwd"),
            conv_bwd=nx.parameter(rng.uniform(-1, 1, (K, E)) / math.sqrt(K), prefix + "conv_bwd"),
            ssm_fwd=SsmParams.init(E, N, rng, prefix + "ssm_fwd."),
            ssm_bwd=SsmParams.init(E, N, rng, prefix + "ssm_bwd."),
            W_out=nx.parameter(rng.normal(0, 0.5 / math.sqrt(E), (E, D)), prefix + "W_out"),
        )

    @property
    def expanded(self) -> int:
        return self.W_in_x.shape[1]


# ----------------------------------------------------------------------------
# scan core: y_t = <C_t, h_t> + D x_t,  h_t = exp(delta_t A) h_{t-1} + delta_t B_t x_t


SEQ_BLOCK = 128  # tokens discretised at a time by the sequential kernel


def _discretize(x, delta, A, B):
    dA = delta[:, :, None] * A[None]  # [L, E, N]
    np.exp(dA, out=dA)
    dBx = (delta * x)[:, :, None] * B[:, None, :]
    return dA, dBx


def _states_sequential(x, delta, A, B):
    """Token-by-token recurrence, discretising SEQ_BLOCK tokens at a time so the
    working set stays cache-sized and runtime stays linear in L."""
    L = x.shape[0]
    hs = np.empty((L,) + A.shape)
    h = np.zeros(A.shape)
    for s in range(0, L, SEQ_BLOCK):
        dA, dBx = _discretize(x[s:s + SEQ_BLOCK], delta[s:s + SEQ_BLOCK], A, B[s:s + SEQ_BLOCK])
        for t in range(len(dA)):
            h = dA[t] * h + dBx[t]
            hs[s + t] = h
    return hs


def _states_chunked(dA, dBx, chunk: int):
    """Same states as the sequential loop, by composing per-chunk affine maps.

    Pass 1 scans every chunk from a zero state in lockstep (vectorised over
    chunks); pass 2 carries each chunk's entry state across chunk boundaries;
    pass 3 adds the carried state through the in-chunk decay products.
    """
    L = dA.shape[0]
    n = -(-L // chunk)
    pad = n * chunk - L
    if pad:
        dA = np.concatenate([dA, np.ones((pad,) + dA.shape[1:])])
        dBx = np.concatenate([dBx, np.zeros((pad,) + dBx.shape[1:])])
    a = dA.reshape((n, chunk) + dA.shape[1:])
    b = dBx.reshape((n, chunk) + dBx.shape[1:])
    local = np.empty_like(b)
    decay = np.empty_like(a)
    h = np.zeros((n,) + dA.shape[1:])
    p = np.ones_like(h)
    for i in range(chunk):
        h = a[:, i] * h + b[:, i]
        p = a[:, i] * p
        local[:, i] = h
        decay[:, i] = p
    carry = np.zeros((n,) + dA.shape[1:])
    for k in range(1, n):
        carry[k] = decay[k - 1, -1] * carry[k - 1] + local[k - 1, -1]
    hs = local + decay * carry[:, None]
    return hs.reshape((n * chunk,) + dA.shape[1:])[:L]


def _check_finite(y: np.ndarray) -> None:
    bad = ~np.isfinite(y).all(axis=1)
    if bad.any():
        raise FloatingPointError(f"selective scan produced a non-finite value at token {int(np.argmax(bad))}")


def scan_core(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
              chunk: int | None = None) -> Tensor:
    """Differentiable scan over x [L, E] with delta [L, E], A [E, N], B/C [L, N], D [E]."""
    L, E = x.shape
    N = A.shape[1]
    if delta.shape != (L, E) or A.shape != (E, N) or B.shape != (L, N) or C.shape != (L, N) or D.shape != (E,):
        raise nx.ShapeError(
            f"scan_core: x{x.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape} D{D.shape}")
    if chunk is not None and chunk < 1:
        raise ValueError("chunk must be >= 1")
    if chunk is None:
        hs = _states_sequential(x.data, delta.data, A.data, B.data)
    else:
        hs = _states_chunked(*_discretize(x.data, delta.data, A.data, B.data), chunk)
    y = np.einsum("len,ln->le", hs, C.data) + D.data * x.data
    _check_finite(y)
    return nx.custom_op("selective_scan", y, (x, delta, A, B, C, D), hs=hs)


@adjoint("selective_scan")
def _scan_adj(g, node):
    x, delta, A, B, C, D = (t.data for t in node.inputs)
    hs = node.saved["hs"]
    dA = np.exp(delta[:, :, None] * A[None])
    L = x.shape[0]
    gC = g[:, :, None] * C[:, None, :]
    dh = np.empty_like(hs)
    acc = np.zeros(hs.shape[1:])
    for t in range(L - 1, -1, -1):
        acc = gC[t] + (dA[t + 1] * acc if t + 1 < L else 0.0)
        dh[t] = acc
    h_prev = np.concatenate([np.zeros((1,) + hs.shape[1:]), hs[:-1]])
    dlog = dh * h_prev * dA  # d/d(delta*A)
    dhB = (dh * B[:, None, :]).sum(axis=-1)  # [L, E]
    g_delta = (dlog * A[None]).sum(axis=-1) + dhB * x
    g_A = (dlog * delta[:, :, None]).sum(axis=0)
    g_B = (dh * (delta * x)[:, :, None]).sum(axis=1)
    g_x = dhB * delta + g * D
    g_C = np.einsum("le,len->ln", g, hs)
    g_D = (g * x).sum(axis=0)
    return g_x, g_delta, g_A, g_B, g_C, g_D


# ----------------------------------------------------------------------------


def compose_transition(A_log: Tensor, a_t: Tensor | None = None) -> Tensor:
    """Effective transition ``-exp(A_log) + a_t`` (a_t broadcast over the state axis), clamped to <= -1e-4."""
    A = nx.neg(nx.exp(A_log))
    if a_t is not None:
        A = A + nx.expand_last(a_t, A_log.shape[1])
    return nx.clamp_max(A, A_CEILING)


def _scan_inputs(x: Tensor, params: SsmParams):
    delta = nx.softplus(x * params.W_delta + params.b_delta)
    return delta, nx.linear(x, params.W_B), nx.linear(x, params.W_C)


def selective_scan_sequential(x: Tensor, params: SsmParams, a_bias: Tensor | None = None) -> Tensor:
    delta, B, C = _scan_inputs(x, params)
    return scan_core(x, delta, compose_transition(params.A_log, a_bias), B, C, params.D_skip)


def selective_scan_chunked(x: Tensor, params: SsmParams, a_bias: Tensor | None = None,
                           chunk: int = 16) -> Tensor:
    delta, B, C = _scan_inputs(x, params)
    return scan_core(x, delta, compose_transition(params.A_log, a_bias), B, C, params.D_skip, chunk=chunk)


def dynamic_transition_update(state: DynamicTransitionState, rho_t: float) -> Tensor:
    """One frame of the density-driven blend; mutates ``state.A_prev`` and returns A_t."""
    if rho_t < 0:
        raise ValueError(f"event density must be non-negative, got {rho_t}")
    E = state.dim
    beta = nx.sigmoid(nx.reshape(state.W_a, (E,)) * float(rho_t))
    alpha = nx.sigmoid(state.alpha_raw)
    a_t = alpha * beta + (1.0 - alpha) * Tensor(state.A_prev)
    state.A_prev = a_t.data.copy()
    return a_t


def transition_trajectory(state: DynamicTransitionState, rho: np.ndarray) -> np.ndarray:
    """Rows k = A_prev before frame k (k = 0..len(rho)), starting from ``state.A_prev``; no tape, state untouched.

    Uses the same float operations as ``dynamic_transition_update`` so the two agree bitwise.
    """
    E = state.dim
    w = state.W_a.data.reshape(E)
    alpha = special.expit(state.alpha_raw.data)
    out = np.empty((len(rho) + 1, E))
    a = state.A_prev.copy()
    out[0] = a
    for k, r in enumerate(rho):
        a = alpha * special.expit(w * float(r)) + (1.0 - alpha) * a
        out[k + 1] = a
    return out


def transition_fixed_point_bound(a0: np.ndarray, beta: np.ndarray, alpha: float, steps: int) -> np.ndarray:
    """Closed-form ``(1 - alpha)^steps * |a0 - beta|`` bound on the blend's distance to beta."""
    return (1.0 - alpha) ** steps * np.abs(np.asarray(a0) - np.asarray(beta))


def mamba_block_forward(tokens: Tensor, params: MambaBlockParams, dyn: DynamicTransitionState | None = None,
                        rho_t: float | None = None, chunk: int | None = None) -> Tensor:
    """Pre-norm bidirectional Mamba block with residual; ``dyn`` switches on the event-adaptive bias."""
    a_t = None
    if dyn is not None:
        if rho_t is None:
            raise ValueError("a dynamic transition state needs the frame's event density rho_t")
        a_t = dynamic_transition_update(dyn, rho_t)

    u = nx.layer_norm(tokens, params.norm_gamma, params.norm_beta)
    x = nx.linear(u, params.W_in_x)
    z = nx.linear(u, params.W_in_z)

    def direction(seq, kernel, ssm):
        xc = nx.silu(nx.depthwise_conv1d(seq, kernel, causal=True))
        delta, B, C = _scan_inputs(xc, ssm)
        return scan_core(xc, delta, compose_transition(ssm.A_log, a_t), B, C, ssm.D_skip, chunk=chunk)

    y_fwd = direction(x, params.conv_fwd, params.ssm_fwd)
    y_bwd = nx.flip(direction(nx.flip(x, 0), params.conv_bwd, params.ssm_bwd), 0)
    y = (y_fwd + y_bwd) * nx.silu(z)
    return tokens + nx.linear(y, params.W_out)
