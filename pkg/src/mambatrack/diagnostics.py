"""Scan benchmark and the finite-difference gradient suite."""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import dssm, gpf, head
from . import numerics as nx
from .events import BBox, patch_embed
from .numerics import Tensor

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
EQUIVALENCE_TOL = 1e-10


class BenchmarkError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# scan benchmark


def random_scan_inputs(L: int, E: int, N: int, rng: np.random.Generator):
    x = Tensor(rng.normal(size=(L, E)))
    delta = Tensor(np.logaddexp(0.0, rng.normal(-1.0, 1.0, (L, E))))
    A = Tensor(-np.exp(rng.normal(0.0, 1.0, (E, N))))
    B = Tensor(rng.normal(size=(L, N)))
    C = Tensor(rng.normal(size=(L, N)))
    D = Tensor(rng.normal(size=E))
    return x, delta, A, B, C, D


def _best_time(fn: Callable[[], object], reps: int) -> float:
    best = math.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scan(L: int, D: int, N: int, reps: int = 5, chunk: int | None = None, seed: int = 0) -> dict:
    """Tokens/s of the sequential and chunked scans, plus the sequential L -> 2L runtime ratio.

    Refuses to report if the two scans disagree by more than 1e-10.
    """
    if min(L, D, N, reps) < 1:
        raise ValueError("L, D, N and reps must be positive")
    chunk = chunk or max(1, math.isqrt(L))
    rng = np.random.default_rng(seed)
    x, delta, A, B, C, Dskip = args = random_scan_inputs(2 * L, D, N, rng)
    half = (Tensor(x.data[:L]), Tensor(delta.data[:L]), A, Tensor(B.data[:L]), Tensor(C.data[:L]), Dskip)
    with nx.no_grad():
        y_seq = dssm.scan_core(*half)
        y_chk = dssm.scan_core(*half, chunk=chunk)
        diff = float(np.max(np.abs(y_seq.data - y_chk.data)))
        if not diff < EQUIVALENCE_TOL:
            raise BenchmarkError(f"chunked scan deviates from sequential by {diff:.3e}")
        t_seq = _best_time(lambda: dssm.scan_core(*half), reps)
        t_chk = _best_time(lambda: dssm.scan_core(*half, chunk=chunk), reps)
        t_seq2 = _best_time(lambda: dssm.scan_core(*args), reps)
    return {
        "config": {"L": L, "D": D, "N": N, "reps": reps, "chunk": chunk, "seed": seed},
        "max_abs_diff": diff,
        "sequential_s": t_seq,
        "chunked_s": t_chk,
        "sequential_tokens_per_s": L / t_seq,
        "chunked_tokens_per_s": L / t_chk,
        "sequential_2L_s": t_seq2,
        "doubling_ratio": t_seq2 / t_seq,
    }


# ----------------------------------------------------------------------------
# gradient suite


@dataclass
class GradReport:
    scope: str
    errors: dict[str, float] = field(default_factory=dict)
    tolerances: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerances[k]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for k, e in self.errors.items():
            status = "ok  " if e < self.tolerances[k] else "FAIL"
            out.append(f"{status} {k:<40s} max rel err {e:.2e} (tol {self.tolerances[k]:.0e})")
        return out


def _probe(rng, out: Tensor) -> Tensor:
    """Scalar readout with random weights so every output entry matters differently."""
    return nx.tsum(out * Tensor(rng.normal(size=out.shape)))


def _leaf(rng, shape, scale=1.0, name=None, positive=False):
    v = rng.normal(0.0, scale, shape)
    return nx.parameter(np.abs(v) + 0.5 if positive else v, name)


def primitive_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    x = _leaf(rng, (3, 4), name="x")
    W = _leaf(rng, (4, 5), name="W")
    b = _leaf(rng, (5,), name="b")
    w = rng.normal(size=(3, 5))
    yield "linear", lambda: nx.tsum(nx.linear(x, W, b) * w), [x, W, b]

    for causal in (True, False):
        xc = _leaf(rng, (8, 4), name="x")
        k = _leaf(rng, (3, 4), name="kernel")
        wc = rng.normal(size=(8, 4))
        yield f"depthwise_conv1d[{'causal' if causal else 'same'}]", \
            (lambda xc=xc, k=k, wc=wc, causal=causal: nx.tsum(nx.depthwise_conv1d(xc, k, causal) * wc)), [xc, k]

    img = _leaf(rng, (4, 5, 3), name="x")
    kw = _leaf(rng, (3, 3, 3, 2), name="w")
    kb = _leaf(rng, (2,), name="b")
    w2 = rng.normal(size=(4, 5, 2))
    yield "conv2d", lambda: nx.tsum(nx.conv2d(img, kw, kb) * w2), [img, kw, kb]

    for kind in ("silu", "gelu", "sigmoid", "softplus"):
        a = nx.parameter(np.array([-2.0, -0.1, 0.3, 4.0]), "x")
        wa = rng.normal(size=4)
        yield f"activation[{kind}]", (lambda a=a, wa=wa, kind=kind: nx.tsum(nx.activation(a, kind) * wa)), [a]

    xl = _leaf(rng, (3, 6), name="x")
    g = _leaf(rng, (6,), name="gamma")
    be = _leaf(rng, (6,), name="beta")
    wl = rng.normal(size=(3, 6))
    yield "layer_norm", lambda: nx.tsum(nx.layer_norm(xl, g, be) * wl), [xl, g, be]

    u = _leaf(rng, (2, 3), name="u")
    v = _leaf(rng, (3,), name="v", positive=True)
    p = _leaf(rng, (2, 3), name="p", positive=True)
    wu = rng.normal(size=(2, 3))
    unary = {
        "add": lambda: nx.add(u, v), "sub": lambda: nx.sub(u, v), "mul": lambda: nx.mul(u, v),
        "div": lambda: nx.div(u, v), "neg": lambda: nx.neg(u), "exp": lambda: nx.exp(u),
        "log": lambda: nx.log(p), "square": lambda: nx.square(u), "abs": lambda: nx.tabs(u),
        "maximum": lambda: nx.maximum(u, v), "minimum": lambda: nx.minimum(u, v),
        "clamp_max": lambda: nx.clamp_max(u, 0.1), "expand_last": lambda: nx.expand_last(u, 2)[..., 0] * 1.5,
        "transpose": lambda: nx.transpose(u, (1, 0)).reshape(2, 3), "reshape": lambda: nx.reshape(u, (3, 2)).reshape(2, 3),
        "flip": lambda: nx.flip(u, 1), "getitem": lambda: nx.concat([u[:, 1:], u[:, :1] * 2.0], axis=1),
        "concat": lambda: nx.concat([u, p], axis=0)[1:3], "stack": lambda: nx.stack([u[0], p[1]]),
    }
    for name, fn in unary.items():
        yield name, (lambda fn=fn: nx.tsum(fn() * wu)), [u, v, p]
    yield "sum/mean", lambda: nx.tsum(nx.tsum(u, axis=0) * wu[0]) + nx.mean(p), [u, p]
    yield "l2norm", lambda: nx.l2norm(u) * 3.0, [u]

    sx, sdelta, sA, sB, sC, sD = (nx.parameter(t.data, n) for t, n in
                                  zip(random_scan_inputs(7, 3, 2, rng), ("x", "delta", "A", "B", "C", "D")))
    ws = rng.normal(size=(7, 3))
    yield "selective_scan", lambda: nx.tsum(dssm.scan_core(sx, sdelta, sA, sB, sC, sD) * ws), \
        [sx, sdelta, sA, sB, sC, sD]


def block_cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    from .model import iter_parameters

    E, N, L = 6, 3, 9
    ssm = dssm.SsmParams.init(E, N, rng)
    x = _leaf(rng, (L, E), name="x")
    bias = nx.parameter(rng.uniform(0.0, 0.8, E), "a_bias")
    w = rng.normal(size=(L, E))
    params = [x, bias, *iter_parameters(ssm)]
    yield "selective_scan_sequential", lambda: nx.tsum(dssm.selective_scan_sequential(x, ssm, bias) * w), params
    yield "selective_scan_chunked", lambda: nx.tsum(dssm.selective_scan_chunked(x, ssm, bias, chunk=4) * w), params

    D = 4
    blk = dssm.MambaBlockParams.init(D, 2, 3, rng)
    tok = _leaf(rng, (6, D), name="tokens")
    wb = rng.normal(size=(6, D))
    yield "mamba_block", lambda: nx.tsum(dssm.mamba_block_forward(tok, blk) * wb), [tok, *iter_parameters(blk)]

    dyn = dssm.DynamicTransitionState.init(blk.expanded, rng)
    a0 = rng.uniform(0.2, 1.0, blk.expanded)

    def dyn_loss():
        dyn.A_prev = a0.copy()
        return nx.tsum(dssm.mamba_block_forward(tok, blk, dyn, 0.3) * wb)

    yield "mamba_block[dynamic]", dyn_loss, [tok, *iter_parameters(blk), dyn.W_a, dyn.alpha_raw]

    Dg = 8
    gp = gpf.GpfParams.init(Dg, rng)
    for p in (gp.rgb_to_event.w_g, gp.event_to_rgb.w_g):
        p.data = rng.normal(size=(2, 1))
    fe = _leaf(rng, (4, Dg), name="f_event")
    fr = _leaf(rng, (4, Dg), name="f_rgb")
    wg = rng.normal(size=(4, 2 * Dg))
    yield "gpf_forward", lambda: nx.tsum(gpf.gpf_forward(fe, fr, 0.2, gp) * wg), [fe, fr, *iter_parameters(gp)]
    yield "gpf_project", lambda: nx.tsum(gpf.project(fr, gp.rgb_to_event) * wg[:, :Dg]), [fr, *iter_parameters(gp.rgb_to_event)]

    hp = head.HeadParams.init(6, 4, rng)
    feats = _leaf(rng, (16, 6), name="fused")
    gt = BBox(50.0, 70.0, 30.0, 24.0)
    yield "head+total_loss", lambda: head.total_loss(head.head_forward(feats, hp), gt), [feats, *iter_parameters(hp)]

    grid = _leaf(rng, (8, 8, 1), name="grid")
    We = _leaf(rng, (16, 5), name="W_e")
    pos = _leaf(rng, (4, 5), name="pos")
    wp = rng.normal(size=(4, 5))
    yield "patch_embed", lambda: nx.tsum(patch_embed(grid, 4, We, pos) * wp), [grid, We, pos]


def full_case(seed: int = 0):
    """Desk-scale trainer plus a 2-frame clip (frames 1, 2) with frozen transition state."""
    from .model import FrameInputs, image_to_search, make_search
    from .synth import Sequence, SynthConfig, generate
    from .train import Sample, TrainConfig, Trainer

    scfg = SynthConfig(T=4, seed=seed)
    frames, stream, boxes = generate(scfg)
    seq = Sequence("gradcheck", frames, stream, boxes, scfg.frame_interval_us, scfg.exposure_us)
    trainer = Trainer(TrainConfig(seed=seed), [seq])
    mcfg = trainer.model.cfg
    c = trainer.caches[0]
    histories = [dssm.transition_trajectory(d, c.rho) for d in trainer.model.dynamics]
    clip = []
    for t in (1, 2):
        gt = boxes[t]
        around = BBox(gt.cx + 2.0, gt.cy - 1.5, gt.w, gt.h)
        s_rgb, s_ev = make_search(mcfg, frames[t], c.grids[t], around)
        inputs = FrameInputs(c.template_rgb, s_rgb, c.template_event, s_ev, float(c.rho[t]))
        clip.append(Sample(inputs, [h[t].copy() for h in histories], image_to_search(mcfg, gt, around), 0, t))
    return trainer, clip


@contextlib.contextmanager
def corrupted_adjoint(op: str, factor: float = 1.01):
    """Temporarily scale the first input-gradient of ``op``'s adjoint rule."""
    orig = nx.ADJOINTS[op]

    def bad(g, node):
        grads = list(orig(g, node))
        grads[0] = grads[0] * factor if grads[0] is not None else None
        return tuple(grads)

    nx.ADJOINTS[op] = bad
    try:
        yield
    finally:
        nx.ADJOINTS[op] = orig


def gradcheck(scope: str, seed: int = 0, corrupt: str | None = None) -> GradReport:
    """Run the finite-difference suite for ``scope`` in {primitives, blocks, full}."""
    if scope not in ("primitives", "blocks", "full"):
        raise ValueError(f"unknown scope {scope!r}")
    rng = np.random.default_rng(seed)
    report = GradReport(scope)
    t0 = time.perf_counter()
    ctx = corrupted_adjoint(corrupt) if corrupt else contextlib.nullcontext()
    with ctx:
        if scope == "full":
            trainer, clip = full_case(seed)
            errs = nx.check_grads(lambda: trainer.loss(clip), trainer.model.parameters(), max_entries=2,
                                  rng=rng)
            report.errors["full_model[max over tensors]"] = max(errs.values())
            report.tolerances["full_model[max over tensors]"] = COMPOSITE_TOL
            worst = max(errs, key=errs.get)
            report.errors[f"full_model[worst: {worst}]"] = errs[worst]
            report.tolerances[f"full_model[worst: {worst}]"] = COMPOSITE_TOL
        else:
            cases = primitive_cases(rng) if scope == "primitives" else block_cases(rng)
            tol = PRIMITIVE_TOL if scope == "primitives" else COMPOSITE_TOL
            for name, fn, params in cases:
                errs = nx.check_grads(fn, params)
                report.errors[name] = max(errs.values())
                report.tolerances[name] = tol
    report.seconds = time.perf_counter() - t0
    return report
