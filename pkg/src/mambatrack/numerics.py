"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every primitive is a forward function plus an adjoint rule stored in
``ADJOINTS`` under the primitive's name. The backward sweep looks the rule up
at sweep time, which is what lets the gradient checker mutate a single rule
and watch the suite fail.

Broadcasting is deliberately narrow: two operands must either have identical
shapes or the smaller shape must be a suffix of the larger one (bias-like
trailing broadcast, scalars included).
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

DTYPE = np.float64

# op name -> adjoint(grad_out, node) -> tuple of input grads (None = no grad)
ADJOINTS: dict[str, Callable] = {}

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


def adjoint(name: str):
    def register(fn):
        ADJOINTS[name] = fn
        return fn

    return register


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass(eq=False)
class Node:
    """One recorded primitive application on the tape."""

    op: str
    inputs: tuple
    saved: dict = field(default_factory=dict)
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return linear(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], **saved) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), saved)
    return out


def custom_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], **saved) -> Tensor:
    """Record a primitive defined outside this module (its adjoint must be registered)."""
    if op not in ADJOINTS:
        raise KeyError(f"no adjoint registered for {op!r}")
    return _record(op, np.asarray(data, dtype=DTYPE), inputs, **saved)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Grads add into existing ``.grad``; callers zero them between steps. The tape
    is kept, so calling this twice accumulates twice.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tensors: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        tensors.append(t)
        if t.node is not None:
            stack.extend(i for i in t.node.inputs if i.requires_grad)
    interior = sorted((t for t in tensors if t.node is not None), key=lambda t: t.node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in interior:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        in_grads = ADJOINTS[node.op](g, node)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(f"adjoint of {node.op} produced {ig.shape} for input {inp.shape}")
            if inp.node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig
    if loss.node is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


# ----------------------------------------------------------------------------
# elementwise binary ops with trailing broadcast


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {sa} and {sb} are not trailing-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _record("add", a.data + b.data, (a, b))


@adjoint("add")
def _add_adj(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _record("sub", a.data - b.data, (a, b))


@adjoint("sub")
def _sub_adj(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _record("mul", a.data * b.data, (a, b))


@adjoint("mul")
def _mul_adj(g, node):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    return _record("div", a.data / b.data, (a, b))


@adjoint("div")
def _div_adj(g, node):
    a, b = node.inputs
    return (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
    )


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "maximum")
    return _record("maximum", np.maximum(a.data, b.data), (a, b))


@adjoint("maximum")
def _maximum_adj(g, node):
    a, b = node.inputs
    pick_a = a.data >= b.data
    return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "minimum")
    return _record("minimum", np.minimum(a.data, b.data), (a, b))


@adjoint("minimum")
def _minimum_adj(g, node):
    a, b = node.inputs
    pick_a = a.data <= b.data
    return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)


# ----------------------------------------------------------------------------
# elementwise unary ops


def neg(x: Tensor) -> Tensor:
    return _record("neg", -x.data, (x,))


@adjoint("neg")
def _neg_adj(g, node):
    return (-g,)


def exp(x: Tensor) -> Tensor:
    return _record("exp", np.exp(x.data), (x,))


@adjoint("exp")
def _exp_adj(g, node):
    return (g * np.exp(node.inputs[0].data),)


def log(x: Tensor) -> Tensor:
    return _record("log", np.log(x.data), (x,))


@adjoint("log")
def _log_adj(g, node):
    return (g / node.inputs[0].data,)


def square(x: Tensor) -> Tensor:
    return _record("square", x.data * x.data, (x,))


@adjoint("square")
def _square_adj(g, node):
    return (2.0 * g * node.inputs[0].data,)


def tabs(x: Tensor) -> Tensor:
    return _record("abs", np.abs(x.data), (x,))


@adjoint("abs")
def _abs_adj(g, node):
    return (g * np.sign(node.inputs[0].data),)


def clamp_max(x: Tensor, ceiling: float) -> Tensor:
    """min(x, ceiling); no gradient flows through clamped entries."""
    return _record("clamp_max", np.minimum(x.data, ceiling), (x,), ceiling=ceiling)


@adjoint("clamp_max")
def _clamp_max_adj(g, node):
    return (g * (node.inputs[0].data < node.saved["ceiling"]),)


def sigmoid(x: Tensor) -> Tensor:
    return _record("sigmoid", special.expit(x.data), (x,))


@adjoint("sigmoid")
def _sigmoid_adj(g, node):
    s = special.expit(node.inputs[0].data)
    return (g * s * (1.0 - s),)


def silu(x: Tensor) -> Tensor:
    return _record("silu", x.data * special.expit(x.data), (x,))


@adjoint("silu")
def _silu_adj(g, node):
    v = node.inputs[0].data
    s = special.expit(v)
    return (g * s * (1.0 + v * (1.0 - s)),)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    v = x.data
    return _record("gelu", 0.5 * v * (1.0 + special.erf(v * _INV_SQRT2)), (x,))


@adjoint("gelu")
def _gelu_adj(g, node):
    v = node.inputs[0].data
    cdf = 0.5 * (1.0 + special.erf(v * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * v * v)
    return (g * (cdf + v * pdf),)


def softplus(x: Tensor) -> Tensor:
    return _record("softplus", np.logaddexp(0.0, x.data), (x,))


@adjoint("softplus")
def _softplus_adj(g, node):
    return (g * special.expit(node.inputs[0].data),)


_ACTIVATIONS = {"silu": silu, "gelu": gelu, "sigmoid": sigmoid, "softplus": softplus}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# ----------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor, axis=None) -> Tensor:
    return _record("sum", np.asarray(x.data.sum(axis=axis)), (x,), axis=axis)


@adjoint("sum")
def _sum_adj(g, node):
    x = node.inputs[0]
    axis = node.saved["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) * (1.0 / float(n))


def l2norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries; subgradient 0 at the origin."""
    return _record("l2norm", np.asarray(np.sqrt(np.sum(x.data * x.data))), (x,))


@adjoint("l2norm")
def _l2norm_adj(g, node):
    v = node.inputs[0].data
    n = np.sqrt(np.sum(v * v))
    if n == 0.0:
        return (np.zeros_like(v),)
    return (g * v / n,)


def reshape(x: Tensor, shape) -> Tensor:
    return _record("reshape", x.data.reshape(shape), (x,))


@adjoint("reshape")
def _reshape_adj(g, node):
    return (g.reshape(node.inputs[0].shape),)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return _record("transpose", x.data.transpose(axes), (x,), axes=tuple(axes))


@adjoint("transpose")
def _transpose_adj(g, node):
    return (g.transpose(np.argsort(node.saved["axes"])),)


def expand_last(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new trailing axis of length ``n``."""
    data = np.repeat(x.data[..., None], n, axis=-1)
    return _record("expand_last", data, (x,))


@adjoint("expand_last")
def _expand_last_adj(g, node):
    return (g.sum(axis=-1),)


def getitem(x: Tensor, index) -> Tensor:
    return _record("getitem", np.array(x.data[index]), (x,), index=index)


@adjoint("getitem")
def _getitem_adj(g, node):
    out = np.zeros_like(node.inputs[0].data)
    np.add.at(out, node.saved["index"], g)
    return (out,)


def flip(x: Tensor, axis: int = 0) -> Tensor:
    return _record("flip", np.flip(x.data, axis=axis).copy(), (x,), axis=axis)


@adjoint("flip")
def _flip_adj(g, node):
    return (np.flip(g, axis=node.saved["axis"]).copy(),)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    return _record("concat", data, xs, axis=axis, sizes=sizes)


@adjoint("concat")
def _concat_adj(g, node):
    splits = np.cumsum(node.saved["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=node.saved["axis"]))


def stack(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return _record("stack", np.stack([x.data for x in xs]), xs)


@adjoint("stack")
def _stack_adj(g, node):
    return tuple(g[i] for i in range(len(node.inputs)))


# ----------------------------------------------------------------------------
# layers


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W (+ b)`` over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    out = x.data @ W.data
    if b is None:
        return _record("linear", out, (x, W))
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    return _record("linear", out + b.data, (x, W, b))


@adjoint("linear")
def _linear_adj(g, node):
    x, W = node.inputs[:2]
    gx = g @ W.data.T
    gW = x.data.reshape(-1, W.shape[0]).T @ g.reshape(-1, W.shape[1])
    if len(node.inputs) == 2:
        return gx, gW
    return gx, gW, g.reshape(-1, W.shape[1]).sum(axis=0)


def _conv1d_pad(K: int, causal: bool) -> tuple[int, int]:
    if causal:
        return K - 1, 0
    left = (K - 1) // 2
    return left, K - 1 - left


def depthwise_conv1d(x: Tensor, kernel: Tensor, causal: bool = True) -> Tensor:
    """Per-channel 1D convolution along the sequence axis, output length L.

    Causal alignment: ``out[t] = sum_k kernel[k] * x[t - K + 1 + k]``.
    """
    if kernel.ndim != 2 or kernel.shape[0] < 1:
        raise ShapeError(f"depthwise_conv1d: kernel must be [K>=1, D], got {kernel.shape}")
    if x.ndim != 2 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    L = x.shape[0]
    K = kernel.shape[0]
    left, right = _conv1d_pad(K, causal)
    xp = np.pad(x.data, ((left, right), (0, 0)))
    out = np.zeros_like(x.data)
    for k in range(K):
        out += kernel.data[k] * xp[k : k + L]
    return _record("depthwise_conv1d", out, (x, kernel), pad=(left, right))


@adjoint("depthwise_conv1d")
def _dwconv1d_adj(g, node):
    x, kernel = node.inputs
    L, K = x.shape[0], kernel.shape[0]
    left, right = node.saved["pad"]
    xp = np.pad(x.data, ((left, right), (0, 0)))
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(kernel.data)
    for k in range(K):
        gxp[k : k + L] += g * kernel.data[k]
        gk[k] = (g * xp[k : k + L]).sum(axis=0)
    return gxp[left : left + L], gk


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' 2D convolution. x: [H, W, Cin], w: [kh, kw, Cin, Cout] (odd kh, kw)."""
    kh, kw, cin, cout = w.shape
    if x.ndim != 3 or x.shape[2] != cin:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} must be odd")
    H, W_ = x.shape[:2]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((H, W_, cout))
    for i in range(kh):
        for j in range(kw):
            out += xp[i : i + H, j : j + W_] @ w.data[i, j]
    inputs: tuple = (x, w)
    if b is not None:
        out += b.data
        inputs = (x, w, b)
    return _record("conv2d", out, inputs)


@adjoint("conv2d")
def _conv2d_adj(g, node):
    x, w = node.inputs[:2]
    kh, kw, cin, cout = w.shape
    H, W_ = x.shape[:2]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w.data)
    g2 = g.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            gxp[i : i + H, j : j + W_] += g @ w.data[i, j].T
            gw[i, j] = xp[i : i + H, j : j + W_].reshape(-1, cin).T @ g2
    gx = gxp[ph : ph + H, pw : pw + W_]
    if len(node.inputs) == 2:
        return gx, gw
    return gx, gw, g2.sum(axis=0)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs features {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return _record("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), xhat=xhat, rstd=rstd)


@adjoint("layer_norm")
def _layer_norm_adj(g, node):
    x, gamma, _ = node.inputs
    xhat, rstd = node.saved["xhat"], node.saved["rstd"]
    gh = g * gamma.data
    gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    D = x.shape[-1]
    return gx, (g * xhat).reshape(-1, D).sum(axis=0), g.reshape(-1, D).sum(axis=0)


# ----------------------------------------------------------------------------
# gradient checking


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Normwise relative error ``max|a - b| / max(max|a|, max|b|)``."""
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, indices=None, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t`` (all, or the given flat indices)."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    with no_grad():
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            out[k] = (fp - fm) / (2.0 * step)
    return out


def check_grads(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                max_entries: int | None = None, rng: np.random.Generator | None = None,
                floor: float = 1e-12) -> dict[str, float]:
    """Max relative error between recorded and finite-difference gradients, per parameter.

    With ``max_entries`` set, each tensor is probed at its largest-magnitude
    analytic entry plus random others instead of exhaustively.
    """
    for p in params:
        p.zero_grad()
    loss = fn()
    backward(loss)
    report = {}
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat_a = analytic.reshape(-1)
        if max_entries is None or flat_a.size <= max_entries:
            idx = list(range(flat_a.size))
        else:
            rng = rng or np.random.default_rng(0)
            top = int(np.argmax(np.abs(flat_a)))
            rest = rng.choice(flat_a.size, size=max_entries - 1, replace=False)
            idx = sorted({top, *map(int, rest)})
        num = numeric_grad(fn, p, idx, step)
        report[p.name or f"param{k}"] = rel_err(flat_a[idx], num, floor)
    return report
