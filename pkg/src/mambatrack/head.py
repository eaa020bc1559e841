"""Center-based tracking head, target encoding, joint loss and tracking metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .events import BBox
from .numerics import Tensor

SCORE_PRIOR_BIAS = -2.19  # sigmoid(-2.19) ~ 0.1


@dataclass(frozen=True)
class LossWeights:
    lambda_focal: float = 1.5
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        if min(self.lambda_focal, self.lambda_l1, self.lambda_giou) <= 0:
            raise ValueError("loss weights must be strictly positive")


@dataclass
class BranchParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w_out: Tensor  # 1x1 conv as [1, 1, hidden, out]
    b_out: Tensor

    @classmethod
    def init(cls, cin: int, hidden: int, cout: int, rng: np.random.Generator, prefix: str,
             out_bias: float = 0.0) -> "BranchParams":
        return cls(
            w1=nx.parameter(rng.normal(0, 1 / math.sqrt(9 * cin), (3, 3, cin, hidden)), prefix + "w1"),
            b1=nx.parameter(np.zeros(hidden), prefix + "b1"),
            w2=nx.parameter(rng.normal(0, 1 / math.sqrt(9 * hidden), (3, 3, hidden, hidden)), prefix + "w2"),
            b2=nx.parameter(np.zeros(hidden), prefix + "b2"),
            w_out=nx.parameter(rng.normal(0, 0.1 / math.sqrt(hidden), (1, 1, hidden, cout)), prefix + "w_out"),
            b_out=nx.parameter(np.full(cout, out_bias), prefix + "b_out"),
        )

    def __call__(self, x: Tensor) -> Tensor:
        x = nx.silu(nx.conv2d(x, self.w1, self.b1))
        x = nx.silu(nx.conv2d(x, self.w2, self.b2))
        return nx.conv2d(x, self.w_out, self.b_out)


@dataclass
class HeadParams:
    score: BranchParams
    size: BranchParams
    offset: BranchParams

    @classmethod
    def init(cls, cin: int, hidden: int, rng: np.random.Generator, prefix: str = "head.") -> "HeadParams":
        return cls(
            score=BranchParams.init(cin, hidden, 1, rng, prefix + "score.", out_bias=SCORE_PRIOR_BIAS),
            size=BranchParams.init(cin, hidden, 2, rng, prefix + "size."),
            offset=BranchParams.init(cin, hidden, 2, rng, prefix + "offset."),
        )


@dataclass
class TrackOutput:
    score_logits: Tensor  # [Hs, Ws]
    size: Tensor  # [Hs, Ws, 2] (w, h) / search_size
    offset: Tensor  # [Hs, Ws, 2] (x, y) within the cell

    @property
    def score(self) -> Tensor:
        return nx.sigmoid(self.score_logits)

    @property
    def grid(self) -> int:
        return self.score_logits.shape[0]


def head_forward(fused: Tensor, params: HeadParams) -> TrackOutput:
    L, C = fused.shape
    side = math.isqrt(L)
    if side * side != L:
        raise ValueError(f"{L} tokens do not form a square grid")
    x = nx.reshape(fused, (side, side, C))
    score = nx.reshape(params.score(x), (side, side))
    return TrackOutput(score, nx.sigmoid(params.size(x)), nx.sigmoid(params.offset(x)))


def decode_bbox(out: TrackOutput, search_size: int) -> BBox:
    score = out.score_logits.data  # sigmoid is monotone, argmax is shared
    Hs, Ws = score.shape
    i, j = divmod(int(np.argmax(score)), Ws)
    stride = search_size / Ws
    off = out.offset.data[i, j]
    size = out.size.data[i, j]
    return BBox((j + off[0]) * stride, (i + off[1]) * stride,
                max(size[0] * search_size, 1e-6), max(size[1] * search_size, 1e-6))


# ----------------------------------------------------------------------------
# target encoding


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest corner shift keeping IoU >= min_overlap (the three-case CenterNet rule)."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


@dataclass
class Targets:
    heatmap: np.ndarray  # [Hs, Ws], exactly one cell == 1
    cell: tuple[int, int]  # (row, col) of the gt centre
    offset: np.ndarray  # (x, y) in [0, 1)
    size: np.ndarray  # (w, h) / search_size
    box_norm: np.ndarray  # (cx, cy, w, h) / search_size


def encode_targets(gt: BBox, search_size: int, grid: int) -> Targets:
    if not (0 <= gt.cx < search_size and 0 <= gt.cy < search_size):
        raise ValueError(f"ground-truth centre ({gt.cx:.2f}, {gt.cy:.2f}) outside the {search_size}px search region")
    stride = search_size / grid
    fx, fy = gt.cx / stride, gt.cy / stride
    j, i = min(int(fx), grid - 1), min(int(fy), grid - 1)
    radius = max(0.0, gaussian_radius(gt.h / stride, gt.w / stride))
    sigma = (2 * int(radius) + 1) / 6.0
    yy, xx = np.mgrid[0:grid, 0:grid]
    heat = np.exp(-((xx - j) ** 2 + (yy - i) ** 2) / (2 * sigma * sigma))
    heat[heat < np.finfo(float).eps * heat.max()] = 0.0
    heat[i, j] = 1.0
    return Targets(
        heatmap=heat,
        cell=(i, j),
        offset=np.array([fx - j, fy - i]),
        size=np.array([gt.w, gt.h]) / search_size,
        box_norm=gt.as_array() / search_size,
    )


# ----------------------------------------------------------------------------
# losses


def _focal_terms(log_p: Tensor, log_1mp: Tensor, p: Tensor, target: np.ndarray) -> Tensor:
    pos = target == 1.0
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("focal target has no positive cell")
    pos_w = pos.astype(float)
    neg_w = np.where(pos, 0.0, (1.0 - target) ** 4)
    one_m_p = 1.0 - p
    pos_term = nx.square(one_m_p) * log_p * pos_w
    neg_term = nx.square(p) * log_1mp * neg_w
    return nx.neg(nx.tsum(pos_term + neg_term)) * (1.0 / n_pos)


def focal_loss(score: Tensor, target: np.ndarray) -> Tensor:
    """Gaussian-penalty focal loss on probabilities in (0, 1)."""
    score = nx.as_tensor(score)
    return _focal_terms(nx.log(score), nx.log(1.0 - score), score, np.asarray(target))


def focal_loss_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Same loss computed from logits with log-sigmoid for stability."""
    p = nx.sigmoid(logits)
    return _focal_terms(nx.neg(nx.softplus(nx.neg(logits))), nx.neg(nx.softplus(logits)), p, np.asarray(target))


def _box_tensor(b) -> Tensor:
    if isinstance(b, BBox):
        return Tensor(b.as_array())
    return nx.as_tensor(b)


def giou_loss(pred, gt) -> Tensor:
    """``1 - GIoU`` for (cx, cy, w, h) boxes given as BBox or length-4 tensors."""
    p, g = _box_tensor(pred), _box_tensor(gt)
    if np.any(p.data[2:] <= 0) or np.any(g.data[2:] <= 0):
        raise ValueError("giou_loss needs boxes with positive width and height")
    pcx, pcy, pw, ph = (p[k] for k in range(4))
    gcx, gcy, gw, gh = (g[k] for k in range(4))
    px1, px2, py1, py2 = pcx - pw * 0.5, pcx + pw * 0.5, pcy - ph * 0.5, pcy + ph * 0.5
    gx1, gx2, gy1, gy2 = gcx - gw * 0.5, gcx + gw * 0.5, gcy - gh * 0.5, gcy + gh * 0.5
    zero = Tensor(0.0)
    iw = nx.maximum(nx.minimum(px2, gx2) - nx.maximum(px1, gx1), zero)
    ih = nx.maximum(nx.minimum(py2, gy2) - nx.maximum(py1, gy1), zero)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    enclose = (nx.maximum(px2, gx2) - nx.minimum(px1, gx1)) * (nx.maximum(py2, gy2) - nx.minimum(py1, gy1))
    giou = inter / union - (enclose - union) / enclose
    return 1.0 - giou


def l1_loss(pred, gt) -> Tensor:
    return nx.mean(nx.tabs(_box_tensor(pred) - _box_tensor(gt)))


def predicted_box_at(out: TrackOutput, cell: tuple[int, int]) -> Tensor:
    """Normalised (cx, cy, w, h) read from the maps at ``cell``."""
    i, j = cell
    G = out.grid
    off = out.offset[i, j]
    size = out.size[i, j]
    cx = (off[0] + float(j)) * (1.0 / G)
    cy = (off[1] + float(i)) * (1.0 / G)
    return nx.stack([cx, cy, size[0], size[1]])


def loss_terms(out: TrackOutput, gt: BBox, search_size: int) -> dict[str, Tensor]:
    tg = encode_targets(gt, search_size, out.grid)
    box = predicted_box_at(out, tg.cell)
    return {
        "focal": focal_loss_logits(out.score_logits, tg.heatmap),
        "l1": l1_loss(box, tg.box_norm),
        "giou": giou_loss(box, tg.box_norm),
    }


def total_loss(out: TrackOutput, gt: BBox, weights: LossWeights = LossWeights(),
               search_size: int = 128) -> Tensor:
    t = loss_terms(out, gt, search_size)
    return t["focal"] * weights.lambda_focal + t["l1"] * weights.lambda_l1 + t["giou"] * weights.lambda_giou


# ----------------------------------------------------------------------------
# metrics

IOU_THRESHOLDS = np.linspace(0.0, 1.0, 21)
NORM_THRESHOLDS = np.linspace(0.0, 0.5, 11)
PRECISION_PX = 20.0


def _corners(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = boxes.T
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


IOU_SLACK = 1e-9


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of (cx, cy, w, h) arrays."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    ca, cb = _corners(a), _corners(b)
    iw = np.clip(np.minimum(ca[:, 2], cb[:, 2]) - np.maximum(ca[:, 0], cb[:, 0]), 0, None)
    ih = np.clip(np.minimum(ca[:, 3], cb[:, 3]) - np.maximum(ca[:, 1], cb[:, 1]), 0, None)
    inter = iw * ih
    return np.clip(inter / (a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter), 0.0, 1.0)


def metrics(preds: Sequence[BBox], gts: Sequence[BBox], sr_mode: str = "auc") -> dict[str, float]:
    """SR / PR / NPR in percent.

    SR (auc): mean over 21 IoU thresholds in [0, 1] of the fraction of frames
    with ``0 < IoU >= threshold``; SR (t50): fraction with IoU > 0.5.
    PR: fraction with centre error <= 20 px. NPR: mean over thresholds
    0..0.5 of the fraction with centre error / sqrt(w_gt * h_gt) <= threshold.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground-truth boxes")
    if not preds:
        raise ValueError("no frames to score")
    p = np.array([b.as_array() for b in preds])
    g = np.array([b.as_array() for b in gts])
    ov = iou(p, g)
    err = np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])
    nerr = err / np.sqrt(g[:, 2] * g[:, 3])
    if sr_mode == "auc":
        # slack absorbs corner round-off so identical boxes reach the 1.0 threshold
        success = np.mean([np.mean((ov > 0) & (ov >= th - IOU_SLACK)) for th in IOU_THRESHOLDS])
    elif sr_mode == "t50":
        success = np.mean(ov > 0.5)
    else:
        raise ValueError(f"unknown sr_mode {sr_mode!r}")
    return {
        "SR": 100.0 * float(success),
        "PR": 100.0 * float(np.mean(err <= PRECISION_PX)),
        "NPR": 100.0 * float(np.mean([np.mean(nerr <= th) for th in NORM_THRESHOLDS])),
        "mean_iou": float(np.mean(ov)),
        "frames": len(preds),
    }


def format_report(m: dict[str, float]) -> str:
    return f"SR {m['SR']:.1f} PR {m['PR']:.1f} NPR {m['NPR']:.1f}"
