"""Frame-by-frame tracking, metric aggregation and the component ablation matrix."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Sequence as Seq

import numpy as np

from . import numerics as nx
from .events import BBox
from .head import decode_bbox, metrics
from .model import FrameInputs, MambaTrack, make_search, make_template, search_to_image
from .synth import Sequence
from .train import TrainConfig, Trainer

log = logging.getLogger(__name__)

MIN_BOX = 2.0

# (label, config overrides): rows of the component ablation, "#1 no RGB" .. "#5 full"
ABLATIONS: tuple[tuple[str, dict], ...] = (
    ("#1 no-rgb", {"event_only": True}),
    ("#2 no-event", {"rgb_only": True}),
    ("#3 no-dssm", {"disable_dssm": True}),
    ("#4 no-gpf", {"disable_gpf": True}),
    ("#5 full", {}),
)


def _clamp_box(b: BBox, H: int, W: int) -> BBox:
    return BBox(float(np.clip(b.cx, 0, W)), float(np.clip(b.cy, 0, H)),
                float(np.clip(b.w, MIN_BOX, W)), float(np.clip(b.h, MIN_BOX, H)))


def track_sequence(model: MambaTrack, seq: Sequence,
                   oracle: Callable[[int], BBox] | None = None) -> list[BBox]:
    """Predicted boxes for frames 1..T-1.

    The template comes from frame 0's ground truth; each search window is
    centred on the previous prediction. ``oracle`` replaces the network's
    prediction for frame t (used to sanity-check the metric path).
    """
    cfg = model.cfg
    grids = [s.grid for s in seq.surfaces]
    rho = seq.densities
    t_rgb, t_ev = make_template(cfg, seq.frames[0], grids[0], seq.boxes[0])
    H, W = seq.frames.shape[1:3]
    model.reset_state()
    model.advance_state(float(rho[0]))
    prev = seq.boxes[0]
    preds = []
    with nx.no_grad():
        for t in range(1, len(seq)):
            if oracle is not None:
                box = oracle(t)
                model.advance_state(float(rho[t]))
            else:
                s_rgb, s_ev = make_search(cfg, seq.frames[t], grids[t], prev)
                out = model.forward(FrameInputs(t_rgb, s_rgb, t_ev, s_ev, float(rho[t])))
                box = _clamp_box(search_to_image(cfg, decode_bbox(out, cfg.search_size), prev), H, W)
            preds.append(box)
            prev = box
    return preds


@dataclass
class Report:
    per_sequence: dict[str, dict]
    overall: dict


def evaluate(model: MambaTrack, sequences: Seq[Sequence], sr_mode: str = "auc", oracle: bool = False) -> Report:
    per_seq = {}
    all_p, all_g = [], []
    for seq in sequences:
        if not seq.boxes:
            raise ValueError(f"{seq.name}: missing ground truth")
        preds = track_sequence(model, seq, (lambda t, s=seq: s.boxes[t]) if oracle else None)
        gts = seq.boxes[1:]
        per_seq[seq.name] = metrics(preds, gts, sr_mode)
        all_p += preds
        all_g += gts
    return Report(per_seq, metrics(all_p, all_g, sr_mode))


def run_ablations(base: TrainConfig, sequences: Seq[Sequence], sr_mode: str = "auc",
                  rows: Seq[tuple[str, dict]] = ABLATIONS) -> dict[str, Report]:
    """Train and evaluate one model per ablation row on the same data and seed."""
    reports = {}
    for label, overrides in rows:
        cfg = dataclasses.replace(base, **overrides)
        trainer = Trainer(cfg, sequences)
        trainer.run()
        reports[label] = evaluate(trainer.model, sequences, sr_mode)
        log.info("%s mean IoU %.3f", label, reports[label].overall["mean_iou"])
    return reports
