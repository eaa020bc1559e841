"""Synthetic RGB + event sequences: a textured bright box drifting over a dark scene.

Events come from thresholded log-brightness changes between consecutive
noise-free renders, with timestamps spread uniformly over the interval.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import load_flat_json
from .events import (BBox, EventStream, TimeSurface, read_events, read_frames, read_groundtruth, voxelize,
                     write_events, write_frames, write_groundtruth)

log = logging.getLogger(__name__)

MOTIONS = ("linear", "sinusoidal", "random-walk")


@dataclass(frozen=True)
class SynthConfig:
    H: int = 96
    W: int = 96
    T: int = 200
    size_min: float = 14.0
    size_max: float = 22.0
    motion: str = "sinusoidal"
    speed: float = 1.5  # peak px / frame
    events_per_pixel: int = 2
    noise_rate: float = 0.002  # background events per pixel per frame interval
    contrast_threshold: float = 0.15  # log-intensity change that fires events
    illumination: float = 1.0
    frame_noise: float = 0.02  # std of additive RGB sensor noise
    frame_interval_us: int = 10_000
    exposure_us: int = 10_000
    seed: int = 42

    def __post_init__(self):
        if self.H < 16 or self.W < 16:
            raise ValueError("frames must be at least 16x16")
        if self.T < 2:
            raise ValueError("need at least two frames")
        if not 0 < self.size_min <= self.size_max:
            raise ValueError("invalid target size range")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if self.frame_interval_us <= 0 or self.exposure_us <= 0:
            raise ValueError("frame interval and exposure must be positive")

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return load_flat_json(cls, path)


def _trajectory(cfg: SynthConfig, rng: np.random.Generator, w: float, h: float) -> np.ndarray:
    T = cfg.T
    lo = np.array([w / 2, h / 2])
    hi = np.array([cfg.W - w / 2, cfg.H - h / 2])
    mid = (lo + hi) / 2
    amp = (hi - lo) / 2 * 0.8
    t = np.arange(T, dtype=float)
    if cfg.motion == "linear":
        theta = rng.uniform(0, 2 * np.pi)
        start = mid + rng.uniform(-0.3, 0.3, 2) * amp
        pos = start + cfg.speed * t[:, None] * np.array([math.cos(theta), math.sin(theta)])
    elif cfg.motion == "sinusoidal":
        ratio = np.array([1.0, rng.uniform(0.55, 0.8)])
        phase = rng.uniform(0, 2 * np.pi, 2)
        # peak speed along x equals cfg.speed
        omega = cfg.speed / max(amp[0], 1e-9) * ratio
        pos = mid + amp * np.sin(omega * t[:, None] + phase)
    else:
        vel = np.zeros(2)
        pos = np.empty((T, 2))
        pos[0] = mid
        for i in range(1, T):
            vel = 0.9 * vel + rng.normal(0, cfg.speed * 0.45, 2)
            pos[i] = pos[i - 1] + vel
    clamped = np.clip(pos, lo, hi)
    if not np.allclose(clamped, pos):
        warnings.warn("target trajectory left the frame and was clamped", RuntimeWarning, stacklevel=3)
    return clamped


def _coverage(n: int, a: float, b: float) -> np.ndarray:
    """Fraction of each unit pixel [k, k+1) covered by the interval [a, b]."""
    k = np.arange(n, dtype=float)
    return np.clip(np.minimum(k + 1, b) - np.maximum(k, a), 0.0, 1.0)


@dataclass
class _Scene:
    background: np.ndarray  # [H, W, 3]
    texture: np.ndarray  # [th, tw, 3] target appearance, sampled by nearest neighbour
    w: float
    h: float


def _render(scene: _Scene, cx: float, cy: float, H: int, W: int) -> np.ndarray:
    x1, y1 = cx - scene.w / 2, cy - scene.h / 2
    cov = _coverage(H, y1, y1 + scene.h)[:, None] * _coverage(W, x1, x1 + scene.w)[None, :]
    th, tw = scene.texture.shape[:2]
    u = np.clip(((np.arange(W) + 0.5 - x1) / scene.w * tw).astype(int), 0, tw - 1)
    v = np.clip(((np.arange(H) + 0.5 - y1) / scene.h * th).astype(int), 0, th - 1)
    tex = scene.texture[v][:, u]
    return scene.background * (1 - cov[..., None]) + tex * cov[..., None]


def generate(cfg: SynthConfig):
    """Return (frames [T,H,W,3], EventStream, list[BBox]) for ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    w, h = rng.uniform(cfg.size_min, cfg.size_max, 2)
    base = rng.uniform(0.0, 0.15, (4, 4, 3))
    bg = np.kron(base, np.ones((math.ceil(cfg.H / 4), math.ceil(cfg.W / 4), 1)))[: cfg.H, : cfg.W]
    color = rng.uniform(0.6, 1.0, 3)
    checker = (np.indices((4, 4)).sum(axis=0) % 2)[..., None]
    texture = color * (0.75 + 0.25 * checker)
    scene = _Scene(bg, texture, float(w), float(h))
    centers = _trajectory(cfg, rng, w, h)

    clean = np.stack([_render(scene, cx, cy, cfg.H, cfg.W) for cx, cy in centers]) * cfg.illumination
    frames = np.clip(clean + rng.normal(0, cfg.frame_noise, clean.shape), 0.0, None)

    logI = np.log(clean.mean(axis=-1) + 1e-3)
    cols: list[list[np.ndarray]] = [[], [], [], []]
    dt = cfg.frame_interval_us
    for i in range(1, cfg.T):
        change = logI[i] - logI[i - 1]
        ys, xs = np.nonzero(np.abs(change) > cfg.contrast_threshold)
        pol = np.sign(change[ys, xs]).astype(np.int64)
        k = cfg.events_per_pixel
        ex, ey, ep = np.repeat(xs, k), np.repeat(ys, k), np.repeat(pol, k)
        n_noise = rng.poisson(cfg.noise_rate * cfg.H * cfg.W)
        ex = np.concatenate([ex, rng.integers(0, cfg.W, n_noise)])
        ey = np.concatenate([ey, rng.integers(0, cfg.H, n_noise)])
        ep = np.concatenate([ep, rng.choice(np.array([-1, 1]), n_noise)])
        et = (i - 1) * dt + 1 + rng.integers(0, dt, len(ex))
        order = np.argsort(et, kind="stable")
        for c, arr in zip(cols, (ex, ey, et, ep)):
            c.append(arr[order])
    x, y, t, p = (np.concatenate(c) if c else np.zeros(0, np.int64) for c in cols)
    stream = EventStream(x, y, t, p, cfg.H, cfg.W)
    boxes = [BBox(float(cx), float(cy), float(w), float(h)) for cx, cy in centers]
    return frames, stream, boxes


def synth_sequence(cfg: SynthConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames, stream, boxes = generate(cfg)
    write_frames(out / "frames.frm", frames)
    write_events(out / "events.evt", stream)
    write_groundtruth(out / "groundtruth.txt", boxes)
    meta = {"frame_interval_us": cfg.frame_interval_us, "exposure_us": cfg.exposure_us, "config": asdict(cfg)}
    (out / "sequence.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d frames, %d events to %s", cfg.T, len(stream), out)
    return out


@dataclass
class Sequence:
    name: str
    frames: np.ndarray  # [T, H, W, C]
    events: EventStream
    boxes: list[BBox]
    frame_interval_us: int
    exposure_us: int
    _surfaces: list[TimeSurface] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    def frame_time(self, i: int) -> int:
        return i * self.frame_interval_us

    @property
    def surfaces(self) -> list[TimeSurface]:
        if self._surfaces is None:
            self._surfaces = [voxelize(self.events, self.frame_time(i), self.exposure_us)
                              for i in range(len(self))]
        return self._surfaces

    @property
    def densities(self) -> np.ndarray:
        return np.array([s.density for s in self.surfaces])


def load_sequence(path) -> Sequence:
    path = Path(path)
    meta = json.loads((path / "sequence.json").read_text())
    frames = read_frames(path / "frames.frm")
    T, H, W, _ = frames.shape
    events = read_events(path / "events.evt", H, W)
    gt_path = path / "groundtruth.txt"
    if not gt_path.exists():
        raise FileNotFoundError(f"{path}: missing groundtruth.txt")
    boxes = read_groundtruth(gt_path)
    if len(boxes) != T:
        raise ValueError(f"{path}: {len(boxes)} ground-truth boxes for {T} frames")
    return Sequence(path.name, frames, events, boxes, int(meta["frame_interval_us"]), int(meta["exposure_us"]))


def find_sequences(root) -> list[Path]:
    """``root`` itself if it is a sequence directory, else its sequence subdirectories (sorted)."""
    root = Path(root)
    if (root / "frames.frm").exists():
        return [root]
    found = sorted(p for p in root.iterdir() if (p / "frames.frm").exists()) if root.is_dir() else []
    if not found:
        raise FileNotFoundError(f"no sequences under {root}")
    return found
