"""End-to-end training: deterministic batch sampling, AdamW with step decay, checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from . import numerics as nx
from .config import from_flat_dict, load_flat_json
from .dssm import transition_trajectory
from .events import BBox
from .head import LossWeights, total_loss
from .model import FrameInputs, MambaTrack, ModelConfig, image_to_search, make_search, make_template
from .synth import Sequence

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MTCK"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised on a non-finite loss; carries the step index."""

    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    batch_size: int = 4
    weight_decay: float = 1e-4
    lr_decay: float = 0.1
    decay_at: float = 0.75  # fraction of total steps where the lr drops
    steps: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_focal: float = 1.5
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    center_jitter: float = 0.5  # max centre shift, in units of sqrt(w*h)
    scale_jitter: float = 0.15  # max log-scale change of the search window
    log_every: int = 50
    rgb_only: bool = False
    event_only: bool = False
    disable_dssm: bool = False
    disable_gpf: bool = False
    D: int = 64
    N: int = 4
    K: int = 4
    expand: int = 2
    patch: int = 16
    template_size: int = 64
    search_size: int = 128
    blocks: int = 2
    head_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay <= 0:
            raise ValueError("lr and weight_decay must be positive")
        if self.rgb_only and self.event_only:
            raise ValueError("set at most one of rgb_only / event_only")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return load_flat_json(cls, path)

    def model_config(self) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_focal, self.lambda_l1, self.lambda_giou)

    def lr_at(self, step: int) -> float:
        milestone = int(self.decay_at * self.steps)
        return self.lr * (self.lr_decay if step >= milestone else 1.0)


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices/kernels (ndim >= 2)."""

    def __init__(self, params: dict[str, nx.Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            if p.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad * p.grad
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class Sample:
    inputs: FrameInputs
    transition: list[np.ndarray]  # A_prev per event block, frozen for this frame
    gt: BBox  # in search-crop coordinates
    seq_index: int
    frame: int


class SequenceCache:
    """Per-sequence constants the sampler reuses: template crops, surfaces, densities."""

    def __init__(self, seq: Sequence, cfg: ModelConfig):
        self.seq = seq
        self.grids = [s.grid for s in seq.surfaces]
        self.rho = seq.densities
        self.template_rgb, self.template_event = make_template(cfg, seq.frames[0], self.grids[0], seq.boxes[0])


def transition_histories(model: MambaTrack, rho: np.ndarray) -> list[np.ndarray]:
    """Per event block, rows k = A_prev entering frame k: the blend iterated over frames 0..k-1 with current params."""
    model.reset_state()
    return [transition_trajectory(d, rho) for d in model.dynamics]


class Trainer:
    def __init__(self, cfg: TrainConfig, sequences: Seq[Sequence], model: MambaTrack | None = None):
        self.cfg = cfg
        self.model = model or MambaTrack(cfg.model_config())
        self.caches = [SequenceCache(s, self.model.cfg) for s in sequences]
        self.opt = AdamW(self.model.named_parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                         cfg.weight_decay)
        self.step_index = 0
        self.history: list[float] = []

    def sample(self, step: int) -> list[Sample]:
        """The batch for ``step``; depends only on (seed, step), not on training history."""
        cfg = self.cfg
        mcfg = self.model.cfg
        rng = np.random.default_rng([cfg.seed, step])
        histories: dict[int, list[np.ndarray]] = {}
        out = []
        for _ in range(cfg.batch_size):
            si = int(rng.integers(len(self.caches)))
            c = self.caches[si]
            t = int(rng.integers(1, len(c.seq)))
            gt = c.seq.boxes[t]
            s = math.sqrt(gt.w * gt.h)
            shift = rng.uniform(-cfg.center_jitter, cfg.center_jitter, 2) * s
            scale = math.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
            around = BBox(gt.cx + shift[0], gt.cy + shift[1], gt.w * scale, gt.h * scale)
            s_rgb, s_ev = make_search(mcfg, c.seq.frames[t], c.grids[t], around)
            inputs = FrameInputs(c.template_rgb, s_rgb, c.template_event, s_ev, float(c.rho[t]))
            if si not in histories:
                histories[si] = transition_histories(self.model, c.rho)
            out.append(Sample(inputs, [h[t].copy() for h in histories[si]],
                              image_to_search(mcfg, gt, around), si, t))
        return out

    def loss(self, batch: Seq[Sample]) -> nx.Tensor:
        total = None
        weights = self.cfg.loss_weights
        for s in batch:
            self.model.set_transition_state(s.transition)
            out = self.model.forward(s.inputs)
            l = total_loss(out, s.gt, weights, self.model.cfg.search_size)
            total = l if total is None else total + l
        return total * (1.0 / len(batch))

    def train_step(self) -> float:
        step = self.step_index
        self.model.zero_grad()
        loss = self.loss(self.sample(step))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(step, f"non-finite loss {value}")
        nx.backward(loss)
        self.opt.step(self.cfg.lr_at(step))
        self.history.append(value)
        self.step_index += 1
        if self.cfg.log_every and step % self.cfg.log_every == 0:
            log.info("step %d loss %.5f lr %.2e", step, value, self.cfg.lr_at(step))
        return value

    def run(self, steps: int | None = None) -> list[float]:
        n = self.cfg.steps - self.step_index if steps is None else steps
        for _ in range(n):
            self.train_step()
        return self.history


def train(cfg: TrainConfig, sequences: Seq[Sequence]) -> Trainer:
    trainer = Trainer(cfg, sequences)
    trainer.run()
    return trainer


# ----------------------------------------------------------------------------
# checkpoints: MTCK, u32 version, u32 count, {u32 len, name, u32 ndim, u64 dims, f64 data}*


def _pack(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    raw = name.encode()
    return (struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes())


def checkpoint_tensors(trainer: Trainer) -> dict[str, np.ndarray]:
    """Flat name -> array view of model params, optimizer moments, step and config (UTF-8 codes)."""
    tensors = {}
    for k, p in trainer.model.named_parameters().items():
        tensors["param/" + k] = p.data
    for k in trainer.opt.m:
        tensors["adam_m/" + k] = trainer.opt.m[k]
        tensors["adam_v/" + k] = trainer.opt.v[k]
    tensors["meta/step"] = np.array(float(trainer.step_index))
    tensors["meta/adam_t"] = np.array(float(trainer.opt.t))
    cfg_json = json.dumps(dataclasses.asdict(trainer.cfg), sort_keys=True).encode()
    tensors["meta/config"] = np.frombuffer(cfg_json, dtype=np.uint8).astype(np.float64)
    return tensors


def save_checkpoint(path, trainer: Trainer) -> None:
    tensors = checkpoint_tensors(trainer)
    body = b"".join(_pack(k, v) for k, v in tensors.items())
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(tensors)) + body)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise IOError(f"{path}: not an MTCK checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise IOError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4: off + 4 + n].decode()
            off += 4 + n
            (ndim,) = struct.unpack_from("<I", raw, off)
            dims = struct.unpack_from(f"<{ndim}Q", raw, off + 4)
            off += 4 + 8 * ndim
            size = int(np.prod(dims)) if ndim else 1
            out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
            off += 8 * size
    except (struct.error, ValueError) as exc:
        raise IOError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(raw):
        raise IOError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def load_checkpoint(path, sequences: Seq[Sequence] = ()) -> Trainer:
    """Rebuild a Trainer (model, optimizer moments, step) from ``path``."""
    t = read_checkpoint(path)
    cfg_json = t["meta/config"].astype(np.uint8).tobytes().decode()
    cfg = from_flat_dict(TrainConfig, json.loads(cfg_json))
    trainer = Trainer(cfg, sequences)
    trainer.model.load_state_dict({k[6:]: v for k, v in t.items() if k.startswith("param/")})
    for k in trainer.opt.m:
        trainer.opt.m[k] = t["adam_m/" + k].copy()
        trainer.opt.v[k] = t["adam_v/" + k].copy()
    trainer.step_index = int(t["meta/step"])
    trainer.opt.t = int(t["meta/adam_t"])
    return trainer
