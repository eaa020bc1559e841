"""The two-branch tracker: RGB (static SSM) and event (density-adaptive SSM) backbones, fusion, head."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .dssm import DynamicTransitionState, MambaBlockParams, dynamic_transition_update, mamba_block_forward
from .events import BBox, crop_patch, crop_window, patch_embed
from .gpf import GpfParams, gpf_forward
from .head import HeadParams, TrackOutput, head_forward
from .numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    D: int = 64
    N: int = 4
    K: int = 4
    expand: int = 2
    patch: int = 16
    template_size: int = 64
    search_size: int = 128
    template_factor: float = 2.0
    search_factor: float = 4.0
    blocks: int = 2
    head_hidden: int = 32
    rgb_channels: int = 3
    rgb_only: bool = False
    event_only: bool = False
    disable_dssm: bool = False
    disable_gpf: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rgb_only and self.event_only:
            raise ValueError("rgb_only and event_only are mutually exclusive")
        for s in (self.template_size, self.search_size):
            if s % self.patch:
                raise ValueError(f"patch {self.patch} does not divide crop size {s}")

    @property
    def E(self) -> int:
        return self.expand * self.D

    @property
    def search_grid(self) -> int:
        return self.search_size // self.patch

    @property
    def template_tokens(self) -> int:
        return (self.template_size // self.patch) ** 2


@dataclass
class BranchParams:
    W_embed: Tensor
    pos_template: Tensor
    pos_search: Tensor
    blocks: list[MambaBlockParams]
    final_gamma: Tensor
    final_beta: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, channels: int, rng: np.random.Generator, prefix: str) -> "BranchParams":
        fan_in = cfg.patch * cfg.patch * channels
        D = cfg.D
        return cls(
            W_embed=nx.parameter(rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, D)), prefix + "W_embed"),
            pos_template=nx.parameter(rng.normal(0, 0.02, (cfg.template_tokens, D)), prefix + "pos_template"),
            pos_search=nx.parameter(rng.normal(0, 0.02, (cfg.search_grid ** 2, D)), prefix + "pos_search"),
            blocks=[MambaBlockParams.init(D, cfg.N, cfg.K, rng, f"{prefix}block{i}.", cfg.expand)
                    for i in range(cfg.blocks)],
            final_gamma=nx.parameter(np.ones(D), prefix + "final_gamma"),
            final_beta=nx.parameter(np.zeros(D), prefix + "final_beta"),
        )


@dataclass
class FrameInputs:
    template_rgb: np.ndarray  # [St, St, C]
    search_rgb: np.ndarray  # [Ss, Ss, C]
    template_event: np.ndarray  # [St, St]
    search_event: np.ndarray  # [Ss, Ss]
    rho: float


def iter_parameters(obj, seen: set[int] | None = None) -> Iterator[Tensor]:
    """Walk dataclasses / lists depth-first, yielding each trainable Tensor once."""
    seen = set() if seen is None else seen
    if isinstance(obj, Tensor):
        if obj.requires_grad and id(obj) not in seen:
            seen.add(id(obj))
            yield obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from iter_parameters(getattr(obj, f.name), seen)
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from iter_parameters(item, seen)


class MambaTrack:
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.rgb = BranchParams.init(cfg, cfg.rgb_channels, rng, "rgb.")
        self.event = BranchParams.init(cfg, 1, rng, "event.")
        self.dynamics = [DynamicTransitionState.init(cfg.E, rng, f"event.block{i}.")
                         for i in range(cfg.blocks)]
        self.gpf = GpfParams.init(cfg.D, rng, "gpf.")
        self.head = HeadParams.init(2 * cfg.D, cfg.head_hidden, rng, "head.")

    # parameters -------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(iter_parameters([self.rgb, self.event, self.dynamics, self.gpf, self.head]))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # transition state -------------------------------------------------------

    @property
    def uses_dssm(self) -> bool:
        return not self.cfg.disable_dssm

    def reset_state(self) -> None:
        for d in self.dynamics:
            d.reset()

    def transition_state(self) -> list[np.ndarray]:
        return [d.A_prev.copy() for d in self.dynamics]

    def set_transition_state(self, state: list[np.ndarray]) -> None:
        for d, a in zip(self.dynamics, state):
            d.A_prev = np.array(a, dtype=np.float64)

    def advance_state(self, rho: float) -> None:
        """Apply one frame's transition update without running the network."""
        if not self.uses_dssm:
            return
        with nx.no_grad():
            for d in self.dynamics:
                dynamic_transition_update(d, rho)

    # forward ----------------------------------------------------------------

    def _branch(self, p: BranchParams, template: np.ndarray, search: np.ndarray,
                dyn: list[DynamicTransitionState] | None, rho: float | None) -> Tensor:
        cfg = self.cfg
        t_tok = patch_embed(nx.Tensor(template), cfg.patch, p.W_embed, p.pos_template)
        s_tok = patch_embed(nx.Tensor(search), cfg.patch, p.W_embed, p.pos_search)
        x = nx.concat([t_tok, s_tok], axis=0)
        for i, blk in enumerate(p.blocks):
            x = mamba_block_forward(x, blk, dyn[i] if dyn else None, rho)
        x = nx.layer_norm(x, p.final_gamma, p.final_beta)
        return x[cfg.template_tokens:]

    def fused_features(self, f: FrameInputs) -> Tensor:
        cfg = self.cfg
        rho = f.rho
        t_rgb, s_rgb = f.template_rgb, f.search_rgb
        t_ev, s_ev = f.template_event, f.search_event
        if cfg.rgb_only:
            t_ev, s_ev, rho = np.zeros_like(t_ev), np.zeros_like(s_ev), 0.0
        if cfg.event_only:
            t_rgb, s_rgb = np.zeros_like(t_rgb), np.zeros_like(s_rgb)
        f_rgb = self._branch(self.rgb, t_rgb, s_rgb, None, None)
        dyn = self.dynamics if self.uses_dssm else None
        f_event = self._branch(self.event, t_ev, s_ev, dyn, rho)
        if cfg.disable_gpf:
            return nx.concat([f_event, f_rgb], axis=1)
        return gpf_forward(f_event, f_rgb, rho, self.gpf)

    def forward(self, f: FrameInputs) -> TrackOutput:
        return head_forward(self.fused_features(f), self.head)


# ----------------------------------------------------------------------------
# crops and coordinate maps


def make_template(cfg: ModelConfig, frame: np.ndarray, surface: np.ndarray, box: BBox):
    return (crop_patch(frame, box, cfg.template_factor, cfg.template_size),
            crop_patch(surface, box, cfg.template_factor, cfg.template_size))


def make_search(cfg: ModelConfig, frame: np.ndarray, surface: np.ndarray, around: BBox):
    return (crop_patch(frame, around, cfg.search_factor, cfg.search_size),
            crop_patch(surface, around, cfg.search_factor, cfg.search_size))


def image_to_search(cfg: ModelConfig, box: BBox, around: BBox) -> BBox:
    x0, y0, side = crop_window(around, cfg.search_factor)
    s = cfg.search_size / side
    return BBox((box.cx - x0) * s, (box.cy - y0) * s, box.w * s, box.h * s)


def search_to_image(cfg: ModelConfig, box: BBox, around: BBox) -> BBox:
    x0, y0, side = crop_window(around, cfg.search_factor)
    s = side / cfg.search_size
    return BBox(x0 + box.cx * s, y0 + box.cy * s, box.w * s, box.h * s)
