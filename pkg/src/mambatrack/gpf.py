"""Gated projection fusion of event and RGB search-region tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class ProjectionParams:
    W1: Tensor  # [D, D]
    b1: Tensor  # [D]
    W2: Tensor  # [D, D]
    b2: Tensor  # [D]
    w_g: Tensor  # [2, 1] weights on (density, confidence)

    @classmethod
    def init(cls, D: int, rng: np.random.Generator, prefix: str = "") -> "ProjectionParams":
        return cls(
            W1=nx.parameter(rng.normal(0, 1 / math.sqrt(D), (D, D)), prefix + "W1"),
            b1=nx.parameter(np.zeros(D), prefix + "b1"),
            W2=nx.parameter(rng.normal(0, 0.5 / math.sqrt(D), (D, D)), prefix + "W2"),
            b2=nx.parameter(np.zeros(D), prefix + "b2"),
            w_g=nx.parameter(np.zeros((2, 1)), prefix + "w_g"),
        )


@dataclass
class GpfParams:
    rgb_to_event: ProjectionParams
    event_to_rgb: ProjectionParams

    @classmethod
    def init(cls, D: int, rng: np.random.Generator, prefix: str = "") -> "GpfParams":
        return cls(ProjectionParams.init(D, rng, prefix + "rgb_to_event."),
                   ProjectionParams.init(D, rng, prefix + "event_to_rgb."))


def project(f_src: Tensor, p: ProjectionParams) -> Tensor:
    return nx.linear(nx.gelu(nx.linear(f_src, p.W1, p.b1)), p.W2, p.b2)


def confidence(f_src: Tensor) -> Tensor:
    """Frame-level feature strength: norm of the token-mean vector over sqrt(D)."""
    return nx.l2norm(nx.mean(f_src, axis=0)) * (1.0 / math.sqrt(f_src.shape[-1]))


def gate(rho_t: float, f_src: Tensor, w_g: Tensor) -> Tensor:
    if rho_t < 0:
        raise ValueError(f"event density must be non-negative, got {rho_t}")
    return nx.sigmoid(w_g[0, 0] * float(rho_t) + w_g[1, 0] * confidence(f_src))


def fuse_directional(f_tgt: Tensor, delta_f: Tensor, g: Tensor) -> Tensor:
    return f_tgt + g * delta_f


def gpf_forward(f_event: Tensor, f_rgb: Tensor, rho_t: float, params: GpfParams) -> Tensor:
    """[event + G * proj(rgb) ; rgb + G' * proj(event)] along channels, G' computed at density 1."""
    if f_event.shape != f_rgb.shape:
        raise nx.ShapeError(f"gpf: event tokens {f_event.shape} vs rgb tokens {f_rgb.shape}")
    pe, pr = params.rgb_to_event, params.event_to_rgb
    to_event = fuse_directional(f_event, project(f_rgb, pe), gate(rho_t, f_rgb, pe.w_g))
    to_rgb = fuse_directional(f_rgb, project(f_event, pr), gate(1.0, f_event, pr.w_g))
    return nx.concat([to_event, to_rgb], axis=1)
