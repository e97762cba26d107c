"""Runtime suppression strength: fixed or adaptive blending of enhanced and input features."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Mode(enum.Enum):
    OFF = "off"  # w = 0, filtering bypassed
    FIXED = "fixed"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class SuppressionConfig:
    mode: Mode = Mode.FIXED
    w: float = 1.0
    a: float = 1.0
    b: float = 0.0
    beta: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"fixed w must be in [0, 1], got {self.w}")
        if self.a <= 0 or self.b < 0:
            raise ValueError("adaptive transform needs a > 0 and b >= 0")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")

    @classmethod
    def parse(cls, text: str, **overrides) -> "SuppressionConfig":
        """``off``, ``fixed:<w>``, ``adaptive`` or ``adaptive:<beta>``."""
        name, _, arg = text.strip().lower().partition(":")
        mode = Mode(name)
        kw = dict(overrides)
        if arg:
            kw["w" if mode == Mode.FIXED else "beta"] = float(arg)
        return cls(mode=mode, **kw)

    def initial_w(self) -> float:
        if self.mode == Mode.OFF:
            return 0.0
        if self.mode == Mode.FIXED:
            return self.w
        return clamp01(self.b)

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "w": self.w, "a": self.a, "b": self.b, "beta": self.beta}


@dataclass
class SuppressionState:
    w_prev: float = 0.0


def clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def f_adapt(noise_score: float) -> float:
    """Map the raw classifier score's [-1, +1] margin onto [0, 1]."""
    return clamp01((noise_score + 1.0) / 2.0)


def update_strength(state: SuppressionState, f: float, cfg: SuppressionConfig) -> float:
    """Moving-average update ``w = beta*w_prev + (1-beta)*(a*f + b)``, clamped to [0, 1]."""
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"f_adapt output must be in [0, 1], got {f}")
    w = cfg.beta * state.w_prev + (1.0 - cfg.beta) * (cfg.a * f + cfg.b)
    w = clamp01(w)
    state.w_prev = w
    return w


def next_strength(state: SuppressionState, noise_score: float, cfg: SuppressionConfig) -> float:
    """Suppression strength for the current frame under any mode."""
    if cfg.mode == Mode.ADAPTIVE:
        return update_strength(state, f_adapt(noise_score), cfg)
    state.w_prev = cfg.initial_w()
    return state.w_prev


def compensate(s_enh, s_in, w: float):
    """Convex blend ``w * S_enh + (1 - w) * S_in``; endpoints return an input unchanged."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"w must be in [0, 1], got {w}")
    s_enh = np.asarray(s_enh, dtype=np.float64)
    s_in = np.asarray(s_in, dtype=np.float64)
    if s_enh.shape != s_in.shape:
        raise ValueError("enhanced and input frames differ in width")
    if w == 0.0:
        return s_in.copy()
    if w == 1.0:
        return s_enh.copy()
    return w * s_enh + (1.0 - w) * s_in
