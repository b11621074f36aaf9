"""Hyperparameters for the reference-trajectory multi-class predictor."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

ROBOT_CLASS_NAME = "robot"


@dataclass(frozen=True)
class RtmctConfig:
    t_obs: int = 16
    t_min: int = 2
    t_pred: int = 24
    num_classes: int = 3  # pedestrian, car, cyclist; the robot is neighbour class ``num_classes``
    # neighbour distance thresholds per class, robot last (meters)
    thresholds: tuple = (2.0, 5.0, 3.0, 2.0)
    num_modes: int = 7
    dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    dt: float = 0.1
    sentinel: float = 1e6
    k_max: int = 32
    # coordinates closer to zero than this are clamped before taking reciprocals
    reciprocal_floor: float = 0.1
    # pedestrian mode table: forward tiers and turn modes (m/s, rad/s)
    forward_speeds: tuple = (0.0, 0.8, 2.0)
    turn_speed: float = 0.8
    turn_rates: tuple = (0.4, 1.2)
    class_speed_scale: tuple = (1.0, 4.0, 2.0)
    # canonical frames put the history on +X behind the agent, so it moves toward -X
    heading: float = float(np.pi)
    score_weight: float = 1.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if not 1 <= self.t_min <= self.t_obs:
            raise ValueError(f"need 1 <= t_min <= t_obs, got t_min={self.t_min}, t_obs={self.t_obs}")
        if self.t_pred < 1:
            raise ValueError("t_pred must be >= 1")
        if len(self.thresholds) != self.num_classes + 1 or min(self.thresholds) <= 0:
            raise ValueError(f"need {self.num_classes + 1} positive neighbour thresholds, got {self.thresholds}")
        if len(self.class_speed_scale) != self.num_classes:
            raise ValueError("class_speed_scale needs one entry per class")
        if self.num_modes != len(self.mode_table()):
            raise ValueError(f"num_modes {self.num_modes} does not match the mode table ({len(self.mode_table())})")
        if self.dim % self.num_heads:
            raise ValueError("dim must be divisible by num_heads")
        if self.sentinel <= 0 or self.reciprocal_floor <= 0:
            raise ValueError("sentinel and reciprocal_floor must be positive")

    @property
    def num_refs(self) -> int:
        return self.num_modes ** 2

    @property
    def robot_class(self) -> int:
        return self.num_classes

    def mode_table(self) -> list[tuple[float, float]]:
        """Per-mode ``(linear m/s, angular rad/s)`` for the base (pedestrian) class:
        forward tiers, then left/right turns for each turn rate."""
        modes = [(float(v), 0.0) for v in self.forward_speeds]
        for w in self.turn_rates:
            modes.append((self.turn_speed, float(w)))
        for w in self.turn_rates:
            modes.append((self.turn_speed, -float(w)))
        return modes

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RtmctConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown predictor config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def small_config(**overrides) -> RtmctConfig:
    """A tiny configuration used for gradient checks and quick tests."""
    base = dict(t_obs=4, t_min=2, t_pred=4, forward_speeds=(0.0, 1.0), turn_rates=(), num_modes=2,
                dim=8, num_heads=2, ffn_dim=12, k_max=4)
    base.update(overrides)
    return RtmctConfig(**base)
