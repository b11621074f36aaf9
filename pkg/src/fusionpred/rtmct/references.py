"""Two-stage unicycle reference trajectories (one anchor per mode pair)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RtmctConfig


@dataclass(frozen=True)
class ReferenceTrajectorySet:
    trajectories: np.ndarray  # C x n x T_pred x 2
    modes: np.ndarray  # C x m x 2, (linear, angular) per class

    def __post_init__(self):
        c, n, _, two = self.trajectories.shape
        if two != 2 or self.modes.shape[0] != c or self.modes.shape[1] ** 2 != n:
            raise ValueError(f"inconsistent reference shapes {self.trajectories.shape} / {self.modes.shape}")


def unicycle_rollout(v: float, w: float, steps: int, dt: float, pose=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, tuple]:
    """Exact-arc integration; returns positions after steps ``1..steps`` and the final pose."""
    x, y, th = pose
    out = np.empty((steps, 2))
    for i in range(steps):
        if abs(w) < 1e-12:
            x += v * dt * np.cos(th)
            y += v * dt * np.sin(th)
        else:
            nth = th + w * dt
            x += v / w * (np.sin(nth) - np.sin(th))
            y -= v / w * (np.cos(nth) - np.cos(th))
            th = nth
        out[i] = (x, y)
    return out, (x, y, th)


def reference_trajectory(mode_a, mode_b, t_pred: int, dt: float, heading: float) -> np.ndarray:
    """Mode ``a`` for the first ``ceil(T/2)`` steps, then mode ``b`` for the rest."""
    first = (t_pred + 1) // 2
    p1, pose = unicycle_rollout(mode_a[0], mode_a[1], first, dt, (0.0, 0.0, heading))
    p2, _ = unicycle_rollout(mode_b[0], mode_b[1], t_pred - first, dt, pose)
    return np.vstack([p1, p2])


def class_modes(config: RtmctConfig) -> np.ndarray:
    base = np.array(config.mode_table(), dtype=np.float64)
    out = np.repeat(base[None], config.num_classes, axis=0)
    out[:, :, 0] *= np.asarray(config.class_speed_scale)[:, None]
    return out


def generate_references(config: RtmctConfig = RtmctConfig(), seed=None, jitter: float = 0.0,
                        heading: float | None = None) -> ReferenceTrajectorySet:
    """All ``m*m`` references per class; index ``a*m + b`` pairs stage-1 mode ``a``
    with stage-2 mode ``b``.  ``jitter`` (meters, needs ``seed``) perturbs the
    initial positions reproducibly."""
    heading = config.heading if heading is None else heading
    modes = class_modes(config)
    m = config.num_modes
    refs = np.empty((config.num_classes, m * m, config.t_pred, 2))
    for c in range(config.num_classes):
        for a in range(m):
            for b in range(m):
                refs[c, a * m + b] = reference_trajectory(modes[c, a], modes[c, b], config.t_pred, config.dt, heading)
    if jitter:
        refs = refs + np.random.default_rng(seed).normal(0.0, jitter, refs.shape)
    return ReferenceTrajectorySet(refs, modes)
