"""Agent kinematics: unicycle rollouts driven by random mode schedules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import CAR, CYCLIST, PEDESTRIAN


@dataclass(frozen=True)
class ClassMotion:
    max_speed: float  # m/s
    cruise: tuple  # (low, high) cruise speed range, m/s
    turn_rates: tuple  # magnitudes of the gentle and sharp turn rates, rad/s
    stop_prob: float  # probability a new mode is a stop
    size: tuple  # (l, w, h) typical
    size_jitter: float


CLASS_MOTION = {
    PEDESTRIAN: ClassMotion(2.2, (0.6, 1.8), (0.4, 1.2), 0.15, (0.6, 0.6, 1.7), 0.1),
    CAR: ClassMotion(9.0, (3.0, 8.0), (0.15, 0.4), 0.1, (4.4, 1.8, 1.6), 0.3),
    CYCLIST: ClassMotion(4.5, (2.0, 4.0), (0.2, 0.6), 0.05, (1.8, 0.6, 1.7), 0.1),
}


def step_unicycle(x: float, y: float, th: float, v: float, w: float, dt: float):
    """One exact-arc unicycle step."""
    if abs(w) < 1e-12:
        return x + v * dt * np.cos(th), y + v * dt * np.sin(th), th
    nth = th + w * dt
    return x + v / w * (np.sin(nth) - np.sin(th)), y - v / w * (np.cos(nth) - np.cos(th)), nth


def random_mode(cls: int, rng: np.random.Generator) -> tuple[float, float]:
    """Draw ``(linear, angular)`` for a new mode: stop, straight, gentle or sharp turn."""
    cm = CLASS_MOTION[cls]
    if rng.random() < cm.stop_prob:
        return 0.0, 0.0
    v = float(rng.uniform(*cm.cruise))
    kind = rng.integers(0, 3)
    if kind == 0:
        return v, 0.0
    w = float(cm.turn_rates[kind - 1] * rng.uniform(0.7, 1.3) * rng.choice([-1.0, 1.0]))
    if cls == PEDESTRIAN:
        v = min(v, 1.0)  # turning pedestrians walk slowly
    return v, w


def mode_schedule(cls: int, steps: int, dt: float, rng: np.random.Generator,
                  duration=(1.0, 3.0)) -> np.ndarray:
    """Per-step ``(v, w)``; modes last a uniform random duration in seconds."""
    out = np.empty((steps, 2))
    t = 0
    while t < steps:
        n = max(1, int(round(rng.uniform(*duration) / dt)))
        out[t:t + n] = random_mode(cls, rng)
        t += n
    return out


def rollout(pose, controls: np.ndarray, dt: float) -> np.ndarray:
    """Poses ``(x, y, yaw)`` after each control step (excluding the initial pose)."""
    x, y, th = pose
    out = np.empty((len(controls), 3))
    for i, (v, w) in enumerate(controls):
        x, y, th = step_unicycle(x, y, th, v, w, dt)
        out[i] = (x, y, th)
    return out
