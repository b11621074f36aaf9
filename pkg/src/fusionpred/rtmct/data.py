"""Synthetic multi-class trajectory samples from mode-switching agents."""
from __future__ import annotations

import numpy as np

from ..geometry import CYCLIST, PEDESTRIAN
from ..sim.motion import mode_schedule, rollout
from .config import RtmctConfig
from .preprocess import AgentHistory

DEFAULT_CLASS_MIX = (0.5, 0.3, 0.2)  # pedestrian, car, cyclist


def _agent_track(cls: int, steps: int, start, heading: float, dt: float, rng) -> np.ndarray:
    motion_cls = PEDESTRIAN if cls > CYCLIST else cls  # the robot moves like a pedestrian
    controls = mode_schedule(motion_cls, steps, dt, rng)
    poses = rollout((start[0], start[1], heading), controls, dt)
    return poses[:, :2]


def generate_samples(count: int, config: RtmctConfig = RtmctConfig(), seed=0,
                     class_mix=DEFAULT_CLASS_MIX, obs_noise: float = 0.01, short_history_frac: float = 0.2,
                     max_neighbors: int = 4):
    """Returns a list of ``(target, neighbours, future)`` tuples in world coordinates.

    Targets follow random mode schedules over ``T_obs + T_pred`` steps;
    ``short_history_frac`` of them keep only a random suffix of their history
    (at least ``T_min`` frames).  Neighbours (including the robot class) start
    within a few meters of the target.
    """
    rng = np.random.default_rng(seed)
    total = config.t_obs + config.t_pred
    frames = np.arange(-config.t_obs + 1, 1)
    out = []
    for _ in range(count):
        cls = int(rng.choice(config.num_classes, p=np.asarray(class_mix) / np.sum(class_mix)))
        start = rng.uniform(-20, 20, 2)
        track = _agent_track(cls, total, start, rng.uniform(-np.pi, np.pi), config.dt, rng)
        obs = track[:config.t_obs] + rng.normal(0.0, obs_noise, (config.t_obs, 2))
        future = track[config.t_obs:]
        keep = config.t_obs
        if rng.random() < short_history_frac:
            keep = int(rng.integers(config.t_min, config.t_obs + 1))
        target = AgentHistory(cls, obs[-keep:], frames[-keep:])
        others = []
        for _ in range(int(rng.integers(0, max_neighbors + 1))):
            ncls = int(rng.integers(0, config.num_classes + 1))
            nstart = track[0] + rng.uniform(-4, 4, 2)
            ntrack = _agent_track(ncls, config.t_obs, nstart, rng.uniform(-np.pi, np.pi), config.dt, rng)
            nkeep = int(rng.integers(1, config.t_obs + 1))
            others.append(AgentHistory(ncls, ntrack[-nkeep:], frames[-nkeep:]))
        out.append((target, others, future))
    return out


def constant_velocity(observed: np.ndarray, t_pred: int) -> np.ndarray:
    """Extrapolate the last observed displacement; ``observed``: B x T x 2."""
    v = observed[:, -1] - observed[:, -2]
    steps = np.arange(1, t_pred + 1)[None, :, None]
    return observed[:, -1][:, None] + steps * v[:, None]
