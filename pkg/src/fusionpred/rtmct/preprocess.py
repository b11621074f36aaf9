"""Canonical-frame preprocessing of agent histories.

Every element is expressed in a frame whose origin is the target's last
observed position and whose +X axis points at its earliest (padded) position.
Neighbours keep their own class; missing neighbour samples hold a large
sentinel value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import RtmctConfig

STATIONARY_EPS = 1e-6


@dataclass(frozen=True)
class AgentHistory:
    cls: int
    positions: np.ndarray  # T x 2, oldest first
    frames: np.ndarray | None = None  # frame index per row; default ends at frame 0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        frames = np.arange(-len(pos) + 1, 1) if self.frames is None else np.asarray(self.frames, dtype=np.int64)
        if len(frames) != len(pos):
            raise ValueError("frames and positions differ in length")
        if len(frames) > 1 and np.any(np.diff(frames) <= 0):
            raise ValueError("history frames must be strictly increasing")
        if not np.all(np.isfinite(pos)):
            raise ValueError("history positions must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "frames", frames)


@dataclass(frozen=True)
class NormalizingTransform:
    origin: np.ndarray  # world position of the canonical origin
    theta: float  # canonical +X axis direction in the world frame

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def to_canonical(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.origin) @ self.rotation()

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation().T + self.origin


@dataclass(frozen=True)
class PreparedElement:
    observed: np.ndarray  # T_obs x 2 canonical
    neighbors: np.ndarray  # k x T_obs x 2 canonical, sentinel where missing
    neighbor_cls: np.ndarray  # k
    cls: int
    transform: NormalizingTransform
    future: np.ndarray | None = None  # T_pred x 2 canonical


@dataclass(frozen=True)
class TrajectoryBatch:
    observed: np.ndarray  # B x T_obs x 2
    neighbors: np.ndarray  # B x K x T_obs x 2
    neighbor_cls: np.ndarray  # B x K
    neighbor_mask: np.ndarray  # B x K
    cls: np.ndarray  # B
    origin: np.ndarray  # B x 2
    theta: np.ndarray  # B
    future: np.ndarray | None = None  # B x T_pred x 2

    def __len__(self) -> int:
        return len(self.cls)

    def subset(self, idx) -> "TrajectoryBatch":
        fut = None if self.future is None else self.future[idx]
        return TrajectoryBatch(self.observed[idx], self.neighbors[idx], self.neighbor_cls[idx],
                               self.neighbor_mask[idx], self.cls[idx], self.origin[idx], self.theta[idx], fut)

    def transform(self, i: int) -> NormalizingTransform:
        return NormalizingTransform(self.origin[i], float(self.theta[i]))


def window_positions(hist: AgentHistory, window: np.ndarray):
    """Positions at ``window`` frames and a presence mask (exact frame match)."""
    out = np.zeros((len(window), 2))
    idx = np.searchsorted(hist.frames, window)
    idx_c = np.minimum(idx, len(hist.frames) - 1)
    present = hist.frames[idx_c] == window
    out[present] = hist.positions[idx_c[present]]
    return out, present


def padded_target(hist: AgentHistory, config: RtmctConfig) -> np.ndarray:
    """Target window of ``T_obs`` positions ending at its last frame.

    Slots before the earliest observation repeat it; interior gaps repeat the
    previous observation.
    """
    window = np.arange(hist.frames[-1] - config.t_obs + 1, hist.frames[-1] + 1)
    pos, present = window_positions(hist, window)
    n_real = int(present.sum())
    if n_real < config.t_min:
        raise ValueError(f"history has {n_real} observations in the window, need at least {config.t_min}")
    first = int(np.argmax(present))
    pos[:first] = pos[first]
    for t in range(first + 1, len(window)):
        if not present[t]:
            pos[t] = pos[t - 1]
    return pos


def canonical_transform(window: np.ndarray) -> NormalizingTransform:
    origin = window[-1].copy()
    d = window[0] - origin
    if np.hypot(d[0], d[1]) < STATIONARY_EPS:
        return NormalizingTransform(origin, 0.0)
    return NormalizingTransform(origin, float(np.arctan2(d[1], d[0])))


def select_neighbors(target_window: np.ndarray, target_cls: int, window: np.ndarray,
                     others: Sequence[AgentHistory], config: RtmctConfig):
    """Neighbours whose minimum distance to the target over shared frames is
    below ``max(d_target, d_neighbor)``; nearest first, at most ``k_max``."""
    chosen = []
    for i, other in enumerate(others):
        if not 0 <= other.cls <= config.robot_class:
            raise ValueError(f"unknown neighbour class {other.cls}")
        pos, present = window_positions(other, window)
        if not present.any():
            continue
        dist = np.hypot(*(pos[present] - target_window[present]).T).min()
        if dist < max(config.thresholds[target_cls], config.thresholds[other.cls]):
            chosen.append((float(dist), i, pos, present))
    chosen.sort(key=lambda c: (c[0], c[1]))
    return chosen[:config.k_max]


def prepare(target: AgentHistory, others: Sequence[AgentHistory] = (), config: RtmctConfig = RtmctConfig(),
            future: np.ndarray | None = None) -> PreparedElement:
    if not 0 <= target.cls < config.num_classes:
        raise ValueError(f"unknown target class {target.cls}")
    win = padded_target(target, config)
    frames = np.arange(target.frames[-1] - config.t_obs + 1, target.frames[-1] + 1)
    tf = canonical_transform(win)
    neigh = select_neighbors(win, target.cls, frames, others, config)
    nb = np.full((len(neigh), config.t_obs, 2), config.sentinel)
    ncls = np.zeros(len(neigh), dtype=np.int64)
    for j, (_, i, pos, present) in enumerate(neigh):
        nb[j][present] = tf.to_canonical(pos[present])
        ncls[j] = others[i].cls
    fut = None
    if future is not None:
        future = np.asarray(future, dtype=np.float64).reshape(-1, 2)
        if len(future) != config.t_pred:
            raise ValueError(f"future has {len(future)} steps, expected {config.t_pred}")
        fut = tf.to_canonical(future)
    return PreparedElement(tf.to_canonical(win), nb, ncls, int(target.cls), tf, fut)


def collate(elements: Sequence[PreparedElement], config: RtmctConfig) -> TrajectoryBatch:
    """Stack prepared elements; neighbour slots are padded to ``k_max``."""
    b, k = len(elements), config.k_max
    nb = np.full((b, k, config.t_obs, 2), config.sentinel)
    ncls = np.zeros((b, k), dtype=np.int64)
    mask = np.zeros((b, k), dtype=bool)
    for i, e in enumerate(elements):
        n = len(e.neighbor_cls)
        nb[i, :n] = e.neighbors
        ncls[i, :n] = e.neighbor_cls
        mask[i, :n] = True
    has_future = all(e.future is not None for e in elements) and b > 0
    return TrajectoryBatch(
        np.array([e.observed for e in elements]).reshape(b, config.t_obs, 2), nb, ncls, mask,
        np.array([e.cls for e in elements], dtype=np.int64),
        np.array([e.transform.origin for e in elements]).reshape(b, 2),
        np.array([e.transform.theta for e in elements], dtype=np.float64),
        np.array([e.future for e in elements]) if has_future else None,
    )


def preprocess(items, config: RtmctConfig = RtmctConfig()):
    """``items``: iterable of ``(target, others)`` or ``(target, others, future)``.

    Returns ``(batch, kept_indices, rejected)`` where ``rejected`` lists
    ``(index, reason)`` for elements that could not be prepared.
    """
    kept, elems, rejected = [], [], []
    for i, item in enumerate(items):
        target, others = item[0], item[1]
        future = item[2] if len(item) > 2 else None
        try:
            elems.append(prepare(target, others, config, future))
            kept.append(i)
        except ValueError as exc:
            rejected.append((i, str(exc)))
    return collate(elems, config), kept, rejected
