"""Tracking-by-detection with a constant-velocity Kalman filter.

State layout: ``[x, y, z, yaw, l, w, h, vx, vy, yaw_rate]`` in the world frame.
Detections arrive in the sensor frame and are moved to the world frame with
the ego pose of their frame.  Association runs per class in two stages: a
strict centre-distance gate on all tracklets, then a loose gate on whatever
is left over.
"""
from __future__ import annotations

import itertools
import json
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import CAR, CYCLIST, PEDESTRIAN, Box3D, RigidTransform, bev_giou, wrap_angle

STATE_DIM = 10
MEAS_DIM = 7
FORBIDDEN = 1e6

TENTATIVE, CONFIRMED, DEAD = "tentative", "confirmed", "dead"

H = np.hstack([np.eye(MEAS_DIM), np.zeros((MEAS_DIM, STATE_DIM - MEAS_DIM))])


@dataclass(frozen=True)
class TrackerConfig:
    birth: int = 3
    death: int = 4
    gate_strict: float = 2.5  # meters, for cars
    gate_loose: float = 5.0
    class_gate_scale: tuple = (0.5, 1.0, 0.8)  # pedestrian, car, cyclist
    metric: str = "giou-bev"
    solver: str = "hungarian"
    two_stage: bool = True
    min_confidence: float = 0.5
    max_coast: int = 1  # confirmed tracklets are reported for this many missed frames
    # process noise spectral densities (per second)
    q_pos: float = 0.05
    q_z: float = 0.01
    q_yaw: float = 0.05
    q_size: float = 1e-3
    q_vel: float = 2.0
    q_yaw_rate: float = 0.5
    r_pos: float = 0.01
    r_z: float = 0.01
    r_yaw: float = 0.05
    r_size: float = 0.01
    init_vel_var: float = 10.0
    init_yaw_rate_var: float = 1.0

    def __post_init__(self):
        if self.birth < 1 or self.death < 1:
            raise ValueError("birth and death thresholds must be >= 1")
        if not 0 < self.gate_strict <= self.gate_loose:
            raise ValueError("gates must satisfy 0 < gate_strict <= gate_loose")
        if self.metric not in ("giou-bev", "center-distance"):
            raise ValueError(f"unknown association metric {self.metric!r}")
        if self.solver not in ("hungarian", "greedy"):
            raise ValueError(f"unknown assignment solver {self.solver!r}")

    def gate(self, cls: int, stage: int) -> float:
        base = self.gate_strict if stage == 1 else self.gate_loose
        scale = self.class_gate_scale[cls] if cls < len(self.class_gate_scale) else 1.0
        return base * scale

    def process_noise(self, dt: float) -> np.ndarray:
        q = [self.q_pos, self.q_pos, self.q_z, self.q_yaw, self.q_size, self.q_size, self.q_size,
             self.q_vel, self.q_vel, self.q_yaw_rate]
        return np.diag(q) * dt

    def measurement_noise(self) -> np.ndarray:
        return np.diag([self.r_pos, self.r_pos, self.r_z, self.r_yaw, self.r_size, self.r_size, self.r_size])


@dataclass(frozen=True)
class Tracklet:
    id: int
    cls: int
    state: np.ndarray
    covariance: np.ndarray
    hits: int = 1
    misses: int = 0
    status: str = TENTATIVE
    confidence: float = 1.0
    history: tuple = ()  # (timestamp, x, y)

    def box(self) -> Box3D:
        s = self.state
        return Box3D(s[:3], np.maximum(s[4:7], 1e-3), s[3], self.cls, self.confidence)

    @property
    def velocity(self) -> np.ndarray:
        return self.state[7:9]


def transition(dt: float) -> np.ndarray:
    f = np.eye(STATE_DIM)
    f[0, 7] = f[1, 8] = f[3, 9] = dt
    return f


def _check_pd(cov: np.ndarray, what: str) -> None:
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(f"{what} covariance is not positive definite") from None


def predict(tracklet: Tracklet, dt: float, config: TrackerConfig = TrackerConfig()) -> Tracklet:
    if dt <= 0:
        raise ValueError(f"prediction step must be positive, got {dt}")
    _check_pd(tracklet.covariance, f"tracklet {tracklet.id}")
    f = transition(dt)
    x = f @ tracklet.state
    x[3] = wrap_angle(x[3])
    p = f @ tracklet.covariance @ f.T + config.process_noise(dt)
    return replace(tracklet, state=x, covariance=0.5 * (p + p.T))


def measurement(box: Box3D) -> np.ndarray:
    return np.concatenate([box.center, [box.yaw], box.size])


def update(tracklet: Tracklet, det: Box3D, config: TrackerConfig = TrackerConfig()) -> Tracklet:
    """Joseph-form Kalman correction; the yaw innovation is wrapped to (-pi, pi]."""
    r = config.measurement_noise()
    x, p = tracklet.state, tracklet.covariance
    innov = measurement(det) - H @ x
    innov[3] = wrap_angle(innov[3])
    s = H @ p @ H.T + r
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise ValueError(f"singular innovation covariance for tracklet {tracklet.id}") from None
    # K = P H^T S^-1 via two triangular solves
    k = np.linalg.solve(chol.T, np.linalg.solve(chol, H @ p)).T
    x_new = x + k @ innov
    x_new[3] = wrap_angle(x_new[3])
    a = np.eye(STATE_DIM) - k @ H
    p_new = a @ p @ a.T + k @ r @ k.T
    hits = tracklet.hits + 1
    status = tracklet.status
    if status == TENTATIVE and hits >= config.birth:
        status = CONFIRMED
    return replace(tracklet, state=x_new, covariance=0.5 * (p_new + p_new.T), hits=hits, misses=0,
                   status=status, confidence=det.confidence)


def spawn(track_id: int, det: Box3D, config: TrackerConfig = TrackerConfig()) -> Tracklet:
    state = np.concatenate([measurement(det), np.zeros(3)])
    var = np.concatenate([np.diag(config.measurement_noise()),
                          [config.init_vel_var, config.init_vel_var, config.init_yaw_rate_var]])
    status = CONFIRMED if config.birth <= 1 else TENTATIVE
    return Tracklet(track_id, det.cls, state, np.diag(var), hits=1, status=status, confidence=det.confidence)


# --- association ----------------------------------------------------------------

def _cost_row(track_box: Box3D, dets: Sequence[Box3D], metric: str, gate: float) -> np.ndarray:
    row = np.full(len(dets), FORBIDDEN)
    for j, d in enumerate(dets):
        dist = float(np.hypot(*(track_box.center[:2] - d.center[:2])))
        if dist > gate:
            continue
        row[j] = dist if metric == "center-distance" else 1.0 - bev_giou(track_box, d)
    return row


def association_cost(tracklets: Sequence[Tracklet], detections: Sequence[Box3D], metric: str = "giou-bev",
                     gate: float = 5.0, executor: Executor | None = None) -> np.ndarray:
    """``T x D`` cost matrix; pairs farther apart than ``gate`` get :data:`FORBIDDEN`.

    Rows may be computed on ``executor``; each row is produced by the same
    sequential code, so the matrix is identical either way.
    """
    boxes = [t.box() for t in tracklets]
    if not boxes or not detections:
        return np.full((len(boxes), len(detections)), FORBIDDEN)
    rows = (executor.map if executor else map)(lambda b: _cost_row(b, detections, metric, gate), boxes)
    return np.vstack(list(rows))


@dataclass(frozen=True)
class Assignment:
    pairs: list
    unmatched_rows: list
    unmatched_cols: list

    def total(self, cost: np.ndarray) -> float:
        return float(sum(cost[r, c] for r, c in self.pairs))


def _finish(pairs, n_rows: int, n_cols: int) -> Assignment:
    pairs = sorted(pairs)
    rows = {r for r, _ in pairs}
    cols = {c for _, c in pairs}
    return Assignment(pairs, [r for r in range(n_rows) if r not in rows], [c for c in range(n_cols) if c not in cols])


def solve_assignment(cost: np.ndarray, method: str = "hungarian", forbidden: float = FORBIDDEN) -> Assignment:
    """Minimum-cost one-to-one assignment that never uses a forbidden pair.

    With the Hungarian solver the number of allowed matches is maximised
    first and their total cost minimised second (forbidden entries act as a
    large constant).  ``method="greedy"`` repeatedly takes the cheapest
    remaining allowed pair.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return _finish([], n_rows, n_cols)
    if method == "hungarian":
        rows, cols = linear_sum_assignment(cost)
        pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] < forbidden]
    elif method == "greedy":
        order = np.lexsort((np.tile(np.arange(n_cols), n_rows), np.repeat(np.arange(n_rows), n_cols), cost.ravel()))
        used_r, used_c, pairs = set(), set(), []
        for flat in order:
            r, c = divmod(int(flat), n_cols)
            if cost[r, c] >= forbidden:
                break
            if r in used_r or c in used_c:
                continue
            used_r.add(r)
            used_c.add(c)
            pairs.append((r, c))
    else:
        raise ValueError(f"unknown assignment method {method!r}")
    return _finish(pairs, n_rows, n_cols)


def brute_force_assignment(cost: np.ndarray, forbidden: float = FORBIDDEN) -> float:
    """Reference total over all full-cardinality injections (forbidden counted
    at face value), used to audit :func:`solve_assignment`."""
    cost = np.asarray(cost, dtype=np.float64)
    n_rows, n_cols = cost.shape
    if n_rows <= n_cols:
        return min(sum(cost[r, c] for r, c in enumerate(p)) for p in itertools.permutations(range(n_cols), n_rows))
    return min(sum(cost[r, c] for c, r in enumerate(p)) for p in itertools.permutations(range(n_rows), n_cols))


# --- frame loop -------------------------------------------------------------------

@dataclass(frozen=True)
class TrackRecord:
    frame: int
    timestamp: float
    id: int
    box: Box3D
    velocity: tuple

    def to_json(self) -> dict:
        b = self.box
        return {"frame": self.frame, "t": self.timestamp, "id": self.id, "cls": b.cls,
                "center": b.center.tolist(), "size": b.size.tolist(), "yaw": b.yaw,
                "confidence": b.confidence, "velocity": list(self.velocity)}

    @classmethod
    def from_json(cls, rec: dict) -> "TrackRecord":
        box = Box3D(rec["center"], rec["size"], rec["yaw"], rec["cls"], rec["confidence"])
        return cls(int(rec["frame"]), float(rec["t"]), int(rec["id"]), box, tuple(rec["velocity"]))


@dataclass
class TrackerState:
    tracklets: list = field(default_factory=list)
    next_id: int = 0
    last_time: float | None = None
    frame: int = -1


def _apply(fn, items, executor):
    return list(executor.map(fn, items)) if executor else [fn(x) for x in items]


def _associate(tracks: list, dets: list, config: TrackerConfig, executor):
    """Two-stage per-class association; returns (matches, unmatched track idx, unmatched det idx)."""
    matches = []
    free_t, free_d = set(range(len(tracks))), set(range(len(dets)))
    stages = (1, 2) if config.two_stage else (2,)
    classes = sorted({t.cls for t in tracks} | {d.cls for d in dets})
    for stage in stages:
        for cls in classes:
            ti = [i for i in sorted(free_t) if tracks[i].cls == cls]
            di = [j for j in sorted(free_d) if dets[j].cls == cls]
            if not ti or not di:
                continue
            cost = association_cost([tracks[i] for i in ti], [dets[j] for j in di], config.metric,
                                    config.gate(cls, stage), executor)
            for r, c in solve_assignment(cost, config.solver).pairs:
                matches.append((ti[r], di[c]))
                free_t.discard(ti[r])
                free_d.discard(di[c])
    return sorted(matches), sorted(free_t), sorted(free_d)


def track_frame(state: TrackerState, detections: Sequence[Box3D], timestamp: float,
                ego_pose: RigidTransform = RigidTransform.identity(), config: TrackerConfig = TrackerConfig(),
                executor: Executor | None = None) -> tuple[TrackerState, list[TrackRecord]]:
    """Advance the tracker by one frame.

    ``detections`` are in the sensor frame and ``ego_pose`` maps sensor to
    world.  Returns the new state and the reported (confirmed) tracklets.
    The input state is not modified.
    """
    if state.last_time is not None and timestamp <= state.last_time:
        raise ValueError(f"timestamps must increase: {timestamp} after {state.last_time}")
    dets = [d.transformed(ego_pose) for d in detections if d.confidence >= config.min_confidence]
    tracks = list(state.tracklets)
    if state.last_time is not None and tracks:
        dt = timestamp - state.last_time
        tracks = _apply(lambda t: predict(t, dt, config), tracks, executor)
    matches, free_t, free_d = _associate(tracks, dets, config, executor)
    updated = _apply(lambda m: update(tracks[m[0]], dets[m[1]], config), matches, executor)
    for (ti, _), t in zip(matches, updated):
        tracks[ti] = t
    for ti in free_t:
        t = tracks[ti]
        misses = t.misses + 1
        tracks[ti] = replace(t, misses=misses, status=DEAD if misses >= config.death else t.status)
    next_id = state.next_id
    for dj in free_d:
        tracks.append(spawn(next_id, dets[dj], config))
        next_id += 1
    alive = []
    for t in tracks:
        if t.status == DEAD:
            continue
        alive.append(replace(t, history=t.history + ((timestamp, float(t.state[0]), float(t.state[1])),)))
    frame = state.frame + 1
    out = [TrackRecord(frame, timestamp, t.id, t.box(), (float(t.state[7]), float(t.state[8])))
           for t in alive if t.status == CONFIRMED and t.misses <= config.max_coast]
    out.sort(key=lambda r: r.id)
    return TrackerState(alive, next_id, timestamp, frame), out


class Tracker:
    """Stateful wrapper; ``workers > 1`` fans per-tracklet work out to threads."""

    def __init__(self, config: TrackerConfig = TrackerConfig(), workers: int = 1):
        self.config = config
        self.state = TrackerState()
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def step(self, detections, timestamp, ego_pose=RigidTransform.identity()):
        self.state, out = track_frame(self.state, detections, timestamp, ego_pose, self.config, self._pool)
        return out

    def close(self):
        if self._pool:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_tracker(frames: Iterable, config: TrackerConfig = TrackerConfig(), workers: int = 1) -> list[TrackRecord]:
    """Track ``(detections, timestamp, ego_pose)`` tuples; returns the full record stream."""
    out = []
    with Tracker(config, workers) as tracker:
        for dets, t, pose in frames:
            out.extend(tracker.step(dets, t, pose))
    return out


def write_stream(records: Iterable[TrackRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_stream(path) -> Iterator[TrackRecord]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield TrackRecord.from_json(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: bad tracklet record ({exc})") from None


__all__ = [
    "Assignment", "FORBIDDEN", "TrackRecord", "Tracker", "TrackerConfig", "TrackerState", "Tracklet",
    "association_cost", "brute_force_assignment", "predict", "read_stream", "run_tracker", "solve_assignment",
    "spawn", "track_frame", "update", "write_stream", "PEDESTRIAN", "CAR", "CYCLIST",
]
