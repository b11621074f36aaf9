"""Scenario description, deterministic world stepping and frame rendering."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..geometry import CAR, CYCLIST, PEDESTRIAN, Box3D, CameraModel, FeatureMap2D, RigidTransform, wrap_angle
from .motion import CLASS_MOTION, random_mode, step_unicycle
from .render import LidarConfig, render_image_features, render_pointcloud

BEHAVIORS = ("stationary", "modes", "waypoints")
FRAME_RATE = 10.0
EGO_PATHS = ("static", "line", "circle")


def as_float32(x):
    """Round to the nearest float32 value, kept as float64."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def f32_yaw(yaw: float) -> float:
    """A float32-representable yaw that ``wrap_angle`` leaves unchanged."""
    y = float(np.float32(wrap_angle(yaw)))
    while wrap_angle(y) != y:
        y = float(np.nextafter(np.float32(y), np.float32(0.0)))
    return y


@dataclass(frozen=True)
class AgentSpec:
    cls: int
    pose: tuple  # x, y, yaw in the world frame
    behavior: str = "modes"
    size: tuple | None = None  # l, w, h; sampled around the class size when None
    speed: float | None = None  # waypoint cruising speed; class cruise midpoint when None
    waypoints: tuple = ()  # ((x, y), ...) visited cyclically
    home: tuple | None = None  # (x, y, radius) region a mode-switching agent steers back into

    def __post_init__(self):
        if self.cls not in CLASS_MOTION:
            raise ValueError(f"agents.cls: unknown class {self.cls}")
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"agents.behavior: {self.behavior!r} not in {BEHAVIORS}")
        if len(self.pose) != 3 or not np.all(np.isfinite(self.pose)):
            raise ValueError(f"agents.pose: expected finite (x, y, yaw), got {self.pose}")
        if self.speed is not None and not 0 <= self.speed <= CLASS_MOTION[self.cls].max_speed:
            raise ValueError(f"agents.speed: {self.speed} outside [0, {CLASS_MOTION[self.cls].max_speed}]")
        if self.behavior == "waypoints" and len(self.waypoints) < 2:
            raise ValueError("agents.waypoints: waypoint behaviour needs at least two waypoints")
        if self.size is not None and (len(self.size) != 3 or min(self.size) <= 0):
            raise ValueError(f"agents.size: expected three positive values, got {self.size}")
        if self.home is not None and (len(self.home) != 3 or self.home[2] <= 0):
            raise ValueError(f"agents.home: expected (x, y, radius > 0), got {self.home}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pose"] = list(self.pose)
        d["waypoints"] = [list(w) for w in self.waypoints]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"agents: unknown field(s) {sorted(unknown)}")
        d = dict(d)
        d["pose"] = tuple(d["pose"])
        d["waypoints"] = tuple(tuple(w) for w in d.get("waypoints", ()))
        for key in ("size", "home"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Scenario:
    agents: tuple
    ego_path: str = "static"
    ego_speed: float = 0.0
    ego_radius: float = 20.0
    visible_range: float = 50.0
    lidar: LidarConfig = field(default_factory=LidarConfig)
    image_size: tuple = (256, 192)
    fov_deg: float = 60.0
    camera_yaws_deg: tuple = (30.0, -30.0)
    camera_height: float = 1.5
    feature_channels: int = 8

    def __post_init__(self):
        if len(self.agents) < 1:
            raise ValueError("agents: a scenario needs at least one agent")
        if self.ego_path not in EGO_PATHS:
            raise ValueError(f"ego_path: {self.ego_path!r} not in {EGO_PATHS}")
        if self.ego_speed < 0 or self.ego_radius <= 0 or self.visible_range <= 0:
            raise ValueError("ego_speed must be >= 0; ego_radius and visible_range must be positive")
        if self.feature_channels < 4:
            raise ValueError(f"feature_channels: need at least 4, got {self.feature_channels}")
        if not 0 < self.fov_deg < 180:
            raise ValueError(f"fov_deg: {self.fov_deg} outside (0, 180)")

    def cameras(self) -> list[CameraModel]:
        w, h = self.image_size
        return [CameraModel.forward_facing(np.deg2rad(y), self.fov_deg, w, h, (0.0, 0.0, self.camera_height))
                for y in self.camera_yaws_deg]

    def ego_pose(self, t: float) -> RigidTransform:
        """Sensor-to-world pose at time ``t`` seconds."""
        if self.ego_path == "static":
            return RigidTransform.identity()
        if self.ego_path == "line":
            return RigidTransform.from_yaw(0.0, (self.ego_speed * t, 0.0, 0.0))
        th = self.ego_speed * t / self.ego_radius
        return RigidTransform.from_yaw(th + np.pi / 2,
                                       (self.ego_radius * np.sin(th), self.ego_radius * (1 - np.cos(th)), 0.0))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["agents"] = [a.to_dict() for a in self.agents]
        d["lidar"] = asdict(self.lidar)
        for k in ("image_size", "camera_yaws_deg"):
            d[k] = list(d[k])
        d["lidar"]["elevation_deg"] = list(d["lidar"]["elevation_deg"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"scenario: unknown field(s) {sorted(unknown)}")
        d = dict(d)
        if "agents" not in d:
            raise ValueError("agents: missing")
        d["agents"] = tuple(AgentSpec.from_dict(a) for a in d["agents"])
        if "lidar" in d:
            lid = dict(d["lidar"])
            bad = set(lid) - {f.name for f in fields(LidarConfig)}
            if bad:
                raise ValueError(f"lidar: unknown field(s) {sorted(bad)}")
            if "elevation_deg" in lid:
                lid["elevation_deg"] = tuple(lid["elevation_deg"])
            d["lidar"] = LidarConfig(**lid)
        for k in ("image_size", "camera_yaws_deg"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def reference_scenario(**overrides) -> Scenario:
    """Five mode-switching agents (three pedestrians, a car, a cyclist), each
    roaming its own home region around a static ego sensor."""
    agents = (
        AgentSpec(PEDESTRIAN, (8.0, 8.0, 0.0), home=(8.0, 8.0, 5.0)),
        AgentSpec(PEDESTRIAN, (-10.0, 6.0, 1.0), home=(-10.0, 6.0, 5.0)),
        AgentSpec(PEDESTRIAN, (2.0, -12.0, 2.0), home=(2.0, -12.0, 5.0)),
        AgentSpec(CAR, (22.0, -4.0, 1.57), home=(22.0, -4.0, 8.0)),
        AgentSpec(CYCLIST, (-8.0, -16.0, 0.0), home=(-8.0, -16.0, 6.0)),
    )
    return Scenario(agents, **overrides)


def random_scenario(n_agents: int, rng: np.random.Generator, arena: float = 25.0, **overrides) -> Scenario:
    classes = rng.choice([PEDESTRIAN, CAR, CYCLIST], size=n_agents, p=[0.5, 0.3, 0.2])
    agents = []
    for c in classes:
        x, y = rng.uniform(-arena, arena, 2)
        agents.append(AgentSpec(int(c), (float(x), float(y), float(rng.uniform(-np.pi, np.pi))),
                                home=(0.0, 0.0, arena)))
    return Scenario(tuple(agents), **overrides)


# --- world stepping ------------------------------------------------------------------

@dataclass
class AgentState:
    id: int
    spec: AgentSpec
    x: float
    y: float
    yaw: float
    size: np.ndarray
    v: float = 0.0
    w: float = 0.0
    mode_left: int = 0
    waypoint: int = 0

    def box(self) -> Box3D:
        return Box3D([self.x, self.y, self.size[2] / 2], self.size, self.yaw, self.spec.cls)


def _init_agent(i: int, spec: AgentSpec, rng) -> AgentState:
    cm = CLASS_MOTION[spec.cls]
    if spec.size is not None:
        size = np.asarray(spec.size, dtype=np.float64)
    else:
        size = np.asarray(cm.size) * (1 + rng.uniform(-cm.size_jitter, cm.size_jitter, 3))
    return AgentState(i, spec, *spec.pose, size=as_float32(size))


def _heading_error(a: AgentState, tx: float, ty: float) -> float:
    return wrap_angle(np.arctan2(ty - a.y, tx - a.x) - a.yaw)


def _controls(a: AgentState, dt: float, rng) -> tuple[float, float]:
    spec, cm = a.spec, CLASS_MOTION[a.spec.cls]
    sharp = cm.turn_rates[-1]
    if spec.behavior == "stationary":
        return 0.0, 0.0
    if spec.behavior == "waypoints":
        speed = spec.speed if spec.speed is not None else float(np.mean(cm.cruise))
        tx, ty = spec.waypoints[a.waypoint]
        if np.hypot(tx - a.x, ty - a.y) < max(speed * dt * 2, 0.5):
            a.waypoint = (a.waypoint + 1) % len(spec.waypoints)
            tx, ty = spec.waypoints[a.waypoint]
        err = _heading_error(a, tx, ty)
        return speed, float(np.clip(2.0 * err, -sharp, sharp))
    if a.mode_left <= 0:
        a.v, a.w = random_mode(spec.cls, rng)
        a.mode_left = max(1, int(round(rng.uniform(1.0, 3.0) / dt)))
    a.mode_left -= 1
    v, w = a.v, a.w
    if spec.home is not None:
        hx, hy, r = spec.home
        err = _heading_error(a, hx, hy)
        if np.hypot(hx - a.x, hy - a.y) > r and abs(err) > np.pi / 4:
            v = cm.cruise[0]
            w = sharp if err > 0 else -sharp
    return v, w


def step_world(agents: list[AgentState], dt: float, rng) -> None:
    for a in agents:
        v, w = _controls(a, dt, rng)
        a.x, a.y, a.yaw = step_unicycle(a.x, a.y, a.yaw, v, w, dt)
        a.yaw = wrap_angle(a.yaw)


# --- frames -------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameRecord:
    index: int
    timestamp: float
    ego_pose: RigidTransform  # sensor -> world
    points: np.ndarray  # N x 4 float32, sensor frame
    features: tuple  # per camera: tuple of FeatureMap2D at the pyramid scales
    boxes: tuple  # ground-truth Box3D in the sensor frame (visible agents only)
    ids: np.ndarray  # persistent agent id per box


def _sensor_box(world_box: Box3D, pose: RigidTransform) -> Box3D:
    b = world_box.transformed(pose.inverse())
    return Box3D(as_float32(b.center), b.size, f32_yaw(b.yaw), b.cls)


def frame_rng(seed: int, frame: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, frame, stream]))


def render_frame(index: int, world_boxes, ids, scenario: Scenario, seed: int,
                 cameras=None) -> FrameRecord:
    t = index / FRAME_RATE
    pose = scenario.ego_pose(t)
    boxes, keep = [], []
    for b, i in zip(world_boxes, ids):
        sb = _sensor_box(b, pose)
        if np.hypot(*sb.center[:2]) <= scenario.visible_range:
            boxes.append(sb)
            keep.append(i)
    cameras = scenario.cameras() if cameras is None else cameras
    points = render_pointcloud(boxes, scenario.lidar, frame_rng(seed, index, 1))
    feats = tuple(tuple(render_image_features(boxes, cam, scenario.feature_channels,
                                              max_range=scenario.lidar.max_range)) for cam in cameras)
    return FrameRecord(index, t, pose, points, feats, tuple(boxes), np.asarray(keep, dtype=np.uint32))


def world_trajectory(scenario: Scenario, seed: int, frames: int) -> list[tuple[list[Box3D], list[int]]]:
    """World-frame boxes per frame; the first frame is the initial state."""
    if frames < 0:
        raise ValueError(f"frames must be non-negative, got {frames}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA6E7]))
    agents = [_init_agent(i, s, rng) for i, s in enumerate(scenario.agents)]
    out = []
    for f in range(frames):
        if f:
            step_world(agents, 1.0 / FRAME_RATE, rng)
        out.append(([a.box() for a in agents], [a.id for a in agents]))
    return out


def simulate(scenario: Scenario, seed: int, frames: int, workers: int = 1) -> list[FrameRecord]:
    """World stepping is sequential; frames are rendered independently (and
    optionally in parallel) from per-frame random streams."""
    states = world_trajectory(scenario, seed, frames)
    cameras = scenario.cameras()
    job = lambda f: render_frame(f, states[f][0], states[f][1], scenario, seed, cameras)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(job, range(frames)))
    return [job(f) for f in range(frames)]


def lift_features(pyramid, dim: int, seed: int = 0) -> list[FeatureMap2D]:
    """Fixed random linear lift of rendered channels to ``dim`` features."""
    d = pyramid[0].channels
    proj = np.random.default_rng(seed).standard_normal((d, dim)) / np.sqrt(d)
    return [FeatureMap2D(m.values @ proj, m.scale) for m in pyramid]
