"""Ray casting of boxes and the ground plane for LiDAR points and camera feature maps.

All geometry is in the sensor frame: origin on the ground below the LiDAR,
+X forward, +Z up, ground plane at z=0.  Box centres sit at half their
height.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Box3D, CameraModel, FeatureMap2D, back_project

GROUND = -1  # hit label for the ground plane
NO_HIT = -2
INTENSITY = {GROUND: 0.2, 0: 0.5, 1: 0.8, 2: 0.6}
PYRAMID_SCALES = (8, 16, 32)
MIN_FEATURE_CHANNELS = 4


@dataclass(frozen=True)
class LidarConfig:
    beams: int = 32
    elevation_deg: tuple = (-25.0, 5.0)
    azimuth_step_deg: float = 1.0
    max_range: float = 60.0
    height: float = 1.8
    range_noise: float = 0.02

    def __post_init__(self):
        if self.beams < 0:
            raise ValueError(f"lidar.beams must be non-negative, got {self.beams}")
        if self.azimuth_step_deg <= 0 or self.max_range <= 0 or self.height <= 0 or self.range_noise < 0:
            raise ValueError("lidar azimuth_step_deg, max_range and height must be positive, range_noise >= 0")

    def directions(self) -> np.ndarray:
        """Unit ray directions, beam-major; ``beams * azimuths x 3``."""
        if self.beams == 0:
            return np.zeros((0, 3))
        elev = np.deg2rad(np.linspace(*self.elevation_deg, self.beams))
        azim = np.deg2rad(np.arange(0.0, 360.0, self.azimuth_step_deg))
        e, a = np.meshgrid(elev, azim, indexing="ij")
        return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def ray_box_distance(origins: np.ndarray, dirs: np.ndarray, box: Box3D) -> np.ndarray:
    """Entry distance of each ray into the box (slab method); ``inf`` on a miss."""
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box axes
    o = (np.broadcast_to(origins, dirs.shape) - box.center) @ rot.T
    d = dirs @ rot.T
    half = box.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = d == 0
    inside = np.abs(o) <= half
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    near = np.minimum(t1, t2).max(axis=1)
    far = np.maximum(t1, t2).min(axis=1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def cast_rays(origins: np.ndarray, dirs: np.ndarray, boxes, max_range: float):
    """Nearest hit per ray among boxes and the ground; returns ``(distance, label)``.

    ``label`` is the box index, ``GROUND`` or ``NO_HIT`` (distance ``inf``).
    """
    n = len(dirs)
    dist = np.full(n, np.inf)
    label = np.full(n, NO_HIT, dtype=np.int64)
    oz = np.broadcast_to(origins, dirs.shape)[:, 2]
    down = dirs[:, 2] < 0
    t_ground = np.full(n, np.inf)
    t_ground[down] = -oz[down] / dirs[down, 2]
    closer = t_ground < dist
    dist[closer], label[closer] = t_ground[closer], GROUND
    for i, box in enumerate(boxes):
        t = ray_box_distance(origins, dirs, box)
        closer = t < dist
        dist[closer], label[closer] = t[closer], i
    out = dist > max_range
    dist[out], label[out] = np.inf, NO_HIT
    return dist, label


def render_pointcloud(boxes, config: LidarConfig, rng: np.random.Generator) -> np.ndarray:
    """``N x 4`` float32 points ``(x, y, z, intensity)`` in the sensor frame."""
    dirs = config.directions()
    if len(dirs) == 0:
        return np.zeros((0, 4), np.float32)
    origin = np.array([0.0, 0.0, config.height])
    dist, label = cast_rays(origin, dirs, boxes, config.max_range)
    hit = np.isfinite(dist)
    noise = rng.normal(0.0, config.range_noise, len(dirs)) if config.range_noise > 0 else np.zeros(len(dirs))
    r = dist[hit] + noise[hit]
    pts = origin + dirs[hit] * r[:, None]
    lab = label[hit]
    intensity = np.array([INTENSITY[GROUND if l == GROUND else boxes[l].cls] for l in lab])
    return np.column_stack([pts, intensity]).astype(np.float32) if len(pts) else np.zeros((0, 4), np.float32)


def render_image_features(boxes, cam: CameraModel, channels: int = 8, scales=PYRAMID_SCALES,
                          max_range: float = 60.0, supersample: int = 2) -> list[FeatureMap2D]:
    """Class one-hot, bias, inverse depth and background channels at each scale.

    Channel layout: pedestrian, car, cyclist, bias, inverse depth (``1/max(d, 1)``,
    zero where no surface is hit), background flag; further channels stay zero.
    Rays are cast through a grid ``supersample`` times finer than the finest
    scale; every map pixel averages the rays inside its footprint, so class
    channels hold coverage fractions.
    """
    if channels < MIN_FEATURE_CHANNELS:
        raise ValueError(f"need at least {MIN_FEATURE_CHANNELS} feature channels, got {channels}")
    base = scales[0] / supersample
    if any((s / base) % 1 for s in scales):
        raise ValueError(f"scales {scales} must be multiples of the base step {base}")
    cam_center = cam.extrinsics.inverse().apply(np.zeros((1, 3)))[0]
    bw, bh = int(cam.width // base), int(cam.height // base)
    cols, rows = np.meshgrid((np.arange(bw) + 0.5) * base, (np.arange(bh) + 0.5) * base)
    uv = np.column_stack([cols.ravel(), rows.ravel()])
    dirs = back_project(uv, np.ones(len(uv)), cam) - cam_center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dist, label = cast_rays(cam_center, dirs, boxes, max_range)
    vals = np.zeros((len(uv), channels))
    for i, box in enumerate(boxes):
        vals[label == i, box.cls] = 1.0
    vals[:, 3] = 1.0
    if channels > 4:
        vals[:, 4] = np.where(np.isfinite(dist), 1.0 / np.maximum(dist, 1.0), 0.0)
    if channels > 5:
        vals[:, 5] = (label < 0).astype(np.float64)
    vals = vals.reshape(bh, bw, channels)
    pyramid = []
    for s in scales:
        f = int(round(s / base))
        h, w = max(1, bh // f), max(1, bw // f)
        pooled = vals[:h * f, :w * f].reshape(h, f, w, f, channels).mean(axis=(1, 3))
        pyramid.append(FeatureMap2D(pooled.astype(np.float32), float(s)))
    return pyramid
