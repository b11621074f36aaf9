"""Rigid transforms, pinhole projection, voxel grids and bilinear sampling.

Conventions used across the package:

* Sensor (LiDAR / ego) frame: x forward, y left, z up, meters.
* Camera frame: x right, y down, z along the optical axis.
* Pixel coordinates are ``(u, v)`` = (column, row).
* A BEV map produced by :func:`bev_scatter` is indexed ``values[ix, iy]``;
  continuous BEV cell coordinates are sampled with ``u = iy``, ``v = ix``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise ValueError("rigid transform must be finite")
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "RigidTransform":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        """3x4 ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    @property
    def yaw(self) -> float:
        """Heading of the rotated x-axis projected on the ground plane."""
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))


# sensor (x fwd, y left, z up) -> camera (x right, y down, z fwd)
SENSOR_TO_OPTICAL = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    extrinsics: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "intrinsics", k)

    @classmethod
    def forward_facing(cls, yaw: float, fov_deg: float, width: int, height: int,
                       position: Sequence[float] = (0.0, 0.0, 0.0)) -> "CameraModel":
        """Pinhole camera looking along sensor heading ``yaw`` with horizontal ``fov_deg``."""
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        k = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
        mount = RigidTransform.from_yaw(yaw, position)  # camera body -> sensor
        body_to_cam = RigidTransform(SENSOR_TO_OPTICAL, np.zeros(3))
        return cls(k, body_to_cam.compose(mount.inverse()), width, height)

    def parameter_vector(self) -> np.ndarray:
        """Row-major 3x3 intrinsics followed by row-major 3x4 extrinsics (21 values)."""
        return np.concatenate([self.intrinsics.ravel(), self.extrinsics.matrix().ravel()])


def project_points(points: np.ndarray, cam: CameraModel):
    """Project sensor-frame points to pixels.

    Returns ``(uv, depth, valid)``. ``valid`` is False for non-finite points and
    for points with non-positive camera depth; their ``uv`` is NaN. No image
    bounds test is applied.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))[:, :3]
    finite = np.all(np.isfinite(pts), axis=1)
    safe = np.where(finite[:, None], pts, 0.0)
    cam_pts = cam.extrinsics.apply(safe)
    depth = cam_pts[:, 2]
    valid = finite & (depth > 0)
    uv = np.full((len(pts), 2), np.nan)
    z = depth[valid]
    proj = cam_pts[valid] @ cam.intrinsics.T
    uv[valid] = proj[:, :2] / z[:, None]
    depth = np.where(finite, depth, np.nan)
    return uv, depth, valid


def back_project(uv: np.ndarray, depth: np.ndarray, cam: CameraModel) -> np.ndarray:
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    homo = np.hstack([uv, np.ones((len(uv), 1))])
    rays = np.linalg.solve(cam.intrinsics, homo.T).T
    cam_pts = rays * depth[:, None]
    return cam.extrinsics.inverse().apply(cam_pts)


@dataclass(frozen=True)
class FeatureMap2D:
    values: np.ndarray  # H x W x D
    scale: float = 1.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim == 2:
            vals = vals[:, :, None]
        if vals.ndim != 3 or vals.shape[0] < 1 or vals.shape[1] < 1:
            raise ValueError(f"feature map must be H x W x D, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def bilinear_sample_many(values: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised bilinear sampling of an ``H x W x D`` array.

    Samples with no in-bounds neighbour (``u <= -1``, ``u >= W`` and the same
    for ``v``) and non-finite coordinates give zeros; samples in the one-cell
    border band are clamped onto the border.
    """
    h, w = values.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    shape = np.broadcast_shapes(u.shape, v.shape)
    u = np.broadcast_to(u, shape).ravel()
    v = np.broadcast_to(v, shape).ravel()
    inside = np.isfinite(u) & np.isfinite(v) & (u > -1) & (u < w) & (v > -1) & (v < h)
    uc = np.clip(np.where(inside, u, 0.0), 0.0, w - 1)
    vc = np.clip(np.where(inside, v, 0.0), 0.0, h - 1)
    x0 = np.floor(uc).astype(np.int64)
    y0 = np.floor(vc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (uc - x0)[:, None]
    fy = (vc - y0)[:, None]
    out = ((values[y0, x0] * (1 - fx) + values[y0, x1] * fx) * (1 - fy)
           + (values[y1, x0] * (1 - fx) + values[y1, x1] * fx) * fy)
    out[~inside] = 0.0
    return out.reshape(shape + (values.shape[2],))


def bilinear_sample(fmap: FeatureMap2D, u: float, v: float) -> np.ndarray:
    return bilinear_sample_many(fmap.values, np.array([u]), np.array([v]))[0]


@dataclass(frozen=True)
class GridSpec:
    origin: np.ndarray
    cell_size: np.ndarray
    extent: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        cell = np.asarray(self.cell_size, dtype=np.float64).reshape(3)
        extent = np.asarray(self.extent).reshape(3)
        if np.any(cell <= 0):
            raise ValueError("cell_size must be strictly positive")
        if np.any(extent < 1) or np.any(extent != np.round(extent)):
            raise ValueError("extent must be positive integers")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "cell_size", cell)
        object.__setattr__(self, "extent", extent.astype(np.int64))

    @classmethod
    def from_range(cls, lo: Sequence[float], hi: Sequence[float], cell_size: Sequence[float]) -> "GridSpec":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        cell = np.asarray(cell_size, dtype=np.float64)
        extent = np.round((hi - lo) / cell).astype(np.int64)
        return cls(lo, cell, extent)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.cell_size * self.extent

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        """Integer cell index of each point (may lie outside the extent)."""
        pts = np.asarray(points, dtype=np.float64)[..., :3]
        return np.floor((pts - self.origin) / self.cell_size).astype(np.int64)

    def in_extent(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells)
        return np.all((cells >= 0) & (cells < self.extent), axis=-1)

    def cell_center(self, cells: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(cells, dtype=np.float64) + 0.5) * self.cell_size

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Metric points -> ``[0, 1]^3`` over the grid range."""
        return (np.asarray(points, dtype=np.float64) - self.origin) / (self.cell_size * self.extent)

    def denormalize(self, unit: np.ndarray) -> np.ndarray:
        return self.origin + np.asarray(unit, dtype=np.float64) * (self.cell_size * self.extent)


@dataclass(frozen=True)
class SparseFeatureMap:
    features: np.ndarray  # N x D
    coords: np.ndarray  # N x 3 int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError("features and coords disagree in length")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "coords", coords)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


VOXEL_STAT_DIM = 5  # count, centroid offset xyz, mean intensity


def voxel_projection(dim: int, seed: int = 0) -> np.ndarray:
    """Fixed linear map from per-cell statistics to ``dim`` features."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((VOXEL_STAT_DIM, dim)) / np.sqrt(VOXEL_STAT_DIM)


def cell_statistics(points: np.ndarray, grid: GridSpec):
    """Per non-empty cell: ``(coords, stats)`` with stats = count, centroid offset, mean intensity.

    Cells are returned in ascending row-major order of their index.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 3), np.int64), np.zeros((0, VOXEL_STAT_DIM))
    pts = np.atleast_2d(pts)
    intensity = pts[:, 3] if pts.shape[1] > 3 else np.zeros(len(pts))
    cells = grid.cell_of(pts[:, :3])
    keep = grid.in_extent(cells)
    cells, xyz, intensity = cells[keep], pts[keep, :3], intensity[keep]
    if len(cells) == 0:
        return np.zeros((0, 3), np.int64), np.zeros((0, VOXEL_STAT_DIM))
    ex = grid.extent
    flat = (cells[:, 0] * ex[1] + cells[:, 1]) * ex[2] + cells[:, 2]
    uniq, inv = np.unique(flat, return_inverse=True)
    count = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    centroid = np.stack([np.bincount(inv, weights=xyz[:, a], minlength=len(uniq)) for a in range(3)], axis=1)
    centroid /= count[:, None]
    mean_int = np.bincount(inv, weights=intensity, minlength=len(uniq)) / count
    coords = np.stack([uniq // (ex[1] * ex[2]), (uniq // ex[2]) % ex[1], uniq % ex[2]], axis=1)
    offset = centroid - grid.cell_center(coords)
    stats = np.column_stack([count, offset, mean_int])
    return coords.astype(np.int64), stats


def voxelize(points: np.ndarray, grid: GridSpec, dim: int = 16, seed: int = 0) -> SparseFeatureMap:
    """Bin ``(x, y, z[, intensity])`` points and encode each non-empty cell."""
    coords, stats = cell_statistics(np.asarray(points, dtype=np.float64), grid)
    return SparseFeatureMap(stats @ voxel_projection(dim, seed), coords)


def bev_scatter(sparse: SparseFeatureMap, grid: GridSpec) -> FeatureMap2D:
    """Collapse a sparse voxel map to a dense ``X x Y x D`` BEV map by max over z."""
    nx, ny = int(grid.extent[0]), int(grid.extent[1])
    dim = sparse.dim
    out = np.zeros((nx, ny, dim))
    if len(sparse) == 0:
        return FeatureMap2D(out)
    bad = ~grid.in_extent(sparse.coords)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise IndexError(f"voxel {idx} at {sparse.coords[idx].tolist()} outside grid extent {grid.extent.tolist()}")
    flat = sparse.coords[:, 0] * ny + sparse.coords[:, 1]
    filled = np.full((nx * ny, dim), -np.inf)
    np.maximum.at(filled, flat, sparse.features)
    hit = np.isfinite(filled[:, 0])
    out.reshape(nx * ny, dim)[hit] = filled[hit]
    return FeatureMap2D(out)


# ---------------------------------------------------------------------------
# BEV polygons (shared by the tracker and the metrics)
# ---------------------------------------------------------------------------

def box_corners_bev(center_xy, length: float, width: float, yaw: float) -> np.ndarray:
    """Counter-clockwise corners of a yaw-rotated rectangle."""
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center_xy, dtype=np.float64)[:2]


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp, out = out, []
        prev = inp[-1]
        prev_side = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0])
        for cur in inp:
            side = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0])
            if side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - side)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, side
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; CCW order."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64))))
    if len(pts) <= 2:
        return np.array(pts).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def wrap_angle(a):
    """Wrap to ``(-pi, pi]``."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


# ---------------------------------------------------------------------------
# Oriented boxes
# ---------------------------------------------------------------------------

PEDESTRIAN, CAR, CYCLIST = 0, 1, 2
CLASS_NAMES = ("pedestrian", "car", "cyclist")


@dataclass(frozen=True)
class Box3D:
    center: np.ndarray  # x, y, z (box centre) meters
    size: np.ndarray  # l, w, h
    yaw: float
    cls: int
    confidence: float = 1.0

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(size)) and np.isfinite(self.yaw)):
            raise ValueError("box fields must be finite")
        if np.any(size <= 0):
            raise ValueError(f"box sizes must be positive, got {size.tolist()}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        object.__setattr__(self, "cls", int(self.cls))
        object.__setattr__(self, "confidence", float(self.confidence))

    def corners_bev(self) -> np.ndarray:
        return box_corners_bev(self.center[:2], self.size[0], self.size[1], self.yaw)

    def transformed(self, pose: RigidTransform) -> "Box3D":
        """The same box seen through a yaw-only (plus translation) pose."""
        return Box3D(pose.apply(self.center[None])[0], self.size, self.yaw + pose.yaw, self.cls, self.confidence)


def _bev_overlap(a: Box3D, b: Box3D):
    pa, pb = a.corners_bev(), b.corners_bev()
    area_a, area_b = a.size[0] * a.size[1], b.size[0] * b.size[1]
    inter = polygon_area(clip_polygon(pa, pb)) if area_a > 0 and area_b > 0 else 0.0
    return pa, pb, area_a, area_b, max(inter, 0.0)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Intersection over union of the two rotated BEV rectangles."""
    _, _, area_a, area_b, inter = _bev_overlap(a, b)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def bev_giou(a: Box3D, b: Box3D) -> float:
    """Generalized IoU in BEV: ``IoU - (hull - union) / hull``; lies in (-1, 1]."""
    pa, pb, area_a, area_b, inter = _bev_overlap(a, b)
    union = area_a + area_b - inter
    hull = polygon_area(convex_hull(np.vstack([pa, pb])))
    if union <= 0 or hull <= 0:
        return -1.0
    return float(inter / union - (hull - union) / hull)
