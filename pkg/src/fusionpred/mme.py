"""Multi-modal Mamba encoder: LiDAR<->image projection branches and BiMamba blocks.

The SSM used here is the diagonal (per-channel) linear recurrence

    h_t = a_t * h_{t-1} + b_t * x_t
    y_t = sum_n c_t[n] * h_t[n] + d * x_t

Padded positions feed no input, emit zero and leave the state untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraModel, FeatureMap2D, GridSpec, SparseFeatureMap, project_points
from .serialization import GroupedSequence, WindowSpec, group, positional_encoding, serialize, ungroup

LIDAR, IMAGE = 0, 1


def silu(x):
    return x / (1.0 + np.exp(-x))


def softplus(x):
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------------------
# SSM parameters and scan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SsmParams:
    """One scan direction: causal depthwise conv + diagonal SSM.

    ``a_bar``/``b_bar``/``c`` are the fixed (LTI) discretised parameters.  When
    ``w_delta`` is set the block uses the selective form instead: step size,
    input and readout matrices are computed from the convolved input and
    ``a_t = exp(delta_t * -exp(a_log))``.
    """

    a_bar: np.ndarray  # E x N
    b_bar: np.ndarray  # E x N
    c: np.ndarray  # E x N
    d: np.ndarray  # E
    conv_weight: np.ndarray  # E x kernel
    conv_bias: np.ndarray  # E
    w_delta: np.ndarray | None = None  # E x E
    b_delta: np.ndarray | None = None  # E
    w_b: np.ndarray | None = None  # E x N
    w_c: np.ndarray | None = None  # E x N
    a_log: np.ndarray | None = None  # E x N

    def __post_init__(self):
        for name in ("a_bar", "b_bar", "c", "d", "conv_weight", "conv_bias",
                     "w_delta", "b_delta", "w_b", "w_c", "a_log"):
            val = getattr(self, name)
            if val is None:
                continue
            val = np.asarray(val, dtype=np.float64)
            if not np.all(np.isfinite(val)):
                raise ValueError(f"SsmParams.{name} is not finite")
            object.__setattr__(self, name, val)
        if np.any(np.abs(self.a_bar) >= 1):
            raise ValueError("|a_bar| must be < 1 for a stable recurrence")

    @property
    def channels(self) -> int:
        return self.a_bar.shape[0]

    @property
    def state_dim(self) -> int:
        return self.a_bar.shape[1]

    @property
    def selective(self) -> bool:
        return self.w_delta is not None

    @classmethod
    def random(cls, channels: int, state_dim: int = 16, kernel: int = 4, seed=0,
               selective: bool = True) -> "SsmParams":
        rng = np.random.default_rng(seed)
        a_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1)))
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), channels))
        a_bar = np.exp(dt[:, None] * -np.exp(a_log))
        scale = 1.0 / np.sqrt(channels)
        kw = dict(
            a_bar=a_bar,
            b_bar=dt[:, None] * rng.normal(size=(channels, state_dim)),
            c=rng.normal(size=(channels, state_dim)) * scale,
            d=np.ones(channels),
            conv_weight=rng.normal(size=(channels, kernel)) / np.sqrt(kernel),
            conv_bias=np.zeros(channels),
        )
        if selective:
            kw.update(
                w_delta=rng.normal(size=(channels, channels)) * scale * 0.1,
                b_delta=dt + np.log(-np.expm1(-dt)),  # softplus^-1(dt)
                w_b=rng.normal(size=(channels, state_dim)) * scale,
                w_c=rng.normal(size=(channels, state_dim)) * scale,
                a_log=a_log,
            )
        return cls(**kw)

    @classmethod
    def zeros(cls, channels: int, state_dim: int = 16, kernel: int = 4) -> "SsmParams":
        z = np.zeros((channels, state_dim))
        return cls(z, z, z, np.zeros(channels), np.zeros((channels, kernel)), np.zeros(channels))


def _scan_sequential(a, bx, c):
    """a, bx: (B, T, E, N); c broadcastable to that.  Returns (B, T, E)."""
    c = np.broadcast_to(c, a.shape)
    h = np.zeros(a.shape[:1] + a.shape[2:])
    out = np.empty(a.shape[:3])
    for t in range(a.shape[1]):
        h = a[:, t] * h + bx[:, t]
        out[:, t] = np.einsum("ben,ben->be", c[:, t], h)
    return out


def _scan_chunked(a, bx, c, chunk: int):
    """Blocked evaluation: a closed-form decay matrix inside each chunk, state carried between."""
    c = np.broadcast_to(c, a.shape)
    bsz, t_len = a.shape[:2]
    h = np.zeros(a.shape[:1] + a.shape[2:])
    out = np.empty(a.shape[:3])
    for s in range(0, t_len, chunk):
        e = min(s + chunk, t_len)
        ab, xb = a[:, s:e], bx[:, s:e]
        n = e - s
        decay = np.zeros((bsz, n, n) + a.shape[2:])  # decay[:, t, j] = prod a[j+1..t]
        carry = np.empty((bsz, n) + a.shape[2:])  # prod a[0..t]
        for t in range(n):
            if t:
                decay[:, t, :t] = decay[:, t - 1, :t] * ab[:, t:t + 1]
                carry[:, t] = carry[:, t - 1] * ab[:, t]
            else:
                carry[:, 0] = ab[:, 0]
            decay[:, t, t] = 1.0
        hs = np.einsum("btjen,bjen->bten", decay, xb) + carry * h[:, None]
        out[:, s:e] = np.einsum("bten,bten->bte", c[:, s:e], hs)
        h = hs[:, -1]
    return out


def scan(a, bx, c, method: str = "chunked", chunk: int = 16):
    if method == "sequential":
        return _scan_sequential(a, bx, c)
    if method == "chunked":
        return _scan_chunked(a, bx, c, chunk)
    raise ValueError(f"unknown scan method {method!r}")


def ssm_scan(sequence: np.ndarray, mask: np.ndarray | None, params: SsmParams,
             method: str = "chunked", chunk: int = 16) -> np.ndarray:
    """Run the fixed-parameter SSM over a ``T x E`` sequence."""
    x = np.asarray(sequence, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("sequence must be T x E with T >= 1")
    if not np.all(np.isfinite(x)):
        raise ValueError("sequence contains non-finite values")
    if x.shape[1] != params.channels:
        raise ValueError(f"sequence has {x.shape[1]} channels, params expect {params.channels}")
    m = np.ones(len(x), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    a = np.where(m[:, None, None], params.a_bar[None], 1.0)
    bx = params.b_bar[None] * (x * m[:, None])[:, :, None]
    y = scan(a[None], bx[None], params.c[None, None], method, chunk)[0]
    return np.where(m[:, None], y + params.d * x, 0.0)


# ---------------------------------------------------------------------------
# BiMamba block
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiMambaParams:
    norm_weight: np.ndarray  # D
    w_in: np.ndarray  # D x 2E  (x branch, gate branch)
    w_out: np.ndarray  # E x D
    fwd: SsmParams
    rev: SsmParams

    @property
    def dim(self) -> int:
        return self.w_in.shape[0]

    @property
    def inner(self) -> int:
        return self.w_out.shape[0]

    @classmethod
    def random(cls, dim: int, expand: int = 2, state_dim: int = 16, seed=0,
               selective: bool = True) -> "BiMambaParams":
        rng = np.random.default_rng(seed)
        inner = expand * dim
        fs, rs = rng.integers(0, 2**31, size=2)
        return cls(
            norm_weight=np.ones(dim),
            w_in=rng.normal(size=(dim, 2 * inner)) / np.sqrt(dim),
            w_out=rng.normal(size=(inner, dim)) / np.sqrt(inner) * 0.5,
            fwd=SsmParams.random(inner, state_dim, seed=int(fs), selective=selective),
            rev=SsmParams.random(inner, state_dim, seed=int(rs), selective=selective),
        )

    @classmethod
    def zeros(cls, dim: int, expand: int = 2, state_dim: int = 16) -> "BiMambaParams":
        inner = expand * dim
        return cls(np.zeros(dim), np.zeros((dim, 2 * inner)), np.zeros((inner, dim)),
                   SsmParams.zeros(inner, state_dim), SsmParams.zeros(inner, state_dim))

    def swapped(self) -> "BiMambaParams":
        return replace(self, fwd=self.rev, rev=self.fwd)


def _rms_norm(x, weight, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * weight


def _causal_conv(u, weight, bias):
    """Depthwise causal conv along axis 1 of (B, T, E)."""
    k = weight.shape[1]
    padded = np.concatenate([np.zeros((u.shape[0], k - 1, u.shape[2])), u], axis=1)
    out = np.broadcast_to(bias, u.shape).copy()
    t_len = u.shape[1]
    for j in range(k):
        out += weight[:, j] * padded[:, j:j + t_len]
    return out


def _direction(u, mask, p: SsmParams, method, chunk):
    m = mask[..., None]
    uc = silu(_causal_conv(u, p.conv_weight, p.conv_bias)) * m
    if p.selective:
        delta = softplus(uc @ p.w_delta + p.b_delta)
        a = np.exp(delta[..., None] * -np.exp(p.a_log))
        bx = delta[..., None] * (uc @ p.w_b)[:, :, None, :] * uc[..., None]
        c = (uc @ p.w_c)[:, :, None, :]
    else:
        a = np.broadcast_to(p.a_bar, uc.shape + (p.state_dim,))
        bx = p.b_bar * uc[..., None]
        c = p.c[None, None]
    a = np.where(m[..., None], a, 1.0)
    bx = bx * m[..., None]
    y = scan(a, bx, c, method, chunk)
    return (y + p.d * uc) * m


def bimamba_forward(grouped: GroupedSequence, params: BiMambaParams, gating: bool = True,
                    method: str = "chunked", chunk: int = 16) -> GroupedSequence:
    """Bidirectional Mamba over every group independently (state resets per group)."""
    x = grouped.groups
    if x.shape[-1] != params.dim:
        raise ValueError(f"feature dim {x.shape[-1]} does not match block dim {params.dim}")
    if params.fwd.channels != params.inner or params.rev.channels != params.inner:
        raise ValueError("SSM channels do not match the block's inner dim")
    mask = grouped.mask.astype(np.float64)
    xz = _rms_norm(x, params.norm_weight) @ params.w_in
    u, z = xz[..., :params.inner] * mask[..., None], xz[..., params.inner:]
    y_fwd = _direction(u, mask, params.fwd, method, chunk)
    y_rev = _direction(u[:, ::-1], mask[:, ::-1], params.rev, method, chunk)[:, ::-1]
    y = y_fwd + y_rev
    if gating:
        y = y * silu(z)
    out = x + (y @ params.w_out) * mask[..., None]
    return GroupedSequence(out, grouped.mask, grouped.permutation)


# ---------------------------------------------------------------------------
# fused feature sets and the MM-block
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusedFeatureSet:
    features: np.ndarray  # M x D
    coords: np.ndarray  # M x 3 int
    modality: np.ndarray  # M, LIDAR or IMAGE
    source_index: np.ndarray  # M, index into the originating modality's list

    def __len__(self):
        return len(self.features)

    def with_features(self, feats: np.ndarray) -> "FusedFeatureSet":
        return replace(self, features=feats)


def mm_block_forward(fused: FusedFeatureSet, spec: WindowSpec, group_size: int,
                     params: BiMambaParams, **scan_kw) -> FusedFeatureSet:
    """Position-encode, serialize, group, BiMamba, and scatter back to input order.

    The positional encoding is taken in the partition frame (x/y swapped for
    the Y-axis partition).
    """
    if len(fused) == 0:
        return fused
    frame = fused.coords[:, [1, 0, 2]] if spec.axis == "y" else fused.coords
    feats = fused.features + positional_encoding(frame, fused.features.shape[1])
    ordered, perm = serialize(SparseFeatureMap(feats, fused.coords), spec)
    grouped = bimamba_forward(group(ordered, group_size, permutation=perm), params, **scan_kw)
    out = np.empty_like(feats)
    out[perm] = ungroup(grouped)
    return fused.with_features(out)


# ---------------------------------------------------------------------------
# projection branches
# ---------------------------------------------------------------------------

def _image_feature_set(image_feats: FeatureMap2D, offset: int = 0):
    h, w = image_feats.height, image_feats.width
    rows, cols = np.mgrid[0:h, 0:w]
    coords = np.column_stack([cols.ravel(), rows.ravel(), np.zeros(h * w, dtype=np.int64)])
    return image_feats.values.reshape(h * w, -1), coords, offset + np.arange(h * w)


def lidar_to_image_fuse(voxels: SparseFeatureMap, grid: GridSpec, cam: CameraModel,
                        image_feats: FeatureMap2D, image_offset: int = 0) -> FusedFeatureSet:
    """Voxels projecting inside the image join the image features in pixel-grid space."""
    centers = grid.cell_center(voxels.coords)
    uv, depth, valid = project_points(centers, cam) if len(voxels) else (np.zeros((0, 2)), np.zeros(0), np.zeros(0, bool))
    with np.errstate(invalid="ignore"):
        inside = valid & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
    keep = np.flatnonzero(inside)
    pix = np.rint(uv[keep] / image_feats.scale).astype(np.int64)
    pix[:, 0] = np.clip(pix[:, 0], 0, image_feats.width - 1)
    pix[:, 1] = np.clip(pix[:, 1], 0, image_feats.height - 1)
    vox_coords = np.column_stack([pix, np.zeros(len(keep), dtype=np.int64)])
    img_f, img_c, img_idx = _image_feature_set(image_feats, image_offset)
    return FusedFeatureSet(
        features=np.vstack([voxels.features[keep], img_f]),
        coords=np.vstack([vox_coords, img_c]).astype(np.int64),
        modality=np.concatenate([np.full(len(keep), LIDAR), np.full(len(img_idx), IMAGE)]),
        source_index=np.concatenate([keep, img_idx]),
    )


NEIGHBORS_6 = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
NEIGHBORS_26 = np.array([o for o in np.ndindex(3, 3, 3) if o != (1, 1, 1)]) - 1


def association_candidates(voxels: SparseFeatureMap, grid: GridSpec, connectivity: int = 6) -> np.ndarray:
    """Non-empty voxel cells (input order) followed by their empty in-extent neighbours (sorted)."""
    offsets = {6: NEIGHBORS_6, 26: NEIGHBORS_26}.get(connectivity)
    if offsets is None:
        raise ValueError("connectivity must be 6 or 26")
    occupied = voxels.coords
    if len(occupied) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    ex = grid.extent
    neigh = (occupied[:, None, :] + offsets[None]).reshape(-1, 3)
    neigh = neigh[grid.in_extent(neigh)]
    flat = lambda c: (c[:, 0] * ex[1] + c[:, 1]) * ex[2] + c[:, 2]
    empty = np.setdiff1d(flat(neigh), flat(occupied))
    empty_cells = np.column_stack([empty // (ex[1] * ex[2]), (empty // ex[2]) % ex[1], empty % ex[2]])
    return np.vstack([occupied, empty_cells]).astype(np.int64)


@dataclass(frozen=True)
class Association:
    candidates: np.ndarray  # C x 3 cells
    candidate_uv: np.ndarray  # C x 2 in feature-map pixels (NaN when behind the camera)
    candidate_depth: np.ndarray  # C
    chosen: np.ndarray  # per image feature: candidate index or -1


def select_candidates(uv: np.ndarray, depth: np.ndarray, valid: np.ndarray, pixels: np.ndarray,
                      radius: float, max_candidates: int = 3) -> np.ndarray:
    """Index of the chosen candidate for every pixel, or -1.

    Candidates within ``radius`` of a pixel are ranked by (squared distance,
    index); of the first ``max_candidates`` the smallest (depth, index) wins.
    """
    chosen = np.full(len(pixels), -1, dtype=np.int64)
    ok = np.flatnonzero(valid)
    if len(ok) == 0:
        return chosen
    tree = cKDTree(uv[ok])
    hits = tree.query_ball_point(pixels, r=radius)
    r2 = radius * radius
    for f, local in enumerate(hits):
        if not local:
            continue
        idx = ok[np.asarray(local, dtype=np.int64)]
        d2 = (uv[idx, 0] - pixels[f, 0]) ** 2 + (uv[idx, 1] - pixels[f, 1]) ** 2
        keep = d2 <= r2
        idx, d2 = idx[keep], d2[keep]
        if len(idx) == 0:
            continue
        nearest = idx[np.lexsort((idx, d2))[:max_candidates]]
        chosen[f] = nearest[np.lexsort((nearest, depth[nearest]))[0]]
    return chosen


def find_associations(voxels: SparseFeatureMap, grid: GridSpec, cam: CameraModel,
                      image_feats: FeatureMap2D, radius: float = 4.0, connectivity: int = 6,
                      max_candidates: int = 3) -> Association:
    """For each image feature pick, among its <=3 nearest projected candidates
    within ``radius`` (feature-map pixels), the one closest to the camera."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    cands = association_candidates(voxels, grid, connectivity)
    h, w = image_feats.height, image_feats.width
    chosen = np.full(h * w, -1, dtype=np.int64)
    if len(cands) == 0:
        return Association(cands, np.zeros((0, 2)), np.zeros(0), chosen)
    uv, depth, valid = project_points(grid.cell_center(cands), cam)
    uv = uv / image_feats.scale
    ok = np.flatnonzero(valid)
    if len(ok) == 0:
        return Association(cands, uv, depth, chosen)
    rows, cols = np.mgrid[0:h, 0:w]
    pix = np.column_stack([cols.ravel(), rows.ravel()]).astype(np.float64)
    chosen[:] = select_candidates(uv, depth, valid, pix, radius, max_candidates)
    return Association(cands, uv, depth, chosen)


def image_to_lidar_associate(voxels: SparseFeatureMap, grid: GridSpec, cam: CameraModel,
                             image_feats: FeatureMap2D, radius: float = 4.0, connectivity: int = 6,
                             image_offset: int = 0) -> FusedFeatureSet:
    assoc = find_associations(voxels, grid, cam, image_feats, radius, connectivity)
    return _fuse_3d(voxels, [(image_feats, assoc, image_offset)])


def _fuse_3d(voxels: SparseFeatureMap, per_camera) -> FusedFeatureSet:
    feats, coords, mods, srcs = [voxels.features], [voxels.coords], [np.full(len(voxels), LIDAR)], [np.arange(len(voxels))]
    for image_feats, assoc, offset in per_camera:
        sel = np.flatnonzero(assoc.chosen >= 0)
        flat = image_feats.values.reshape(-1, image_feats.channels)
        feats.append(flat[sel])
        coords.append(assoc.candidates[assoc.chosen[sel]])
        mods.append(np.full(len(sel), IMAGE))
        srcs.append(offset + sel)
    dim = voxels.features.shape[1]
    return FusedFeatureSet(
        features=np.vstack([f.reshape(-1, dim) for f in feats]),
        coords=np.vstack(coords).astype(np.int64).reshape(-1, 3),
        modality=np.concatenate(mods).astype(np.int64),
        source_index=np.concatenate(srcs).astype(np.int64),
    )


# ---------------------------------------------------------------------------
# full encoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MmeConfig:
    window_3d: tuple = (12, 12, 4)
    window_2d: tuple = (8, 8, 1)
    group_size: int = 256
    num_blocks: int = 4
    radius: float = 4.0
    connectivity: int = 6
    state_dim: int = 16
    expand: int = 2


@dataclass(frozen=True)
class MmeParams:
    image_to_lidar: list
    lidar_to_image: list

    @classmethod
    def random(cls, dim: int, config: MmeConfig = MmeConfig(), seed=0) -> "MmeParams":
        rng = np.random.default_rng(seed)
        seeds = rng.integers(0, 2**31, size=2 * config.num_blocks)
        mk = lambda s: BiMambaParams.random(dim, config.expand, config.state_dim, seed=int(s))
        return cls([mk(s) for s in seeds[:config.num_blocks]], [mk(s) for s in seeds[config.num_blocks:]])

    @classmethod
    def zeros(cls, dim: int, config: MmeConfig = MmeConfig()) -> "MmeParams":
        mk = lambda: BiMambaParams.zeros(dim, config.expand, config.state_dim)
        return cls([mk() for _ in range(config.num_blocks)], [mk() for _ in range(config.num_blocks)])


def _run_blocks(fused: FusedFeatureSet, window: Sequence[int], blocks, group_size: int) -> FusedFeatureSet:
    for i, params in enumerate(blocks):
        spec = WindowSpec(*window, axis="x" if i % 2 == 0 else "y")
        fused = mm_block_forward(fused, spec, group_size, params)
    return fused


def mme_forward(voxels: SparseFeatureMap, image_feats: Sequence[FeatureMap2D], cameras: Sequence[CameraModel],
                grid: GridSpec, params: MmeParams, config: MmeConfig = MmeConfig()):
    """Image->LiDAR branch in voxel space, then LiDAR->image per camera in pixel space.

    Returns ``(updated_voxels, updated_image_feats)``; shapes match the inputs.
    Features that take no part in a branch pass through it unchanged.
    """
    if len(image_feats) != len(cameras):
        raise ValueError("one feature map per camera required")
    dims = {voxels.features.shape[1]} | {f.channels for f in image_feats}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims across modalities: {sorted(dims)}")
    offsets = np.cumsum([0] + [f.height * f.width for f in image_feats])
    vox = voxels.features.copy()
    img = np.vstack([f.values.reshape(-1, f.channels) for f in image_feats]) if image_feats else np.zeros((0, vox.shape[1]))

    def maps():
        return [FeatureMap2D(img[offsets[j]:offsets[j + 1]].reshape(f.values.shape), f.scale)
                for j, f in enumerate(image_feats)]

    # image -> lidar
    per_cam = []
    for j, (fm, cam) in enumerate(zip(image_feats, cameras)):
        per_cam.append((fm, find_associations(voxels, grid, cam, fm, config.radius, config.connectivity), offsets[j]))
    fused = _fuse_3d(SparseFeatureMap(vox, voxels.coords), per_cam)
    fused = _run_blocks(fused, config.window_3d, params.image_to_lidar, config.group_size)
    _scatter(fused, vox, img)

    # lidar -> image
    for j, cam in enumerate(cameras):
        fm = maps()[j]
        fused = lidar_to_image_fuse(SparseFeatureMap(vox, voxels.coords), grid, cam, fm, offsets[j])
        fused = _run_blocks(fused, config.window_2d, params.lidar_to_image, config.group_size)
        _scatter(fused, vox, img)
    return SparseFeatureMap(vox, voxels.coords), maps()


def _scatter(fused: FusedFeatureSet, vox: np.ndarray, img: np.ndarray) -> None:
    lid = fused.modality == LIDAR
    vox[fused.source_index[lid]] = fused.features[lid]
    img[fused.source_index[~lid]] = fused.features[~lid]
