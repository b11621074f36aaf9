"""Query decoder with multi-modal deformable attention over BEV and image features.

Each query predicts, per head, K offsets around its 3D reference point (in
normalized perception-range coordinates).  The resulting points are sampled
bilinearly from the BEV map (z dropped) and from every camera's multi-scale
image pyramid after projection.  Head ``m`` reads channel slice
``[m*d/M, (m+1)*d/M)`` of every map, so maps must carry ``d`` channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import CameraModel, FeatureMap2D, GridSpec, project_points

CAMERA_INPUT_DIM = 21
POINTS_PER_CHUNK = 8192


@dataclass(frozen=True)
class MdaConfig:
    num_heads: int = 8
    num_cameras: int = 2
    num_levels: int = 3
    num_points: int = 8
    dim: int = 48
    # offsets are multiplied by this fraction of the normalized range per axis
    offset_scale: float = 1.0 / 16.0
    camera_hidden: int = 32

    def __post_init__(self):
        for name in ("num_heads", "num_cameras", "num_levels", "num_points", "dim", "camera_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


@dataclass(frozen=True)
class QuerySet:
    features: np.ndarray  # Q x d
    reference_points: np.ndarray  # Q x 3 in [0, 1]^3

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        r = np.atleast_2d(np.asarray(self.reference_points, dtype=np.float64))
        if len(f) < 1 or len(f) != len(r) or r.shape[1] != 3:
            raise ValueError(f"need Q >= 1 matching features/reference points, got {f.shape} and {r.shape}")
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError("reference points must lie in [0, 1]^3")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "reference_points", r)

    def __len__(self) -> int:
        return len(self.features)

    def with_features(self, feats: np.ndarray) -> "QuerySet":
        return QuerySet(feats, self.reference_points)


@dataclass(frozen=True)
class MdaParams:
    w_offset: np.ndarray  # d x (M*K*3)
    b_offset: np.ndarray
    w_bev: np.ndarray  # d x (M*K)
    b_bev: np.ndarray
    w_img: np.ndarray  # d x (M*L*K), shared across cameras
    b_img: np.ndarray
    cam_w1: np.ndarray  # 21 x H
    cam_b1: np.ndarray
    cam_w2: np.ndarray  # H x d
    cam_b2: np.ndarray
    w_out: np.ndarray  # 2d x d, input is concat(image sum, bev)
    b_out: np.ndarray

    def __post_init__(self):
        for name, arr in vars(self).items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"MDA parameter {name} has non-finite entries")

    def check(self, config: MdaConfig) -> None:
        d, m, k, l = config.dim, config.num_heads, config.num_points, config.num_levels
        want = {
            "w_offset": (d, m * k * 3), "w_bev": (d, m * k), "w_img": (d, m * l * k),
            "cam_w1": (CAMERA_INPUT_DIM, config.camera_hidden), "cam_w2": (config.camera_hidden, d),
            "w_out": (2 * d, d),
        }
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"MDA parameter {name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def random(cls, config: MdaConfig = MdaConfig(), seed=0, scale: float = 1.0) -> "MdaParams":
        rng = np.random.default_rng(seed)
        d, m, k, l, h = config.dim, config.num_heads, config.num_points, config.num_levels, config.camera_hidden

        def lin(i, o):
            return rng.normal(0, scale / np.sqrt(i), (i, o)), rng.normal(0, 0.1 * scale, o)

        w_off, b_off = lin(d, m * k * 3)
        w_bev, b_bev = lin(d, m * k)
        w_img, b_img = lin(d, m * l * k)
        c1, cb1 = lin(CAMERA_INPUT_DIM, h)
        c2, cb2 = lin(h, d)
        w_out, b_out = lin(2 * d, d)
        return cls(w_off, b_off, w_bev, b_bev, w_img, b_img, c1, cb1, c2, cb2, w_out, b_out)

    @classmethod
    def zeros(cls, config: MdaConfig = MdaConfig()) -> "MdaParams":
        d, m, k, l, h = config.dim, config.num_heads, config.num_points, config.num_levels, config.camera_hidden
        z = np.zeros
        return cls(z((d, m * k * 3)), z(m * k * 3), z((d, m * k)), z(m * k), z((d, m * l * k)), z(m * l * k),
                   z((CAMERA_INPUT_DIM, h)), z(h), z((h, d)), z(d), z((2 * d, d)), z(d))


def softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def camera_input(cam: CameraModel) -> np.ndarray:
    """Row-major intrinsics (3x3) and extrinsics (3x4); intrinsics are divided
    by the image width so pixel-valued entries stay O(1)."""
    vec = cam.parameter_vector().copy()
    vec[:9] /= float(cam.width)
    return vec


def camera_embedding(cam: CameraModel, params: MdaParams) -> np.ndarray:
    hidden = np.maximum(camera_input(cam) @ params.cam_w1 + params.cam_b1, 0.0)
    return hidden @ params.cam_w2 + params.cam_b2


def _batch(query) -> tuple[np.ndarray, bool]:
    q = np.asarray(query, dtype=np.float64)
    return np.atleast_2d(q), q.ndim == 1


def sampling_points(query, ref, params: MdaParams, config: MdaConfig) -> np.ndarray:
    """Normalized 3D sampling points, shape ``(Q, M, K, 3)`` (or ``(M, K, 3)``)."""
    q, single = _batch(query)
    r = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    off = (q @ params.w_offset + params.b_offset).reshape(len(q), config.num_heads, config.num_points, 3)
    pts = r[:, None, None, :] + config.offset_scale * off
    return pts[0] if single else pts


def attention_weights(query, cameras: Sequence[CameraModel], params: MdaParams, config: MdaConfig):
    """Returns ``(bev, image)``: bev ``(Q, M, K)`` normalized over K and image
    ``(J, Q, M, L, K)`` normalized jointly over L x K."""
    q, single = _batch(query)
    n, m, k, l = len(q), config.num_heads, config.num_points, config.num_levels
    bev = softmax((q @ params.w_bev + params.b_bev).reshape(n, m, k), axis=-1)
    img = np.empty((len(cameras), n, m, l, k))
    for j, cam in enumerate(cameras):
        logits = ((q + camera_embedding(cam, params)) @ params.w_img + params.b_img).reshape(n, m, l * k)
        img[j] = softmax(logits, axis=-1).reshape(n, m, l, k)
    if single:
        return bev[0], img[:, 0]
    return bev, img


def sample_heads(values: np.ndarray, u: np.ndarray, v: np.ndarray, num_heads: int) -> np.ndarray:
    """Bilinear sampling where head ``m`` reads only its channel slice.

    ``values`` is ``H x W x (M*dh)``; ``u``/``v`` have shape ``(..., M, P)``.
    Returns ``(..., M, P, dh)``.  Out-of-bounds rules match
    :func:`fusionpred.geometry.bilinear_sample_many`.
    """
    h, w, c = values.shape
    dh = c // num_heads
    flat = np.ascontiguousarray(values).reshape(h * w * num_heads, dh)
    shape = u.shape
    head = np.broadcast_to(np.arange(num_heads)[:, None], shape[-2:])
    head = np.broadcast_to(head, shape).ravel()
    u = u.ravel()
    v = v.ravel()
    inside = np.isfinite(u) & np.isfinite(v) & (u > -1) & (u < w) & (v > -1) & (v < h)
    uc = np.clip(np.where(inside, u, 0.0), 0.0, w - 1)
    vc = np.clip(np.where(inside, v, 0.0), 0.0, h - 1)
    x0 = np.floor(uc).astype(np.int64)
    y0 = np.floor(vc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (uc - x0)[:, None]
    fy = (vc - y0)[:, None]

    def at(y, x):
        return flat[(y * w + x) * num_heads + head]

    out = (at(y0, x0) * (1 - fx) + at(y0, x1) * fx) * (1 - fy) + (at(y1, x0) * (1 - fx) + at(y1, x1) * fx) * fy
    out[~inside] = 0.0
    return out.reshape(shape + (dh,))


def bev_pixel_coords(metric: np.ndarray, grid: GridSpec):
    """Continuous ``(u, v)`` into a BEV map indexed ``[x_cell, y_cell]``."""
    cont = (metric[..., :2] - grid.origin[:2]) / grid.cell_size[:2] - 0.5
    return cont[..., 1], cont[..., 0]


def aggregate_bev(points, weights, bev_map: FeatureMap2D, grid: GridSpec) -> np.ndarray:
    """Per head, weighted sum over K of BEV samples; heads concatenated."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 3
    pts = pts[None] if single else pts
    wts = np.asarray(weights)[None] if single else np.asarray(weights)
    m = pts.shape[1]
    u, v = bev_pixel_coords(grid.denormalize(pts), grid)
    samples = sample_heads(bev_map.values, u, v, m)
    out = np.einsum("qmk,qmkc->qmc", wts, samples).reshape(len(pts), -1)
    return out[0] if single else out


def aggregate_image(points, weights, pyramids: Sequence[Sequence[FeatureMap2D]], cameras: Sequence[CameraModel],
                    grid: GridSpec) -> np.ndarray:
    """Per camera, weighted sum over levels and points; shape ``(J, Q, d)``.

    ``weights`` is ``(J, Q, M, L, K)``.  Points behind a camera sample zero.
    """
    pts = np.asarray(points, dtype=np.float64)
    wts = np.asarray(weights)
    single = pts.ndim == 3
    if single:
        pts, wts = pts[None], wts[:, None]
    n, m, k, _ = pts.shape
    metric = grid.denormalize(pts).reshape(-1, 3)
    outs = []
    for j, (cam, levels) in enumerate(zip(cameras, pyramids)):
        uv, _, valid = project_points(metric, cam)
        uv = np.where(valid[:, None], uv, np.nan).reshape(n, m, k, 2)
        acc = np.zeros((n, m, levels[0].channels // m))
        for l, fmap in enumerate(levels):
            s = sample_heads(fmap.values, uv[..., 0] / fmap.scale, uv[..., 1] / fmap.scale, m)
            acc = acc + np.einsum("qmk,qmkc->qmc", wts[j, :, :, l], s)
        outs.append(acc.reshape(n, -1))
    out = np.stack(outs)
    return out[:, 0] if single else out


def _check_context(bev_map, pyramids, cameras, config: MdaConfig) -> None:
    if bev_map.channels != config.dim:
        raise ValueError(f"BEV map has {bev_map.channels} channels, expected {config.dim}")
    if len(pyramids) != len(cameras):
        raise ValueError(f"{len(pyramids)} image pyramids for {len(cameras)} cameras")
    for j, levels in enumerate(pyramids):
        if len(levels) != config.num_levels:
            raise ValueError(f"camera {j} has {len(levels)} levels, expected {config.num_levels}")
        for l, f in enumerate(levels):
            if f.channels != config.dim:
                raise ValueError(f"camera {j} level {l} has {f.channels} channels, expected {config.dim}")


def mda_forward(queries: QuerySet, bev_map: FeatureMap2D, pyramids, cameras, grid: GridSpec,
                params: MdaParams, config: MdaConfig = MdaConfig(), chunk: int | None = None,
                query_input: np.ndarray | None = None) -> np.ndarray:
    """``W_out . concat(sum_j V_img_j, V_bev) + b`` for every query, ``Q x d``.

    ``query_input`` overrides the features used to predict offsets and weights
    (the decoder passes normalized features plus the positional embedding).
    ``chunk`` bounds memory by processing queries in slices; by default each
    slice holds about :data:`POINTS_PER_CHUNK` sampling points so the working
    set, and with it the per-point cost, does not depend on K.
    """
    _check_context(bev_map, pyramids, cameras, config)
    params.check(config)
    feats = queries.features if query_input is None else np.atleast_2d(query_input)
    if feats.shape[1] != config.dim:
        raise ValueError(f"query dim {feats.shape[1]} != {config.dim}")
    refs = queries.reference_points
    step = chunk or max(1, POINTS_PER_CHUNK // (config.num_heads * config.num_points))
    out = np.empty((len(feats), config.dim))
    for s in range(0, len(feats), step):
        q, r = feats[s:s + step], refs[s:s + step]
        pts = sampling_points(q, r, params, config)
        w_bev, w_img = attention_weights(q, cameras, params, config)
        v_bev = aggregate_bev(pts, w_bev, bev_map, grid)
        v_img = aggregate_image(pts, w_img, pyramids, cameras, grid).sum(axis=0)
        out[s:s + step] = np.concatenate([v_img, v_bev], axis=1) @ params.w_out + params.b_out
    return out


# --- decoder -------------------------------------------------------------------

@dataclass(frozen=True)
class MdaContext:
    bev_map: FeatureMap2D
    pyramids: Sequence[Sequence[FeatureMap2D]]
    cameras: Sequence[CameraModel]
    grid: GridSpec


@dataclass(frozen=True)
class DecoderLayerParams:
    norm1: tuple
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    norm2: tuple
    mda: MdaParams
    norm3: tuple
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray

    @classmethod
    def random(cls, config: MdaConfig, seed=0, ffn_dim: int | None = None) -> "DecoderLayerParams":
        rng = np.random.default_rng(seed)
        d = config.dim
        f = ffn_dim or 2 * d

        def lin(i, o):
            return rng.normal(0, 1 / np.sqrt(i), (i, o)), rng.normal(0, 0.1, o)

        norm = lambda: (1 + rng.normal(0, 0.1, d), rng.normal(0, 0.1, d))
        q, k, v, o = lin(d, d), lin(d, d), lin(d, d), lin(d, d)
        f1, f2 = lin(d, f), lin(f, d)
        mda = MdaParams.random(config, seed=int(rng.integers(1 << 31)))
        return cls(norm(), *q, *k, *v, *o, norm(), mda, norm(), *f1, *f2)

    @classmethod
    def zeros(cls, config: MdaConfig, ffn_dim: int | None = None) -> "DecoderLayerParams":
        d = config.dim
        f = ffn_dim or 2 * d
        z = np.zeros
        norm = lambda: (z(d), z(d))
        return cls(norm(), z((d, d)), z(d), z((d, d)), z(d), z((d, d)), z(d), z((d, d)), z(d),
                   norm(), MdaParams.zeros(config), norm(), z((d, f)), z(f), z((f, d)), z(d))


@dataclass(frozen=True)
class DecoderParams:
    w_pos: np.ndarray  # 3 x d, query positional embedding of reference points
    b_pos: np.ndarray
    layers: list = field(default_factory=list)

    @classmethod
    def random(cls, config: MdaConfig = MdaConfig(), num_layers: int = 6, seed=0) -> "DecoderParams":
        rng = np.random.default_rng(seed)
        layers = [DecoderLayerParams.random(config, seed=int(rng.integers(1 << 31))) for _ in range(num_layers)]
        return cls(rng.normal(0, 1.0, (3, config.dim)), rng.normal(0, 0.1, config.dim), layers)

    @classmethod
    def zeros(cls, config: MdaConfig = MdaConfig(), num_layers: int = 6) -> "DecoderParams":
        return cls(np.zeros((3, config.dim)), np.zeros(config.dim),
                   [DecoderLayerParams.zeros(config) for _ in range(num_layers)])


def layer_norm(x: np.ndarray, norm: tuple, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * norm[0] + norm[1]


def gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def self_attention(x: np.ndarray, pos: np.ndarray, layer: DecoderLayerParams, num_heads: int,
                   return_weights: bool = False):
    """Multi-head self-attention; queries/keys see ``x + pos``, values see ``x``."""
    n, d = x.shape
    dh = d // num_heads
    qk_in = x + pos
    q = (qk_in @ layer.w_q + layer.b_q).reshape(n, num_heads, dh).transpose(1, 0, 2)
    k = (qk_in @ layer.w_k + layer.b_k).reshape(n, num_heads, dh).transpose(1, 0, 2)
    v = (x @ layer.w_v + layer.b_v).reshape(n, num_heads, dh).transpose(1, 0, 2)
    attn = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh), axis=-1)
    out = (attn @ v).transpose(1, 0, 2).reshape(n, d) @ layer.w_o + layer.b_o
    return (out, attn) if return_weights else out


def query_position(refs: np.ndarray, params: DecoderParams) -> np.ndarray:
    return refs @ params.w_pos + params.b_pos


def decoder_layer_forward(queries: QuerySet, context: MdaContext, layer: DecoderLayerParams,
                          pos: np.ndarray, config: MdaConfig = MdaConfig(), chunk: int | None = None) -> QuerySet:
    """Pre-norm layer: self-attention, deformable attention, FFN; reference points fixed."""
    x = queries.features
    x = x + self_attention(layer_norm(x, layer.norm1), pos, layer, config.num_heads)
    h = layer_norm(x, layer.norm2) + pos
    x = x + mda_forward(queries, context.bev_map, context.pyramids, context.cameras, context.grid,
                        layer.mda, config, chunk=chunk, query_input=h)
    h = layer_norm(x, layer.norm3)
    x = x + gelu(h @ layer.w_ff1 + layer.b_ff1) @ layer.w_ff2 + layer.b_ff2
    return queries.with_features(x)


def decoder_forward(queries: QuerySet, context: MdaContext, params: DecoderParams,
                    config: MdaConfig = MdaConfig(), chunk: int | None = None) -> list[np.ndarray]:
    """Run all layers; returns every layer's ``Q x d`` output (last is used downstream)."""
    if not params.layers:
        raise ValueError("decoder needs at least one layer")
    pos = query_position(queries.reference_points, params)
    outs = []
    for layer in params.layers:
        queries = decoder_layer_forward(queries, context, layer, pos, config, chunk)
        outs.append(queries.features)
    return outs
