"""Slow, independent re-computations used by ``fuse-check`` to audit the fast paths."""
from __future__ import annotations

import math

import numpy as np

from .geometry import GridSpec, SparseFeatureMap, project_points
from .mda import MdaConfig, MdaParams, QuerySet, camera_input, mda_forward
from .mme import find_associations
from .serialization import WindowSpec, serialize


def serialization_audit(sparse: SparseFeatureMap, spec: WindowSpec) -> int:
    """Positions where :func:`serialize` disagrees with a lexicographic key sort."""
    c = sparse.coords.astype(np.int64)
    if spec.axis == "y":
        c = c[:, [1, 0, 2]]
    dims = np.array([spec.wx, spec.wy, spec.wz])
    win, off = c // dims, c % dims
    # np.lexsort sorts by the last key first
    order = np.lexsort((np.arange(len(c)), off[:, 2], off[:, 1], off[:, 0], win[:, 2], win[:, 1], win[:, 0]))
    _, perm = serialize(sparse, spec)
    return int(np.count_nonzero(order != perm))


def association_audit(voxels: SparseFeatureMap, grid: GridSpec, cam, image_feats, radius: float) -> dict:
    """Re-derive every image feature's association by brute force."""
    assoc = find_associations(voxels, grid, cam, image_feats, radius)
    uv, depth, valid = project_points(grid.cell_center(assoc.candidates), cam)
    uv = uv / image_feats.scale
    violations = 0
    for f in range(image_feats.height * image_feats.width):
        x, y = f % image_feats.width, f // image_feats.width
        d2 = np.where(valid, (uv[:, 0] - x) ** 2 + (uv[:, 1] - y) ** 2, np.inf)
        inside = [(d2[i], i) for i in np.flatnonzero(d2 <= radius * radius)]
        want = -1
        if inside:
            nearest = sorted(inside)[:3]
            want = min((depth[i], i) for _, i in nearest)[1]
        violations += int(want != assoc.chosen[f])
    return {"features": image_feats.height * image_feats.width, "candidates": len(assoc.candidates),
            "associated": int(np.count_nonzero(assoc.chosen >= 0)), "violations": violations}


def _bilinear(values, u, v, channels):
    h, w = values.shape[:2]
    if not (math.isfinite(u) and math.isfinite(v)) or u <= -1 or u >= w or v <= -1 or v >= h:
        return np.zeros(len(channels))
    u, v = min(max(u, 0.0), w - 1.0), min(max(v, 0.0), h - 1.0)
    x0, y0 = int(math.floor(u)), int(math.floor(v))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = u - x0, v - y0
    top = values[y0, x0, channels] * (1 - fx) + values[y0, x1, channels] * fx
    bot = values[y1, x0, channels] * (1 - fx) + values[y1, x1, channels] * fx
    return top * (1 - fy) + bot * fy


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def mda_reference(query, ref, bev_map, pyramids, cameras, grid: GridSpec, p: MdaParams, cfg: MdaConfig):
    """Per-head, per-point loop evaluation of one query."""
    d, m_heads, k_pts, levels = cfg.dim, cfg.num_heads, cfg.num_points, cfg.num_levels
    dh = d // m_heads
    lo, hi = grid.origin, grid.upper
    off = query @ p.w_offset + p.b_offset
    bev_logit = query @ p.w_bev + p.b_bev
    v_bev, v_img = np.zeros(d), np.zeros(d)

    def metric(m, k):
        base = (m * k_pts + k) * 3
        return lo + (ref + cfg.offset_scale * off[base:base + 3]) * (hi - lo)

    for m in range(m_heads):
        ch = np.arange(m * dh, (m + 1) * dh)
        a = _softmax(bev_logit[m * k_pts:(m + 1) * k_pts])
        for k in range(k_pts):
            pm = metric(m, k)
            u = (pm[1] - lo[1]) / grid.cell_size[1] - 0.5
            v = (pm[0] - lo[0]) / grid.cell_size[0] - 0.5
            v_bev[ch] += a[k] * _bilinear(bev_map.values, u, v, ch)
    for j, cam in enumerate(cameras):
        hidden = np.maximum(camera_input(cam) @ p.cam_w1 + p.cam_b1, 0.0)
        logit = (query + hidden @ p.cam_w2 + p.cam_b2) @ p.w_img + p.b_img
        for m in range(m_heads):
            ch = np.arange(m * dh, (m + 1) * dh)
            a = _softmax(logit[m * levels * k_pts:(m + 1) * levels * k_pts])
            for k in range(k_pts):
                pc = cam.extrinsics.rotation @ metric(m, k) + cam.extrinsics.translation
                if pc[2] <= 0:
                    continue
                uvw = cam.intrinsics @ pc
                u, v = uvw[0] / pc[2], uvw[1] / pc[2]
                for l in range(levels):
                    f = pyramids[j][l]
                    v_img[ch] += a[l * k_pts + k] * _bilinear(f.values, u / f.scale, v / f.scale, ch)
    return np.concatenate([v_img, v_bev]) @ p.w_out + p.b_out


def mda_audit(queries: QuerySet, bev_map, pyramids, cameras, grid, params, config) -> float:
    """Largest absolute difference between :func:`mda_forward` and :func:`mda_reference`."""
    fast = mda_forward(queries, bev_map, pyramids, cameras, grid, params, config)
    worst = 0.0
    for i in range(len(queries.features)):
        ref = mda_reference(queries.features[i], queries.reference_points[i], bev_map, pyramids, cameras,
                            grid, params, config)
        worst = max(worst, float(np.max(np.abs(fast[i] - ref))))
    return worst
