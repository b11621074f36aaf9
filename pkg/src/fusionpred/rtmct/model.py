"""Forward pass, loss and analytic gradients of the multi-class predictor.

Parameters live in a flat ``dict[str, ndarray]``; the learnable reference
trajectories are the ``"refs"`` entry (C x n x T_pred x 2) so the optimizer,
checkpoints and gradient checks treat them like any other tensor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .config import RtmctConfig
from .preprocess import TrajectoryBatch
from .references import ReferenceTrajectorySet, generate_references

ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def init_params(config: RtmctConfig = RtmctConfig(), seed=0, refs: ReferenceTrajectorySet | None = None,
                head_scale: float = 0.01) -> dict:
    """Seeded initialization.  Trajectory/score heads start near zero so the
    untrained model predicts the references with near-uniform scores."""
    rng = np.random.default_rng(seed)
    d, to, tp, c = config.dim, config.t_obs, config.t_pred, config.num_classes
    p = {}

    def lin(name, i, o, std=None):
        p[name + ".w"] = rng.normal(0.0, std if std is not None else 1.0 / np.sqrt(i), (i, o))
        p[name + ".b"] = np.zeros(o)

    for k in range(c):
        lin(f"phi.{k}", 2 * to + 2 * tp, d)
    for j in range(c + 1):
        lin(f"psi.{j}", 2 * to, d)
    for layer in range(config.num_layers):
        pre = f"layer{layer}."
        for part in ("self.", "cross."):
            for w in ("q", "k", "v", "o"):
                p[pre + part + "w" + w] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
                p[pre + part + "b" + w] = np.zeros(d)
        for ln in ("ln1", "ln2", "ln3"):
            p[pre + ln + ".g"] = np.ones(d)
            p[pre + ln + ".b"] = np.zeros(d)
        lin(pre + "ffn1", d, config.ffn_dim)
        lin(pre + "ffn2", config.ffn_dim, d)
    for k in range(c):
        lin(f"traj.{k}", d, 2 * tp, head_scale / np.sqrt(d))
        lin(f"score.{k}", d, 1, head_scale / np.sqrt(d))
    refs = refs or generate_references(config)
    p["refs"] = refs.trajectories.copy()
    return p


def zero_heads(params: dict, config: RtmctConfig) -> dict:
    out = dict(params)
    for k in range(config.num_classes):
        for name in (f"traj.{k}", f"score.{k}"):
            out[name + ".w"] = np.zeros_like(params[name + ".w"])
            out[name + ".b"] = np.zeros_like(params[name + ".b"])
    return out


def reciprocal(x: np.ndarray, floor: float) -> np.ndarray:
    """Element-wise ``1/x`` with ``|x|`` clamped to at least ``floor``."""
    safe = np.where(x < 0, -1.0, 1.0) * np.maximum(np.abs(x), floor)
    return 1.0 / safe


@dataclass
class Forward:
    predictions: np.ndarray  # B x n x T_pred x 2 (canonical)
    scores: np.ndarray  # B x n
    logits: np.ndarray
    cache: dict


def _check_classes(batch: TrajectoryBatch, config: RtmctConfig) -> None:
    if np.any(batch.cls < 0) or np.any(batch.cls >= config.num_classes):
        raise ValueError(f"target class outside [0, {config.num_classes})")
    bad = batch.neighbor_mask & ((batch.neighbor_cls < 0) | (batch.neighbor_cls > config.robot_class))
    if bad.any():
        raise ValueError("neighbour class outside the known classes")


def encode(batch: TrajectoryBatch, p: dict, config: RtmctConfig):
    """Returns ``(E_X: B x n x d, E_N: B x K x d, cache)``."""
    _check_classes(batch, config)
    b = len(batch)
    to2 = 2 * config.t_obs
    xf = batch.observed.reshape(b, to2)
    refs = p["refs"].reshape(config.num_classes, config.num_refs, -1)
    ex = np.empty((b, config.num_refs, config.dim))
    for c in range(config.num_classes):
        idx = batch.cls == c
        if not idx.any():
            continue
        w = p[f"phi.{c}.w"]
        ex[idx] = (xf[idx] @ w[:to2])[:, None, :] + (refs[c] @ w[to2:])[None] + p[f"phi.{c}.b"]
    k = batch.neighbors.shape[1]
    nrec = reciprocal(batch.neighbors.reshape(b, k, to2), config.reciprocal_floor)
    en = np.zeros((b, k, config.dim))
    for j in range(config.num_classes + 1):
        sel = batch.neighbor_mask & (batch.neighbor_cls == j)
        if sel.any():
            en[sel] = nrec[sel] @ p[f"psi.{j}.w"] + p[f"psi.{j}.b"]
    return ex, en, {"xf": xf, "nrec": nrec}


def decode(ex: np.ndarray, en: np.ndarray, mask: np.ndarray, p: dict, config: RtmctConfig):
    x = ex
    caches = []
    has_keys = en.shape[1] > 0
    for layer in range(config.num_layers):
        pre = f"layer{layer}."
        h1, c_ln1 = nn.layer_norm_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        a, c_self = nn.attention_forward(h1, h1, p, pre + "self.", config.num_heads)
        x1 = x + a
        h2, c_ln2 = nn.layer_norm_forward(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
        if has_keys:
            cr, c_cross = nn.attention_forward(h2, en, p, pre + "cross.", config.num_heads, mask)
            x2 = x1 + cr
        else:
            c_cross, x2 = None, x1
        h3, c_ln3 = nn.layer_norm_forward(x2, p[pre + "ln3.g"], p[pre + "ln3.b"])
        f1 = h3 @ p[pre + "ffn1.w"] + p[pre + "ffn1.b"]
        g, c_gelu = nn.gelu_forward(f1)
        f2 = g @ p[pre + "ffn2.w"] + p[pre + "ffn2.b"]
        x = x2 + f2
        caches.append((c_ln1, c_self, c_ln2, c_cross, c_ln3, h3, c_gelu, g))
    return x, caches


def heads(eo: np.ndarray, cls: np.ndarray, p: dict, config: RtmctConfig):
    b, n = eo.shape[:2]
    refs = p["refs"].reshape(config.num_classes, n, -1)
    pred = np.empty((b, n, 2 * config.t_pred))
    logits = np.empty((b, n))
    for c in range(config.num_classes):
        idx = cls == c
        if not idx.any():
            continue
        pred[idx] = refs[c][None] + eo[idx] @ p[f"traj.{c}.w"] + p[f"traj.{c}.b"]
        logits[idx] = (eo[idx] @ p[f"score.{c}.w"])[..., 0] + p[f"score.{c}.b"][0]
    scores = nn.masked_softmax(logits, np.ones_like(logits, dtype=bool))
    return pred.reshape(b, n, config.t_pred, 2), scores, logits


def forward(batch: TrajectoryBatch, p: dict, config: RtmctConfig) -> Forward:
    ex, en, enc_cache = encode(batch, p, config)
    eo, dec_caches = decode(ex, en, batch.neighbor_mask, p, config)
    pred, scores, logits = heads(eo, batch.cls, p, config)
    return Forward(pred, scores, logits, {"enc": enc_cache, "dec": dec_caches, "eo": eo, "en": en})


def ade_to_references(future: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """``future``: B x T x 2, ``refs``: B x n x T x 2 -> B x n mean displacement."""
    return np.linalg.norm(refs - future[:, None], axis=-1).mean(axis=-1)


def positive_index(future: np.ndarray, cls: np.ndarray, p: dict) -> np.ndarray:
    """Index of the reference nearest (by ADE) to each ground-truth future; lowest index on ties."""
    ade = ade_to_references(future, p["refs"][cls])
    return np.argmin(ade, axis=1)


def audit_positive_index(future: np.ndarray, refs: np.ndarray) -> int:
    """Exhaustive scalar scan used to audit :func:`positive_index`."""
    best, best_i = np.inf, -1
    for i in range(refs.shape[0]):
        total = 0.0
        for t in range(refs.shape[1]):
            total += float(np.hypot(refs[i, t, 0] - future[t, 0], refs[i, t, 1] - future[t, 1]))
        ade = total / refs.shape[1]
        if ade < best:
            best, best_i = ade, i
    return best_i


def loss(fwd: Forward, batch: TrajectoryBatch, p: dict, config: RtmctConfig):
    """Mean over the batch of SmoothL1(positive prediction, truth) + weight * CE.

    Returns ``(loss, positives, parts)`` with ``parts = (smooth_l1, ce)`` batch means.
    """
    if batch.future is None:
        raise ValueError("batch has no ground-truth futures")
    b = len(batch)
    pos = positive_index(batch.future, batch.cls, p)
    rows = np.arange(b)
    diff = fwd.predictions[rows, pos] - batch.future
    sl1 = nn.smooth_l1(diff, config.smooth_l1_beta).reshape(b, -1).mean(axis=1)
    lg = fwd.logits
    mx = lg.max(axis=1)
    lse = mx + np.log(np.exp(lg - mx[:, None]).sum(axis=1))
    ce = lse - lg[rows, pos]
    total = float(np.mean(sl1 + config.score_weight * ce))
    fwd.cache["loss"] = (pos, diff)
    return total, pos, (float(sl1.mean()), float(ce.mean()))


def backward(fwd: Forward, batch: TrajectoryBatch, p: dict, config: RtmctConfig) -> dict:
    """Gradients of :func:`loss` (which must have been called on ``fwd``) for every parameter."""
    pos, diff = fwd.cache["loss"]
    b, n = fwd.scores.shape
    tp2 = 2 * config.t_pred
    to2 = 2 * config.t_obs
    rows = np.arange(b)
    g = {k: np.zeros_like(v) for k, v in p.items()}
    grefs = g["refs"].reshape(config.num_classes, n, tp2)

    dpred = np.zeros((b, n, tp2))
    dpred[rows, pos] = nn.smooth_l1_grad(diff, config.smooth_l1_beta).reshape(b, tp2) / (tp2 * b)
    dlogits = fwd.scores.copy()
    dlogits[rows, pos] -= 1.0
    dlogits *= config.score_weight / b

    eo = fwd.cache["eo"]
    deo = np.zeros_like(eo)
    for c in range(config.num_classes):
        idx = batch.cls == c
        if not idx.any():
            continue
        dp_c, dl_c, eo_c = dpred[idx], dlogits[idx], eo[idx]
        g[f"traj.{c}.w"] += eo_c.reshape(-1, eo.shape[-1]).T @ dp_c.reshape(-1, tp2)
        g[f"traj.{c}.b"] += dp_c.reshape(-1, tp2).sum(axis=0)
        g[f"score.{c}.w"] += eo_c.reshape(-1, eo.shape[-1]).T @ dl_c.reshape(-1, 1)
        g[f"score.{c}.b"] += dl_c.sum()
        deo[idx] = dp_c @ p[f"traj.{c}.w"].T + dl_c[..., None] * p[f"score.{c}.w"][:, 0]
        grefs[c] += dp_c.sum(axis=0)

    dex, den = _decode_backward(deo, fwd.cache, batch.neighbor_mask, p, g, config)

    xf, nrec = fwd.cache["enc"]["xf"], fwd.cache["enc"]["nrec"]
    refs = p["refs"].reshape(config.num_classes, n, tp2)
    for c in range(config.num_classes):
        idx = batch.cls == c
        if not idx.any():
            continue
        w = p[f"phi.{c}.w"]
        d_c = dex[idx]  # b_c x n x d
        g[f"phi.{c}.w"][:to2] += xf[idx].T @ d_c.sum(axis=1)
        g[f"phi.{c}.w"][to2:] += refs[c].T @ d_c.sum(axis=0)
        g[f"phi.{c}.b"] += d_c.sum(axis=(0, 1))
        grefs[c] += d_c.sum(axis=0) @ w[to2:].T
    for j in range(config.num_classes + 1):
        sel = batch.neighbor_mask & (batch.neighbor_cls == j)
        if sel.any():
            g[f"psi.{j}.w"] += nrec[sel].T @ den[sel]
            g[f"psi.{j}.b"] += den[sel].sum(axis=0)
    return g


def _decode_backward(deo, cache, mask, p, g, config):
    en = cache["en"]
    den = np.zeros_like(en)
    dx = deo
    for layer in reversed(range(config.num_layers)):
        pre = f"layer{layer}."
        c_ln1, c_self, c_ln2, c_cross, c_ln3, h3, c_gelu, gact = cache["dec"][layer]
        # x = x2 + ffn(ln3(x2))
        dg, g[pre + "ffn2.w"], g[pre + "ffn2.b"] = nn.linear_backward(dx, gact, p[pre + "ffn2.w"])
        df1 = nn.gelu_backward(dg, c_gelu)
        dh3, g[pre + "ffn1.w"], g[pre + "ffn1.b"] = nn.linear_backward(df1, h3, p[pre + "ffn1.w"])
        dx2, g[pre + "ln3.g"], g[pre + "ln3.b"] = nn.layer_norm_backward(dh3, c_ln3)
        dx2 = dx2 + dx
        # x2 = x1 + cross(ln2(x1), en)
        if c_cross is not None:
            dh2, den_l, gc = nn.attention_backward(dx2, c_cross, p, pre + "cross.")
            g.update(gc)
            den += den_l
            dx1, g[pre + "ln2.g"], g[pre + "ln2.b"] = nn.layer_norm_backward(dh2, c_ln2)
            dx1 = dx1 + dx2
        else:
            dx1 = dx2
        # x1 = x + self(ln1(x))
        dq, dkv, gs = nn.attention_backward(dx1, c_self, p, pre + "self.")
        g.update(gs)
        dx0, g[pre + "ln1.g"], g[pre + "ln1.b"] = nn.layer_norm_backward(dq + dkv, c_ln1)
        dx = dx0 + dx1
    return dx, den


def loss_and_grad(batch: TrajectoryBatch, p: dict, config: RtmctConfig):
    fwd = forward(batch, p, config)
    value, pos, parts = loss(fwd, batch, p, config)
    return value, backward(fwd, batch, p, config), pos, parts


@dataclass(frozen=True)
class PredictionSet:
    trajectories: np.ndarray  # n x T_pred x 2, world frame, best score first
    scores: np.ndarray  # n, descending
    reference_index: np.ndarray  # n, original reference index per row


def predict(batch: TrajectoryBatch, p: dict, config: RtmctConfig) -> list[PredictionSet]:
    """De-normalized predictions ranked by score (stable on ties)."""
    fwd = forward(batch, p, config)
    out = []
    for i in range(len(batch)):
        order = np.argsort(-fwd.scores[i], kind="stable")
        world = batch.transform(i).to_world(fwd.predictions[i][order].reshape(-1, 2)).reshape(fwd.predictions[i].shape)
        out.append(PredictionSet(world, fwd.scores[i][order], order))
    return out
