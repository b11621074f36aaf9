"""Functional layers with hand-written backward passes (float64 numpy).

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient(s)
plus a dict of parameter gradients keyed like the parameter dict.
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
GELU_C = np.sqrt(2.0 / np.pi)


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dout, x, w):
    lead = dout.reshape(-1, dout.shape[-1])
    xs = x.reshape(-1, x.shape[-1])
    return dout @ w.T, xs.T @ lead, lead.sum(axis=0)


def layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dout, cache):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    dg = (dout * xhat).reshape(-1, d).sum(axis=0)
    db = dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def gelu_forward(x):
    inner = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * x * (1 + t), (x, t)


def gelu_backward(dout, cache):
    x, t = cache
    dinner = GELU_C * (1 + 3 * 0.044715 * x * x)
    return dout * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner)


def masked_softmax(s, mask):
    """Softmax over the last axis restricted to ``mask``; all-masked rows are zero."""
    neg = np.where(mask, s, -np.inf)
    mx = np.max(neg, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(np.where(mask, s, mx) - mx), 0.0)
    den = e.sum(axis=-1, keepdims=True)
    return e / np.where(den > 0, den, 1.0)


def attention_forward(xq, xkv, p, prefix, num_heads, key_mask=None):
    """Multi-head attention. ``xq``: B x n x d, ``xkv``: B x k x d, ``key_mask``: B x k.

    Elements with no valid key get an all-zero output (bias included).
    """
    bsz, n, d = xq.shape
    k = xkv.shape[1]
    dh = d // num_heads
    q = xq @ p[prefix + "wq"] + p[prefix + "bq"]
    kk = xkv @ p[prefix + "wk"] + p[prefix + "bk"]
    v = xkv @ p[prefix + "wv"] + p[prefix + "bv"]
    qh = q.reshape(bsz, n, num_heads, dh).transpose(0, 2, 1, 3)
    kh = kk.reshape(bsz, k, num_heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(bsz, k, num_heads, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / np.sqrt(dh)
    s = qh @ kh.transpose(0, 1, 3, 2) * scale
    mask = np.ones((bsz, k), dtype=bool) if key_mask is None else key_mask
    attn = masked_softmax(s, mask[:, None, None, :])
    oh = attn @ vh
    o = oh.transpose(0, 2, 1, 3).reshape(bsz, n, d)
    any_key = mask.any(axis=1).astype(np.float64)[:, None, None]
    out = (o @ p[prefix + "wo"] + p[prefix + "bo"]) * any_key
    cache = (xq, xkv, qh, kh, vh, attn, o, any_key, scale, num_heads)
    return out, cache


def attention_backward(dout, cache, p, prefix):
    xq, xkv, qh, kh, vh, attn, o, any_key, scale, num_heads = cache
    bsz, n, d = xq.shape
    k = xkv.shape[1]
    dh = d // num_heads
    g = {}
    dout = dout * any_key
    do, g[prefix + "wo"], g[prefix + "bo"] = linear_backward(dout, o, p[prefix + "wo"])
    doh = do.reshape(bsz, n, num_heads, dh).transpose(0, 2, 1, 3)
    dattn = doh @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ doh
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dq = dqh.transpose(0, 2, 1, 3).reshape(bsz, n, d)
    dk = dkh.transpose(0, 2, 1, 3).reshape(bsz, k, d)
    dv = dvh.transpose(0, 2, 1, 3).reshape(bsz, k, d)
    dxq, g[prefix + "wq"], g[prefix + "bq"] = linear_backward(dq, xq, p[prefix + "wq"])
    dxk, g[prefix + "wk"], g[prefix + "bk"] = linear_backward(dk, xkv, p[prefix + "wk"])
    dxv, g[prefix + "wv"], g[prefix + "bv"] = linear_backward(dv, xkv, p[prefix + "wv"])
    return dxq, dxk + dxv, g


def smooth_l1(diff, beta=1.0):
    a = np.abs(diff)
    return np.where(a < beta, 0.5 * diff * diff / beta, a - 0.5 * beta)


def smooth_l1_grad(diff, beta=1.0):
    return np.where(np.abs(diff) < beta, diff / beta, np.sign(diff))
