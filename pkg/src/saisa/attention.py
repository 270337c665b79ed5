"""Attention masks and the two attention mechanisms.

Vanilla causal self-attention runs every token as a query; the NAAViT
variant uses only text tokens as queries while keys and values still span
the concatenated visual+text sequence, so visual tokens are read but never
updated.  Both are multi-head with optional grouped-query key/value
sharing, rotary positions on queries/keys, and a residual connection that
defaults to the query-side input.

Score matrices are fully materialized (desk scale, clarity over
throughput), which also makes the instrumented FLOP counts line up with a
full-square accounting of the score/value products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import masked_softmax_rows, matmul, rope_apply, softmax_rows_vjp

CAUSAL_FULL = "causal-full"
NAAVIT = "naavit"


@dataclass(frozen=True)
class AttentionMask:
    """Boolean query-by-key allowance matrix with a kind tag."""

    kind: str
    query_len: int
    key_len: int
    allow: np.ndarray


@dataclass(frozen=True)
class AttentionWeights:
    """Projections of one attention block: W_Q (h,h), W_K/W_V (h,k), W_O (h,h)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


def build_causal_mask(s):
    """Lower-triangular s x s mask: query i may attend keys j <= i."""
    if s < 1:
        raise ValueError(f"causal mask needs at least one token, got s={s}")
    allow = np.tril(np.ones((s, s), dtype=bool))
    return AttentionMask(kind=CAUSAL_FULL, query_len=s, key_len=s, allow=allow)


def build_naavit_mask(v, t):
    """t x (v+t) mask: text query i sees every visual key and text keys j <= i."""
    if t < 1:
        raise ValueError(f"NAAViT mask needs at least one text query, got t={t}")
    if v < 0:
        raise ValueError(f"visual token count must be >= 0, got v={v}")
    allow = np.zeros((t, v + t), dtype=bool)
    allow[:, :v] = True
    allow[:, v:] = np.tril(np.ones((t, t), dtype=bool))
    return AttentionMask(kind=NAAVIT, query_len=t, key_len=v + t, allow=allow)


def _split_heads(x, n_heads):
    rows, cols = x.shape
    return x.reshape(rows, n_heads, cols // n_heads).transpose(1, 0, 2)


def _merge_heads(xh):
    n_heads, rows, head_dim = xh.shape
    return xh.transpose(1, 0, 2).reshape(rows, n_heads * head_dim)


def _check_weights(w, geom):
    expected = {
        "w_q": (geom.h, geom.h),
        "w_k": (geom.h, geom.k),
        "w_v": (geom.h, geom.k),
        "w_o": (geom.h, geom.h),
    }
    for name, shape in expected.items():
        actual = getattr(w, name).shape
        if actual != shape:
            raise ValueError(f"attention weight {name} has shape {actual}, expected {shape}")


def _attention_fwd(query_in, kv_in, w, geom, q_positions, kv_positions, mask, residual, counter):
    """Shared multi-head core; queries from query_in, keys/values from kv_in."""
    _check_weights(w, geom)
    n_q, n_kv = query_in.shape[0], kv_in.shape[0]
    if mask.allow.shape != (n_q, n_kv):
        raise ValueError(f"mask shape {mask.allow.shape} does not fit {n_q} queries x {n_kv} keys")
    group = geom.heads // geom.kv_heads
    scale = 1.0 / np.sqrt(geom.head_dim)

    q = matmul(query_in, w.w_q, counter, "qkvo_proj")
    k = matmul(kv_in, w.w_k, counter, "qkvo_proj")
    val = matmul(kv_in, w.w_v, counter, "qkvo_proj")
    q_rot = rope_apply(q, q_positions, geom.head_dim)
    k_rot = rope_apply(k, kv_positions, geom.head_dim)

    qh = _split_heads(q_rot, geom.heads)
    kh = np.repeat(_split_heads(k_rot, geom.kv_heads), group, axis=0)
    vh = np.repeat(_split_heads(val, geom.kv_heads), group, axis=0)

    scores = matmul(qh, kh.transpose(0, 2, 1), counter, "attention_scores")
    probs = masked_softmax_rows(scores, mask.allow, scale)
    ctx = matmul(probs, vh, counter, "attention_scores")
    ctx2d = _merge_heads(ctx)
    out = matmul(ctx2d, w.w_o, counter, "qkvo_proj") + residual

    cache = {
        "query_in": query_in, "kv_in": kv_in, "w": w, "geom": geom,
        "q_positions": q_positions, "kv_positions": kv_positions,
        "qh": qh, "kh": kh, "vh": vh, "probs": probs, "ctx2d": ctx2d, "scale": scale,
    }
    return out, cache


def _attention_bwd(d_out, cache):
    """Gradients of the shared core: returns (d_query_in, d_kv_in, grads dict)."""
    w, geom = cache["w"], cache["geom"]
    group = geom.heads // geom.kv_heads

    d_ctx2d = d_out @ w.w_o.T
    d_w_o = cache["ctx2d"].T @ d_out

    d_ctx = _split_heads(d_ctx2d, geom.heads)
    probs, vh = cache["probs"], cache["vh"]
    d_probs = d_ctx @ vh.transpose(0, 2, 1)
    d_vh = probs.transpose(0, 2, 1) @ d_ctx
    d_scores = softmax_rows_vjp(probs, d_probs) * cache["scale"]
    d_qh = d_scores @ cache["kh"]
    d_kh = d_scores.transpose(0, 2, 1) @ cache["qh"]

    n_kv_rows = cache["kv_in"].shape[0]
    d_kh = d_kh.reshape(geom.kv_heads, group, n_kv_rows, geom.head_dim).sum(axis=1)
    d_vh = d_vh.reshape(geom.kv_heads, group, n_kv_rows, geom.head_dim).sum(axis=1)

    d_q = rope_apply(_merge_heads(d_qh), cache["q_positions"], geom.head_dim, inverse=True)
    d_k = rope_apply(_merge_heads(d_kh), cache["kv_positions"], geom.head_dim, inverse=True)
    d_val = _merge_heads(d_vh)

    grads = {
        "w_q": cache["query_in"].T @ d_q,
        "w_k": cache["kv_in"].T @ d_k,
        "w_v": cache["kv_in"].T @ d_val,
        "w_o": d_w_o,
    }
    d_query_in = d_q @ w.w_q.T
    d_kv_in = d_k @ w.w_k.T + d_val @ w.w_v.T
    return d_query_in, d_kv_in, grads


def vanilla_self_attention_fwd(x, w, geom, positions, mask, residual=None, counter=None):
    """Causal multi-head self-attention over x; returns (output, cache).

    Output is Attention(x) W_O + residual (residual defaults to x itself).
    """
    x = np.asarray(x)
    if x.shape[1] != geom.h:
        raise ValueError(f"input width {x.shape[1]} does not match hidden size {geom.h}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[0],):
        raise ValueError(f"{positions.shape} positions for {x.shape[0]} tokens")
    if residual is None:
        residual = x
    return _attention_fwd(x, x, w, geom, positions, positions, mask, residual, counter)


def vanilla_self_attention(x, w, geom, positions, mask, residual=None, counter=None):
    out, _ = vanilla_self_attention_fwd(x, w, geom, positions, mask, residual, counter)
    return out


def vanilla_self_attention_bwd(d_out, cache):
    """Returns (d_x, d_residual, weight grads); d_x excludes the residual path."""
    d_query_in, d_kv_in, grads = _attention_bwd(d_out, cache)
    return d_query_in + d_kv_in, d_out, grads


def naavit_attention_fwd(visual, text, w, geom, vis_positions, txt_positions,
                         residual=None, counter=None):
    """Text-query attention over the concatenated [visual, text] sequence.

    Only the t text rows are produced (and only they receive the residual);
    visual rows are never updated here.  Returns (output t x h, cache).
    """
    visual = np.asarray(visual)
    text = np.asarray(text)
    t = text.shape[0]
    if t < 1:
        raise ValueError("NAAViT attention needs at least one text token")
    v = visual.shape[0]
    if v > 0 and visual.shape[1] != geom.h:
        raise ValueError(f"visual width {visual.shape[1]} does not match hidden size {geom.h}")
    vis_positions = np.asarray(vis_positions)
    txt_positions = np.asarray(txt_positions)
    if vis_positions.shape != (v,) or txt_positions.shape != (t,):
        raise ValueError("position vectors must match visual/text row counts")
    if residual is None:
        residual = text
    kv_in = np.concatenate([visual, text], axis=0) if v else text
    kv_positions = np.concatenate([vis_positions, txt_positions]) if v else txt_positions
    mask = build_naavit_mask(v, t)
    out, cache = _attention_fwd(text, kv_in, w, geom, txt_positions, kv_positions, mask, residual, counter)
    cache["n_visual"] = v
    return out, cache


def naavit_attention(visual, text, w, geom, vis_positions, txt_positions,
                     residual=None, counter=None):
    out, _ = naavit_attention_fwd(visual, text, w, geom, vis_positions, txt_positions,
                                  residual, counter)
    return out


def naavit_attention_bwd(d_out, cache):
    """Returns (d_visual, d_text, d_residual, weight grads)."""
    d_query_in, d_kv_in, grads = _attention_bwd(d_out, cache)
    v = cache["n_visual"]
    d_visual = d_kv_in[:v]
    d_text = d_query_in + d_kv_in[v:]
    return d_visual, d_text, d_out, grads
