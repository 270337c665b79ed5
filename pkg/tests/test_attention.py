import numpy as np
import pytest

from saisa.attention import (
    AttentionWeights,
    build_causal_mask,
    build_naavit_mask,
    naavit_attention,
    vanilla_self_attention,
)
from saisa.config import ModelGeometry
from saisa.kernels import FlopCounter, make_rng, rope_apply

TOY = ModelGeometry(n=2, h=16, heads=4, kv_heads=2, m=32)
TOY_FULL_KV = ModelGeometry(n=2, h=16, heads=4, kv_heads=4, m=32)


def random_weights(rng, geom, scale=0.3):
    return AttentionWeights(
        w_q=rng.standard_normal((geom.h, geom.h)) * scale,
        w_k=rng.standard_normal((geom.h, geom.k)) * scale,
        w_v=rng.standard_normal((geom.h, geom.k)) * scale,
        w_o=rng.standard_normal((geom.h, geom.h)) * scale,
    )


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def test_causal_mask_single_token():
    mask = build_causal_mask(1)
    assert mask.allow.tolist() == [[True]]
    assert (mask.query_len, mask.key_len) == (1, 1)


def test_causal_mask_lower_triangular():
    mask = build_causal_mask(3)
    assert np.array_equal(mask.allow, np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=bool))


def test_causal_mask_row_counts():
    allow = build_causal_mask(640).allow
    assert all(allow[i].sum() == i + 1 for i in range(640))


def test_causal_mask_rejects_zero_tokens():
    with pytest.raises(ValueError):
        build_causal_mask(0)


def test_naavit_mask_pattern():
    mask = build_naavit_mask(2, 3)
    expected = [[1, 1, 1, 0, 0], [1, 1, 1, 1, 0], [1, 1, 1, 1, 1]]
    assert mask.allow.astype(int).tolist() == expected


def test_naavit_mask_no_visual_equals_causal():
    assert np.array_equal(build_naavit_mask(0, 4).allow, build_causal_mask(4).allow)


def test_naavit_mask_single_query():
    assert build_naavit_mask(5, 1).allow.all()


def test_naavit_mask_rejects_zero_queries():
    with pytest.raises(ValueError):
        build_naavit_mask(3, 0)


# ---------------------------------------------------------------------------
# vanilla self-attention
# ---------------------------------------------------------------------------

def test_single_token_attention_is_value_path_plus_residual():
    # With one key the softmax is 1 regardless of scores, so the output is
    # the (head-expanded) value row through W_O plus the residual.
    rng = make_rng(20)
    geom = TOY_FULL_KV
    w = random_weights(rng, geom)
    x = rng.standard_normal((1, geom.h))
    out = vanilla_self_attention(x, w, geom, np.array([5]), build_causal_mask(1))
    assert np.abs(out - (x @ w.w_v @ w.w_o + x)).max() < 1e-12


def test_single_token_attention_with_grouped_kv():
    rng = make_rng(21)
    geom = TOY
    w = random_weights(rng, geom)
    x = rng.standard_normal((1, geom.h))
    out = vanilla_self_attention(x, w, geom, np.array([0]), build_causal_mask(1))
    val = x @ w.w_v  # 1 x k; each query head reads its group's kv slice
    hd, group = geom.head_dim, geom.heads // geom.kv_heads
    expanded = np.concatenate([val[:, (i // group) * hd:(i // group + 1) * hd] for i in range(geom.heads)], axis=1)
    assert np.abs(out - (expanded @ w.w_o + x)).max() < 1e-12


def test_zero_weights_give_pure_residual():
    geom = TOY
    w = AttentionWeights(
        w_q=np.zeros((geom.h, geom.h)), w_k=np.zeros((geom.h, geom.k)),
        w_v=np.zeros((geom.h, geom.k)), w_o=np.zeros((geom.h, geom.h)))
    x = make_rng(22).standard_normal((4, geom.h))
    out = vanilla_self_attention(x, w, geom, np.arange(4), build_causal_mask(4))
    assert np.array_equal(out, x)


def per_head_loop_reference(x, w, geom, positions, allow):
    """Explicit per-query, per-head softmax: the independent oracle."""
    s = x.shape[0]
    q = rope_apply(x @ w.w_q, positions, geom.head_dim)
    k = rope_apply(x @ w.w_k, positions, geom.head_dim)
    val = x @ w.w_v
    group = geom.heads // geom.kv_heads
    out = np.zeros((s, geom.h))
    for head in range(geom.heads):
        kv = head // group
        qh = q[:, head * geom.head_dim:(head + 1) * geom.head_dim]
        kh = k[:, kv * geom.head_dim:(kv + 1) * geom.head_dim]
        vh = val[:, kv * geom.head_dim:(kv + 1) * geom.head_dim]
        for i in range(s):
            scores = np.where(allow[i], qh[i] @ kh.T / np.sqrt(geom.head_dim), -np.inf)
            weights = np.exp(scores - scores[allow[i]].max())
            weights /= weights.sum()
            out[i, head * geom.head_dim:(head + 1) * geom.head_dim] = weights @ vh
    return out @ w.w_o + x


def test_vanilla_attention_matches_per_head_loop():
    rng = make_rng(23)
    geom = TOY
    w = random_weights(rng, geom)
    x = rng.standard_normal((4, geom.h))
    mask = build_causal_mask(4)
    out = vanilla_self_attention(x, w, geom, np.arange(4), mask)
    ref = per_head_loop_reference(x, w, geom, np.arange(4), mask.allow)
    assert np.abs(out - ref).max() < 1e-10


def test_gqa_consistency_when_kv_heads_equal_heads():
    rng = make_rng(24)
    geom = TOY_FULL_KV
    w = random_weights(rng, geom)
    x = rng.standard_normal((5, geom.h))
    mask = build_causal_mask(5)
    out = vanilla_self_attention(x, w, geom, np.arange(5), mask)
    ref = per_head_loop_reference(x, w, geom, np.arange(5), mask.allow)
    assert np.abs(out - ref).max() < 1e-12


def test_causality_under_perturbation():
    rng = make_rng(25)
    geom = TOY
    w = random_weights(rng, geom)
    x = rng.standard_normal((6, geom.h))
    mask = build_causal_mask(6)
    base = vanilla_self_attention(x, w, geom, np.arange(6), mask)
    for j in (2, 4):
        bumped = x.copy()
        bumped[j] += 0.37
        after = vanilla_self_attention(bumped, w, geom, np.arange(6), mask)
        assert np.array_equal(base[:j], after[:j])
        assert not np.allclose(base[j:], after[j:])


def test_attention_rejects_shape_mismatch():
    geom = TOY
    w = random_weights(make_rng(26), geom)
    x = np.zeros((4, geom.h))
    with pytest.raises(ValueError):
        vanilla_self_attention(x, w, geom, np.arange(3), build_causal_mask(4))
    with pytest.raises(ValueError):
        vanilla_self_attention(x, w, geom, np.arange(4), build_causal_mask(3))
    bad = AttentionWeights(w_q=np.zeros((geom.h, geom.h + 1)), w_k=w.w_k, w_v=w.w_v, w_o=w.w_o)
    with pytest.raises(ValueError, match="w_q"):
        vanilla_self_attention(x, bad, geom, np.arange(4), build_causal_mask(4))


# ---------------------------------------------------------------------------
# NAAViT
# ---------------------------------------------------------------------------

def test_naavit_no_visual_equals_vanilla():
    rng = make_rng(27)
    geom = TOY
    w = random_weights(rng, geom)
    text = rng.standard_normal((5, geom.h))
    vanilla = vanilla_self_attention(text, w, geom, np.arange(5), build_causal_mask(5))
    naavit = naavit_attention(np.zeros((0, geom.h)), text, w, geom, np.arange(0), np.arange(5))
    assert np.abs(vanilla - naavit).max() < 1e-12


@pytest.mark.parametrize("seed", range(8))
def test_single_block_equivalence_with_causal_text_rows(seed):
    # The causal mask restricted to text queries equals the NAAViT mask, so a
    # single block produces identical text rows for any weights and inputs.
    rng = make_rng(seed)
    geom = TOY
    w = random_weights(rng, geom)
    v, t = 6, 5
    visual = rng.standard_normal((v, geom.h))
    text = rng.standard_normal((t, geom.h))
    concat = np.concatenate([visual, text])
    full = vanilla_self_attention(concat, w, geom, np.arange(v + t), build_causal_mask(v + t))
    naavit = naavit_attention(visual, text, w, geom, np.arange(v), np.arange(v, v + t))
    assert np.abs(full[v:] - naavit).max() < 1e-10


def test_naavit_visual_permutation_invariance():
    rng = make_rng(28)
    geom = TOY
    w = random_weights(rng, geom)
    v, t = 7, 4
    visual = rng.standard_normal((v, geom.h))
    text = rng.standard_normal((t, geom.h))
    vis_pos, txt_pos = np.arange(v), np.arange(v, v + t)
    base = naavit_attention(visual, text, w, geom, vis_pos, txt_pos)
    perm = rng.permutation(v)
    permuted = naavit_attention(visual[perm], text, w, geom, vis_pos[perm], txt_pos)
    assert np.abs(base - permuted).max() < 1e-12


def test_naavit_query_cost_scales_with_text_not_keys():
    geom = TOY
    t = 5
    counts = {}
    for v in (3, 19):
        rng = make_rng(29)
        w = random_weights(rng, geom)
        visual = rng.standard_normal((v, geom.h))
        text = rng.standard_normal((t, geom.h))
        counter = FlopCounter()
        naavit_attention(visual, text, w, geom, np.arange(v), np.arange(v, v + t), counter=counter)
        counts[v] = counter.get("qkvo_proj")
    # growing v only adds key/value projection work (4 v h k per extra token)
    assert counts[19] - counts[3] == 4 * (19 - 3) * geom.h * geom.k


def test_naavit_rejects_empty_text():
    geom = TOY
    w = random_weights(make_rng(30), geom)
    with pytest.raises(ValueError):
        naavit_attention(np.zeros((2, geom.h)), np.zeros((0, geom.h)), w, geom, np.arange(2), np.arange(0))
