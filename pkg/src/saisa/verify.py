"""Self-check suites behind the `verify` CLI subcommand.

Each suite returns (name, passed, detail) tuples; the CLI renders them and
exits nonzero if anything failed.  The mask builders are looked up through
module globals so a test can swap in a corrupted builder and confirm the
failure path actually fails.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention, config, flops, model
from .kernels import FlopCounter, finite_diff_grad, make_rng

# Test hooks: suites call these indirections instead of the functions directly.
CAUSAL_MASK_BUILDER = attention.build_causal_mask
NAAVIT_MASK_BUILDER = attention.build_naavit_mask

TOY_GRID_V = (0, 1, 6, 17)
TOY_GRID_T = (1, 5, 16)

GRADCHECK_SCALE = 12.0
GRADCHECK_STEP = 1e-5
GRADCHECK_SEED = 2
GRADCHECK_BATCH_SEED = 102


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _result(name, passed, detail=""):
    return CheckResult(name=name, passed=bool(passed), detail=detail)


def _toy_geometries():
    return config.BUILTIN_LLMS["toy"], config.BUILTIN_ENCODERS["toy"]


def suite_masks():
    checks = []
    causal = CAUSAL_MASK_BUILDER(640)
    counts_ok = all(causal.allow[i].sum() == i + 1 for i in range(640))
    checks.append(_result("causal row i allows exactly i+1 keys (s=640)", counts_ok))
    checks.append(_result("causal mask is lower triangular",
                          np.array_equal(CAUSAL_MASK_BUILDER(3).allow, np.tril(np.ones((3, 3), bool)))))

    naavit = NAAVIT_MASK_BUILDER(2, 3)
    expected = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 0], [1, 1, 1, 1, 1]], dtype=bool)
    checks.append(_result("NAAViT mask pattern (v=2, t=3)", np.array_equal(naavit.allow, expected)))
    checks.append(_result("NAAViT v=0 equals causal",
                          np.array_equal(NAAVIT_MASK_BUILDER(0, 4).allow, CAUSAL_MASK_BUILDER(4).allow)))
    checks.append(_result("NAAViT single query row fully allowed",
                          NAAVIT_MASK_BUILDER(5, 1).allow.all()))
    return checks


def _random_attention_setup(rng, geom, v, t):
    def draw(rows, cols):
        return rng.standard_normal((rows, cols)) * 0.3

    w = attention.AttentionWeights(
        w_q=draw(geom.h, geom.h), w_k=draw(geom.h, geom.k),
        w_v=draw(geom.h, geom.k), w_o=draw(geom.h, geom.h))
    visual = rng.standard_normal((v, geom.h))
    text = rng.standard_normal((t, geom.h))
    return w, visual, text


def suite_equivalence(n_seeds=50):
    geom, _ = _toy_geometries()
    v, t = 6, 5
    worst = 0.0
    for seed in range(n_seeds):
        rng = make_rng(seed)
        w, visual, text = _random_attention_setup(rng, geom, v, t)
        concat = np.concatenate([visual, text])
        positions = np.arange(v + t)
        full = attention.vanilla_self_attention(concat, w, geom, positions, CAUSAL_MASK_BUILDER(v + t))
        naavit = attention.naavit_attention(visual, text, w, geom, positions[:v], positions[v:])
        worst = max(worst, float(np.abs(full[v:] - naavit).max()))
    checks = [_result(f"single-block NAAViT == text rows of causal attention ({n_seeds} seeds)",
                      worst < 1e-10, f"max |diff| = {worst:.2e}")]

    # Visual (token, position) pairs can be permuted without changing output.
    rng = make_rng(777)
    w, visual, text = _random_attention_setup(rng, geom, v, t)
    base = attention.naavit_attention(visual, text, w, geom, np.arange(v), np.arange(v, v + t))
    perm = rng.permutation(v)
    permuted = attention.naavit_attention(visual[perm], text, w, geom, np.arange(v)[perm], np.arange(v, v + t))
    diff = float(np.abs(base - permuted).max())
    checks.append(_result("NAAViT visual permutation invariance", diff < 1e-12, f"max |diff| = {diff:.2e}"))

    # GQA with kv_heads == heads must agree with the ungrouped path.
    full_geom = config.ModelGeometry(n=1, h=16, heads=4, kv_heads=4, m=32)
    rng = make_rng(778)
    w, visual, text = _random_attention_setup(rng, full_geom, v, t)
    concat = np.concatenate([visual, text])
    out = attention.vanilla_self_attention(concat, w, full_geom, np.arange(v + t), CAUSAL_MASK_BUILDER(v + t))
    ref = _per_head_reference(concat, w, full_geom, np.arange(v + t), CAUSAL_MASK_BUILDER(v + t).allow)
    diff = float(np.abs(out - ref).max())
    checks.append(_result("GQA path with kv_heads == heads matches naive loop", diff < 1e-12, f"max |diff| = {diff:.2e}"))

    # Causality: perturbing token j leaves every earlier output row alone.
    rng = make_rng(779)
    w, visual, text = _random_attention_setup(rng, geom, 0, 8)
    mask = CAUSAL_MASK_BUILDER(8)
    base = attention.vanilla_self_attention(text, w, geom, np.arange(8), mask)
    bumped = text.copy()
    bumped[5] += 1.0
    after = attention.vanilla_self_attention(bumped, w, geom, np.arange(8), mask)
    checks.append(_result("causality: perturbing token 5 leaves rows 0..4 unchanged",
                          np.array_equal(base[:5], after[:5])))

    # W_Q/W_O cost scales with the query count, not the key count.
    counts = {}
    for v_probe in (4, 20):
        counter = FlopCounter()
        rng = make_rng(780)
        w, visual, text = _random_attention_setup(rng, geom, v_probe, t)
        attention.naavit_attention(visual, text, w, geom, np.arange(v_probe),
                                   np.arange(v_probe, v_probe + t), counter=counter)
        counts[v_probe] = counter.get("qkvo_proj")
    kv_growth = 4 * (20 - 4) * geom.h * geom.k  # extra K/V projection work only
    checks.append(_result("NAAViT W_Q/W_O FLOPs independent of v",
                          counts[20] - counts[4] == kv_growth,
                          f"qkvo delta {counts[20] - counts[4]} vs K/V-only delta {kv_growth}"))
    return checks


def _per_head_reference(x, w, geom, positions, allow):
    """Naive per-query, per-head attention; the independent oracle."""
    from .kernels import rope_apply

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
            scores = qh[i] @ kh.T / np.sqrt(geom.head_dim)
            scores = np.where(allow[i], scores, -np.inf)
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            out[i, head * geom.head_dim:(head + 1) * geom.head_dim] = weights @ vh
    return out @ w.w_o + x


def gradcheck_setup(projector_mode, scale=GRADCHECK_SCALE):
    """A well-conditioned toy-saisa point for finite-difference checks.

    Weights are rescaled to dimension-healthy magnitude so gradient entries
    sit far above the oracle's roundoff floor (the 0.02 init at h=16 puts
    most of them inside the noise).
    """
    geom = config.ModelGeometry(n=2, h=16, heads=4, kv_heads=2, m=32)
    enc = config.EncoderGeometry(v=3, d=8)
    vocab = 11
    w = model.init_model(model.SAISA, geom, enc, vocab, seed=GRADCHECK_SEED, projector_mode=projector_mode)
    params = model.named_parameters(w)
    for name, arr in params.items():
        if "norm" not in name:
            params[name] = arr * scale
    model.set_parameters(w, params)
    rng = make_rng(GRADCHECK_BATCH_SEED)
    batch = model.make_token_batch(rng.uniform(-1, 1, (3, 8)), rng.integers(0, vocab, 4))
    targets = rng.integers(0, vocab, 4)
    return w, batch, targets


def run_gradcheck(w, batch, targets, rel_tol=1e-5, fd_floor=1e-8, h=GRADCHECK_STEP, names=None):
    """Compare analytic gradients against central differences, per entry.

    Returns (worst relative error, tensor name); entries whose
    finite-difference magnitude is at or below `fd_floor` are skipped.
    """
    _, grads = model.backward(w, batch, targets)
    params = model.named_parameters(w)
    worst, worst_name = 0.0, "-"
    for name, arr in params.items():
        if names is not None and name not in names:
            continue
        fd = finite_diff_grad(lambda _x: model.backward(w, batch, targets)[0], arr, h=h)
        mask = np.abs(fd) > fd_floor
        if not mask.any():
            continue
        rel = (np.abs(grads[name] - fd)[mask] / np.abs(fd)[mask]).max()
        if rel > worst:
            worst, worst_name = float(rel), name
    return worst, worst_name


def suite_gradients():
    checks = []
    for mode, label in ((model.PER_LAYER, "finetune set (all tensors, per-layer projector)"),
                        (model.SHARED, "pretrain set (shared projector)")):
        w, batch, targets = gradcheck_setup(mode)
        names = None if mode == model.PER_LAYER else [n for n in model.named_parameters(w) if n.startswith("projector.")]
        worst, name = run_gradcheck(w, batch, targets, names=names)
        checks.append(_result(f"analytic vs finite-difference gradients, {label}",
                              worst < 1e-5, f"worst rel err {worst:.2e} ({name})"))

    # Shared projector gradient == sum of per-layer gradients after replication.
    w, batch, targets = gradcheck_setup(model.SHARED)
    _, shared_grads = model.backward(w, batch, targets)
    w_rep = model.clone_weights(w)
    w_rep.projector = model.replicate_projector(w_rep.projector, w_rep.geom.n)
    _, rep_grads = model.backward(w_rep, batch, targets)
    diff = 0.0
    for part in ("w1", "w2"):
        summed = sum(rep_grads[f"projector.{j}.{part}"] for j in range(w.geom.n))
        diff = max(diff, float(np.abs(shared_grads[f"projector.0.{part}"] - summed).max()))
    checks.append(_result("shared projector gradient equals per-layer sum", diff < 1e-10,
                          f"max |diff| = {diff:.2e}"))
    return checks


def suite_flops_oracle():
    checks = []
    llm, enc = _toy_geometries()
    mismatches = []
    for variant, formula in ((model.BASELINE_EMBED, flops.flops_llava), (model.SAISA, flops.flops_saisa)):
        for v in TOY_GRID_V:
            for t in TOY_GRID_T:
                query = flops.CostQuery(llm=llm, encoder=config.EncoderGeometry(v=v, d=enc.d), v=v, t=t)
                predicted = formula(query)
                measured = flops.oracle_count_flops(variant, llm, enc, v=v, t=t)
                if predicted != measured:
                    mismatches.append((variant, v, t))
    checks.append(_result(
        f"formula == instrumented execution, both architectures, v in {TOY_GRID_V}, t in {TOY_GRID_T}",
        not mismatches, f"mismatches: {mismatches}" if mismatches else "exact, component-wise"))

    registry = config.PresetRegistry(llms=dict(config.BUILTIN_LLMS), encoders=dict(config.BUILTIN_ENCODERS))
    bad = []
    for (llm_id, enc_id, arch), (expected, tol) in config.REFERENCE_TFLOPS.items():
        if (llm_id, enc_id) == ("vicuna-7b", "convnext-xxl-1024") and arch == "saisa":
            continue  # documented d discrepancy; flagged at preset load instead
        encoder = registry.encoders[enc_id]
        query = flops.CostQuery(llm=registry.llms[llm_id], encoder=encoder, v=encoder.v, t=64)
        total = (flops.flops_llava(query) if arch == "llava" else flops.flops_saisa(query)).total
        if abs(total / 1e12 - expected) / expected > tol:
            bad.append((llm_id, enc_id, arch, total / 1e12))
    checks.append(_result("published TFLOPs reproduced at stated tolerances", not bad, f"off: {bad}"))

    ratio = flops.flops_ratio(flops.CostQuery(
        llm=registry.llms["vicuna-7b"], encoder=registry.encoders["clip-vit-l-336"], v=576, t=64))
    checks.append(_result("vicuna+clip t=64 cost ratio in [0.325, 0.345]",
                          0.325 <= ratio <= 0.345, f"ratio = {ratio:.6f}"))

    v_grid = [64 * 2**i for i in range(6)]
    monotone = True
    for t in (16, 64, 256):
        rows = flops.sweep(registry.llms["vicuna-7b"], registry.encoders["clip-vit-l-336"], v_grid, [t])
        ratios = [r[4] for r in rows]
        monotone &= all(b <= a + 1e-15 for a, b in zip(ratios, ratios[1:]))
    checks.append(_result("cost ratio monotone non-increasing in v (t in {16,64,256})", monotone))

    splits_ok = True
    for arch in (flops.LLAVA, flops.SAISA_ARCH):
        q = flops.CostQuery(llm=llm, encoder=enc, v=6, t=5)
        parts = flops.attention_complexity_split(q, arch)
        total = (flops.flops_llava(q) if arch == flops.LLAVA else flops.flops_saisa(q)).attention_scores
        splits_ok &= sum(parts) == total and all(p >= 0 for p in parts)
        if arch == flops.SAISA_ARCH:
            splits_ok &= parts[0] == 0
    checks.append(_result("attention split components sum exactly; SAISA vis-vis == 0", splits_ok))
    return checks


SUITES = {
    "masks": suite_masks,
    "equivalence": suite_equivalence,
    "gradients": suite_gradients,
    "flops-oracle": suite_flops_oracle,
}


def run_suites(names):
    results = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}; available: {sorted(SUITES)} or 'all'")
        results.extend((name, check) for check in SUITES[name]())
    return results
