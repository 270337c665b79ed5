"""The three model variants and their hand-derived gradients.

Variants:

* ``baseline-embed``: project visual features once into the embedding
  space, concatenate [V, T], and run vanilla causal decoder layers.
* ``pilot-naavit``: same concatenated layout, but every layer's attention
  updates only the text rows; visual rows bypass attention and (by
  default) still pass through the FFN+residual.
* ``saisa``: visual features are re-projected per layer straight into the
  attention key/value input space; FFNs run on text rows only, so visual
  tokens are never updated anywhere.

Decoder layers are pre-norm RMS blocks with a gated (gate/up/down) SiLU
FFN, mirroring the backbone families the geometries describe.  All
gradients are hand-derived and checked against the central-difference
oracle in the tests; there is no autodiff here.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (
    AttentionWeights,
    build_causal_mask,
    naavit_attention_bwd,
    naavit_attention_fwd,
    vanilla_self_attention_bwd,
    vanilla_self_attention_fwd,
)
from .config import EncoderGeometry, ModelGeometry
from .kernels import gelu, gelu_grad, make_rng, matmul, rms_norm, rms_norm_vjp, silu, silu_grad

BASELINE_EMBED = "baseline-embed"
PILOT_NAAVIT = "pilot-naavit"
SAISA = "saisa"
VARIANTS = (BASELINE_EMBED, PILOT_NAAVIT, SAISA)

SHARED = "shared"
PER_LAYER = "per-layer"

INIT_STD = 0.02


@dataclass
class ProjectorMlp:
    w1: np.ndarray  # d x h
    w2: np.ndarray  # h x h


@dataclass
class ProjectorWeights:
    """Visual projector: one MLP when shared, one per decoder layer otherwise."""

    mode: str
    mlps: list[ProjectorMlp]

    def __post_init__(self):
        if self.mode == SHARED and len(self.mlps) != 1:
            raise ValueError(f"shared projector must hold exactly one MLP, got {len(self.mlps)}")


@dataclass
class DecoderLayerWeights:
    attn: AttentionWeights
    ffn_gate: np.ndarray  # h x m
    ffn_up: np.ndarray    # h x m
    ffn_down: np.ndarray  # m x h
    norm_attn: np.ndarray
    norm_ffn: np.ndarray


@dataclass
class TokenBatch:
    """One synthetic example: visual feature block plus text token ids."""

    Z: np.ndarray          # v x d
    text_ids: np.ndarray   # t
    vis_positions: np.ndarray
    txt_positions: np.ndarray

    @property
    def v(self):
        return self.Z.shape[0]

    @property
    def t(self):
        return len(self.text_ids)

    def validate(self):
        if self.t < 1:
            raise ValueError("batch needs at least one text token")
        for name, pos in (("vis_positions", self.vis_positions), ("txt_positions", self.txt_positions)):
            if len(pos) > 1 and not (np.diff(pos) > 0).all():
                raise ValueError(f"{name} must be strictly increasing")
        if self.v and self.t and self.txt_positions[0] <= self.vis_positions[-1]:
            raise ValueError("text positions must follow visual positions")


def make_token_batch(Z, text_ids, vis_positions=None, txt_positions=None):
    """Batch with the default layout: visual at 0..v-1, text at v..v+t-1."""
    Z = np.asarray(Z)
    text_ids = np.asarray(text_ids, dtype=np.int64)
    v, t = Z.shape[0], len(text_ids)
    batch = TokenBatch(
        Z=Z,
        text_ids=text_ids,
        vis_positions=np.arange(v) if vis_positions is None else np.asarray(vis_positions),
        txt_positions=np.arange(v, v + t) if txt_positions is None else np.asarray(txt_positions),
    )
    batch.validate()
    return batch


@dataclass
class ModelWeights:
    variant: str
    geom: ModelGeometry
    enc: EncoderGeometry
    vocab_size: int
    embed: np.ndarray      # vocab x h
    unembed: np.ndarray    # h x vocab
    layers: list[DecoderLayerWeights]
    projector: ProjectorWeights
    final_norm: np.ndarray
    pilot_freeze_visual: bool = False

    def check_consistent(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant in (BASELINE_EMBED, PILOT_NAAVIT) and self.projector.mode != SHARED:
            raise ValueError(f"{self.variant} uses a single input projector; got mode {self.projector.mode!r}")


@dataclass
class ForwardTrace:
    """Per-layer text hiddens T_0..T_n, attention outputs H_i, logits.

    ``visual`` holds the per-layer projected visual blocks for the saisa
    variant (it is structural there that they depend only on Z and the
    projector); None for the concatenated variants.
    """

    text_hidden: list = field(default_factory=list)
    visual: list | None = None
    attn_out: list = field(default_factory=list)
    logits: np.ndarray | None = None


def init_model(variant, geom, enc, vocab_size, seed, dtype=np.float64,
               projector_mode=None, pilot_freeze_visual=False, init_std=INIT_STD):
    """Seeded initialization: normal(0, init_std) projections, unit norm gains.

    The 0.02 default matches decoder-LM convention at production widths;
    toy-width training runs want the dimension-scaled 1/sqrt(h) instead.
    The projector is drawn after all text-path weights, so two variants
    initialized from the same seed share identical LLM weights.
    """
    if projector_mode is None:
        projector_mode = PER_LAYER if variant == SAISA else SHARED
    rng = make_rng(seed)

    def draw(rows, cols):
        return (rng.standard_normal((rows, cols)) * init_std).astype(dtype)

    embed = draw(vocab_size, geom.h)
    unembed = draw(geom.h, vocab_size)
    layers = []
    for _ in range(geom.n):
        layers.append(DecoderLayerWeights(
            attn=AttentionWeights(
                w_q=draw(geom.h, geom.h),
                w_k=draw(geom.h, geom.k),
                w_v=draw(geom.h, geom.k),
                w_o=draw(geom.h, geom.h),
            ),
            ffn_gate=draw(geom.h, geom.m),
            ffn_up=draw(geom.h, geom.m),
            ffn_down=draw(geom.m, geom.h),
            norm_attn=np.ones(geom.h, dtype=dtype),
            norm_ffn=np.ones(geom.h, dtype=dtype),
        ))
    n_mlps = geom.n if projector_mode == PER_LAYER else 1
    mlps = [ProjectorMlp(w1=draw(enc.d, geom.h), w2=draw(geom.h, geom.h)) for _ in range(n_mlps)]
    weights = ModelWeights(
        variant=variant, geom=geom, enc=enc, vocab_size=vocab_size,
        embed=embed, unembed=unembed, layers=layers,
        projector=ProjectorWeights(mode=projector_mode, mlps=mlps),
        final_norm=np.ones(geom.h, dtype=dtype),
        pilot_freeze_visual=pilot_freeze_visual,
    )
    weights.check_consistent()
    return weights


def named_parameters(w):
    """Deterministically ordered name -> array view of every trainable tensor."""
    params = {"embed": w.embed, "unembed": w.unembed}
    for i, lw in enumerate(w.layers):
        params[f"layers.{i}.w_q"] = lw.attn.w_q
        params[f"layers.{i}.w_k"] = lw.attn.w_k
        params[f"layers.{i}.w_v"] = lw.attn.w_v
        params[f"layers.{i}.w_o"] = lw.attn.w_o
        params[f"layers.{i}.ffn_gate"] = lw.ffn_gate
        params[f"layers.{i}.ffn_up"] = lw.ffn_up
        params[f"layers.{i}.ffn_down"] = lw.ffn_down
        params[f"layers.{i}.norm_attn"] = lw.norm_attn
        params[f"layers.{i}.norm_ffn"] = lw.norm_ffn
    for j, mlp in enumerate(w.projector.mlps):
        params[f"projector.{j}.w1"] = mlp.w1
        params[f"projector.{j}.w2"] = mlp.w2
    params["final_norm"] = w.final_norm
    return params


def set_parameters(w, params):
    """Inverse of named_parameters: write arrays back into a weights object."""
    w.embed = params["embed"]
    w.unembed = params["unembed"]
    for i, lw in enumerate(w.layers):
        lw.attn = AttentionWeights(
            w_q=params[f"layers.{i}.w_q"],
            w_k=params[f"layers.{i}.w_k"],
            w_v=params[f"layers.{i}.w_v"],
            w_o=params[f"layers.{i}.w_o"],
        )
        lw.ffn_gate = params[f"layers.{i}.ffn_gate"]
        lw.ffn_up = params[f"layers.{i}.ffn_up"]
        lw.ffn_down = params[f"layers.{i}.ffn_down"]
        lw.norm_attn = params[f"layers.{i}.norm_attn"]
        lw.norm_ffn = params[f"layers.{i}.norm_ffn"]
    for j, mlp in enumerate(w.projector.mlps):
        mlp.w1 = params[f"projector.{j}.w1"]
        mlp.w2 = params[f"projector.{j}.w2"]
    w.final_norm = params["final_norm"]
    return w


def clone_weights(w):
    params = {name: arr.copy() for name, arr in named_parameters(w).items()}
    cloned = replace(
        w,
        layers=[replace(lw) for lw in w.layers],
        projector=ProjectorWeights(w.projector.mode, [ProjectorMlp(m.w1, m.w2) for m in w.projector.mlps]),
    )
    return set_parameters(cloned, params)


# ---------------------------------------------------------------------------
# projector
# ---------------------------------------------------------------------------

def _projector_mlp(proj, layer):
    if proj.mode == SHARED:
        return proj.mlps[0]
    if not 0 <= layer < len(proj.mlps):
        raise ValueError(f"projector layer index {layer} out of range (n={len(proj.mlps)})")
    return proj.mlps[layer]


def project_fwd(Z, proj, layer, counter=None):
    mlp = _projector_mlp(proj, layer)
    pre = matmul(Z, mlp.w1, counter, "projector")
    hidden = gelu(pre)
    out = matmul(hidden, mlp.w2, counter, "projector")
    return out, {"pre": pre, "hidden": hidden}


def project(Z, proj, layer, counter=None):
    """Two-layer MLP alignment of visual features: gelu(Z W1) W2."""
    out, _ = project_fwd(Z, proj, layer, counter)
    return out


def project_bwd(d_out, cache, Z, mlp):
    d_w2 = cache["hidden"].T @ d_out
    d_hidden = d_out @ mlp.w2.T
    d_pre = d_hidden * gelu_grad(cache["pre"])
    d_w1 = Z.T @ d_pre
    return d_w1, d_w2


def replicate_projector(proj, n):
    """Deep-copy a shared MLP into n independent per-layer MLPs."""
    if proj.mode != SHARED:
        raise ValueError(f"can only replicate a shared projector, got mode {proj.mode!r}")
    shared = proj.mlps[0]
    return ProjectorWeights(mode=PER_LAYER, mlps=[ProjectorMlp(shared.w1.copy(), shared.w2.copy()) for _ in range(n)])


# ---------------------------------------------------------------------------
# FFN sub-block (pre-norm, gated SiLU, residual)
# ---------------------------------------------------------------------------

def _ffn_fwd(x_in, lw, counter=None):
    normed = rms_norm(x_in, lw.norm_ffn)
    gate_pre = matmul(normed, lw.ffn_gate, counter, "ffn")
    up = matmul(normed, lw.ffn_up, counter, "ffn")
    gated = silu(gate_pre) * up
    out = x_in + matmul(gated, lw.ffn_down, counter, "ffn")
    return out, {"x_in": x_in, "normed": normed, "gate_pre": gate_pre, "up": up, "gated": gated}


def _ffn_bwd(d_out, cache, lw):
    d_gated = d_out @ lw.ffn_down.T
    d_down = cache["gated"].T @ d_out
    act = silu(cache["gate_pre"])
    d_up_branch = d_gated * act
    d_gate_pre = d_gated * cache["up"] * silu_grad(cache["gate_pre"])
    d_normed = d_gate_pre @ lw.ffn_gate.T + d_up_branch @ lw.ffn_up.T
    d_gate = cache["normed"].T @ d_gate_pre
    d_up = cache["normed"].T @ d_up_branch
    d_x_norm, d_norm_ffn = rms_norm_vjp(d_normed, cache["x_in"], lw.norm_ffn)
    grads = {"ffn_gate": d_gate, "ffn_up": d_up, "ffn_down": d_down, "norm_ffn": d_norm_ffn}
    return d_out + d_x_norm, grads


def saisa_layer_forward(T_i, V_i, lw, geom, vis_positions, txt_positions, counter=None):
    """One saisa decoder layer: NAAViT over (V_i, normed T_i) then text-only FFN.

    V_i feeds the key/value projections directly, without the layer's input
    norm: the projector owns the alignment into that space.
    """
    out, _, _ = _saisa_layer_fwd(T_i, V_i, lw, geom, vis_positions, txt_positions, counter)
    return out


def _saisa_layer_fwd(T_i, V_i, lw, geom, vis_positions, txt_positions, counter=None):
    normed = rms_norm(T_i, lw.norm_attn)
    attn_out, attn_cache = naavit_attention_fwd(
        V_i, normed, lw.attn, geom, vis_positions, txt_positions, residual=T_i, counter=counter)
    t_next, ffn_cache = _ffn_fwd(attn_out, lw, counter)
    return t_next, attn_out, {"T_i": T_i, "attn": attn_cache, "ffn": ffn_cache}


def _saisa_layer_bwd(d_t_next, cache, lw):
    d_attn_out, ffn_grads = _ffn_bwd(d_t_next, cache["ffn"], lw)
    d_visual, d_normed, d_resid, attn_grads = naavit_attention_bwd(d_attn_out, cache["attn"])
    d_t_norm, d_norm_attn = rms_norm_vjp(d_normed, cache["T_i"], lw.norm_attn)
    grads = dict(attn_grads)
    grads.update(ffn_grads)
    grads["norm_attn"] = d_norm_attn
    return d_resid + d_t_norm, d_visual, grads


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def _validate_batch(w, batch):
    batch.validate()
    if batch.v and batch.Z.shape[1] != w.enc.d:
        raise ValueError(f"visual features have dim {batch.Z.shape[1]}, expected {w.enc.d}")
    if batch.text_ids.min() < 0 or batch.text_ids.max() >= w.vocab_size:
        raise ValueError(f"token id out of range for vocab {w.vocab_size}")


def forward(w, batch, counter=None):
    """Run the variant's forward pass; returns a ForwardTrace with logits."""
    trace, _ = _forward_with_cache(w, batch, counter)
    return trace


def _forward_with_cache(w, batch, counter=None):
    w.check_consistent()
    _validate_batch(w, batch)
    if w.variant == SAISA:
        return _forward_saisa(w, batch, counter)
    return _forward_concat(w, batch, counter)


def _head(w, text_final, counter):
    normed = rms_norm(text_final, w.final_norm)
    logits = matmul(normed, w.unembed, counter, None)  # outside the cost accounting
    return normed, logits


def _forward_saisa(w, batch, counter):
    T = w.embed[batch.text_ids]
    trace = ForwardTrace(text_hidden=[T], visual=[], attn_out=[])
    layer_caches = []
    proj_caches = []
    for i, lw in enumerate(w.layers):
        V_i, proj_cache = project_fwd(batch.Z, w.projector, i, counter)
        t_next, attn_out, cache = _saisa_layer_fwd(
            T, V_i, lw, w.geom, batch.vis_positions, batch.txt_positions, counter)
        trace.visual.append(V_i)
        trace.attn_out.append(attn_out)
        trace.text_hidden.append(t_next)
        layer_caches.append(cache)
        proj_caches.append(proj_cache)
        T = t_next
    final_normed, logits = _head(w, T, counter)
    trace.logits = logits
    return trace, {"layers": layer_caches, "proj": proj_caches, "final_normed": final_normed}


def _forward_concat(w, batch, counter):
    """Shared path for baseline-embed and pilot-naavit (concatenated layout)."""
    v, t = batch.v, batch.t
    T_emb = w.embed[batch.text_ids]
    V0, proj_cache = project_fwd(batch.Z, w.projector, 0, counter)
    X = np.concatenate([V0, T_emb], axis=0) if v else T_emb
    positions = np.concatenate([batch.vis_positions, batch.txt_positions]) if v else batch.txt_positions
    mask = build_causal_mask(v + t)

    trace = ForwardTrace(text_hidden=[X[v:]], visual=None, attn_out=[])
    layer_caches = []
    for lw in w.layers:
        normed = rms_norm(X, lw.norm_attn)
        if w.variant == BASELINE_EMBED:
            h_full, attn_cache = vanilla_self_attention_fwd(
                normed, lw.attn, w.geom, positions, mask, residual=X, counter=counter)
        else:
            h_text, attn_cache = naavit_attention_fwd(
                normed[:v], normed[v:], lw.attn, w.geom,
                batch.vis_positions, batch.txt_positions, residual=X[v:], counter=counter)
            h_full = np.concatenate([X[:v], h_text], axis=0) if v else h_text
        if w.variant == PILOT_NAAVIT and w.pilot_freeze_visual:
            t_rows, ffn_cache = _ffn_fwd(h_full[v:], lw, counter)
            x_next = np.concatenate([h_full[:v], t_rows], axis=0) if v else t_rows
        else:
            x_next, ffn_cache = _ffn_fwd(h_full, lw, counter)
        trace.attn_out.append(h_full[v:])
        trace.text_hidden.append(x_next[v:])
        layer_caches.append({"X": X, "attn": attn_cache, "ffn": ffn_cache})
        X = x_next
    final_normed, logits = _head(w, X[v:], counter)
    trace.logits = logits
    return trace, {"layers": layer_caches, "proj": proj_cache, "final_normed": final_normed}


# ---------------------------------------------------------------------------
# loss and full backward
# ---------------------------------------------------------------------------

def cross_entropy(logits, targets):
    """Mean next-token cross-entropy; returns (loss, d_logits)."""
    targets = np.asarray(targets)
    t = logits.shape[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    nll = log_z - shifted[np.arange(t), targets]
    loss = float(nll.mean())
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    probs[np.arange(t), targets] -= 1.0
    return loss, probs / t


def backward(w, batch, targets):
    """Loss and analytic gradients of every parameter tensor.

    Returns (loss, grads) with grads keyed exactly like named_parameters.
    The caller (training stage) decides which subset to actually update.
    """
    trace, caches = _forward_with_cache(w, batch)
    if not np.isfinite(trace.logits).all():
        raise ValueError("non-finite logits; cannot take gradients")
    loss, d_logits = cross_entropy(trace.logits, targets)

    grads = {name: np.zeros_like(arr) for name, arr in named_parameters(w).items()}
    grads["unembed"] += caches["final_normed"].T @ d_logits
    d_final_normed = d_logits @ w.unembed.T
    text_final = trace.text_hidden[-1]
    d_text, d_final_gain = rms_norm_vjp(d_final_normed, text_final, w.final_norm)
    grads["final_norm"] += d_final_gain

    if w.variant == SAISA:
        _backward_saisa(w, batch, caches, d_text, grads)
    else:
        _backward_concat(w, batch, caches, d_text, grads)
    return loss, grads


def _accumulate_layer_grads(grads, i, layer_grads):
    for key, value in layer_grads.items():
        grads[f"layers.{i}.{key}"] += value


def _projector_slot(w, layer_index):
    return 0 if w.projector.mode == SHARED else layer_index


def _backward_saisa(w, batch, caches, d_text, grads):
    for i in reversed(range(w.geom.n)):
        lw = w.layers[i]
        d_text, d_visual, layer_grads = _saisa_layer_bwd(d_text, caches["layers"][i], lw)
        _accumulate_layer_grads(grads, i, layer_grads)
        slot = _projector_slot(w, i)
        mlp = w.projector.mlps[slot]
        d_w1, d_w2 = project_bwd(d_visual, caches["proj"][i], batch.Z, mlp)
        grads[f"projector.{slot}.w1"] += d_w1
        grads[f"projector.{slot}.w2"] += d_w2
    np.add.at(grads["embed"], batch.text_ids, d_text)


def _backward_concat(w, batch, caches, d_text, grads):
    v = batch.v
    # Seed the full-sequence gradient: only text rows feed the head.
    d_x = np.zeros((v + batch.t, w.geom.h), dtype=d_text.dtype)
    d_x[v:] = d_text
    for i in reversed(range(w.geom.n)):
        lw = w.layers[i]
        cache = caches["layers"][i]
        if w.variant == PILOT_NAAVIT and w.pilot_freeze_visual:
            d_h_text, ffn_grads = _ffn_bwd(d_x[v:], cache["ffn"], lw)
            d_h_full = np.concatenate([d_x[:v], d_h_text], axis=0) if v else d_h_text
        else:
            d_h_full, ffn_grads = _ffn_bwd(d_x, cache["ffn"], lw)
        _accumulate_layer_grads(grads, i, ffn_grads)
        X = cache["X"]
        if w.variant == BASELINE_EMBED:
            d_normed, d_resid, attn_grads = vanilla_self_attention_bwd(d_h_full, cache["attn"])
            d_x_norm, d_norm_attn = rms_norm_vjp(d_normed, X, lw.norm_attn)
            d_x = d_resid + d_x_norm
        else:
            d_vis_norm, d_txt_norm, d_resid, attn_grads = naavit_attention_bwd(d_h_full[v:], cache["attn"])
            d_xv_norm, d_gain_v = rms_norm_vjp(d_vis_norm, X[:v], lw.norm_attn)
            d_xt_norm, d_gain_t = rms_norm_vjp(d_txt_norm, X[v:], lw.norm_attn)
            d_norm_attn = d_gain_v + d_gain_t
            d_x = np.concatenate([d_h_full[:v] + d_xv_norm, d_resid + d_xt_norm], axis=0) \
                if v else d_resid + d_xt_norm
        _accumulate_layer_grads(grads, i, attn_grads)
        grads[f"layers.{i}.norm_attn"] += d_norm_attn
    d_w1, d_w2 = project_bwd(d_x[:v], caches["proj"], batch.Z, w.projector.mlps[0])
    grads["projector.0.w1"] += d_w1
    grads["projector.0.w2"] += d_w2
    np.add.at(grads["embed"], batch.text_ids, d_x[v:])
