"""Closed-form inference FLOP model and its instrumented-execution oracle.

Single-image prefill cost of the LLM plus projector for the two
architectures, as exact integer FLOP counts (one multiply-accumulate is
two FLOPs):

* LLaVA-style (embedding-space alignment, s = v + t tokens everywhere):
  2 n s h (2h + 3m + 2k)  +  4 n s^2 h  +  2 v h d + 2 v h^2
* SAISA (per-layer key/value alignment, text-only queries and FFNs):
  2 n t h (2h + 3m + 2k) + 4 n v h k  +  4 n t (t+v) h  +  2 n v h d + 2 n v h^2

The attention terms count the full score/value rectangles (masking is not
discounted), softmax/norms/activations/rotary/vocabulary projections are
excluded, and grouped-query attention is counted at query width h for the
score products and at width k for the key/value projections.  The oracle
runs the real forward pass with an instrumented matmul and must reproduce
these numbers exactly, component by component.

Cross-attention (Flamingo-style) alignment is out of scope here: it has no
closed form in this model, only the qualitative note that it also avoids
attention among visual tokens at the price of large new parameter blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import EncoderGeometry, ModelGeometry, validate_encoder, validate_geometry

LLAVA = "llava"
SAISA_ARCH = "saisa"

ORACLE_FLOP_GUARD = 10**9


@dataclass(frozen=True)
class FlopsBreakdown:
    """Per-component FLOP counts; total is always the exact component sum."""

    architecture: str
    qkvo_proj: int
    attention_scores: int
    ffn: int
    projector: int

    @property
    def total(self):
        return self.qkvo_proj + self.attention_scores + self.ffn + self.projector

    def as_dict(self):
        return {
            "architecture": self.architecture,
            "qkvo_proj": self.qkvo_proj,
            "attention_scores": self.attention_scores,
            "ffn": self.ffn,
            "projector": self.projector,
            "total": self.total,
        }


@dataclass(frozen=True)
class CostQuery:
    """LLM geometry + encoder (supplies d) + token counts to price."""

    llm: ModelGeometry
    encoder: EncoderGeometry
    v: int
    t: int

    def validate(self, need_text=False):
        problems = validate_geometry(self.llm) + validate_encoder(self.encoder)
        if problems:
            raise ValueError(f"invalid cost query: {'; '.join(problems)}")
        if self.v < 0 or self.t < 0:
            raise ValueError(f"token counts must be non-negative, got v={self.v}, t={self.t}")
        if need_text and self.t < 1:
            raise ValueError("SAISA needs at least one text token (t >= 1)")


def flops_llava(q):
    """Breakdown for the embedding-space architecture at (v, t) tokens."""
    q.validate()
    n, h, m, k, d = q.llm.n, q.llm.h, q.llm.m, q.llm.k, q.encoder.d
    s = q.v + q.t
    return FlopsBreakdown(
        architecture=LLAVA,
        qkvo_proj=2 * n * s * h * (2 * h + 2 * k),
        attention_scores=4 * n * s * s * h,
        ffn=6 * n * s * h * m,
        projector=2 * q.v * h * d + 2 * q.v * h * h,
    )


def flops_saisa(q):
    """Breakdown for the per-layer-aligned architecture at (v, t) tokens."""
    q.validate(need_text=True)
    n, h, m, k, d = q.llm.n, q.llm.h, q.llm.m, q.llm.k, q.encoder.d
    return FlopsBreakdown(
        architecture=SAISA_ARCH,
        qkvo_proj=2 * n * q.t * h * (2 * h + 2 * k) + 4 * n * q.v * h * k,
        attention_scores=4 * n * q.t * (q.t + q.v) * h,
        ffn=6 * n * q.t * h * m,
        projector=2 * n * q.v * h * d + 2 * n * q.v * h * h,
    )


def flops_ratio(q):
    """SAISA total divided by LLaVA total for the same query."""
    return flops_saisa(q).total / flops_llava(q).total


def attention_complexity_split(q, architecture):
    """Split attention_scores into (vis_vis, vis_text, text_text) FLOPs.

    vis_vis is the attention among visual tokens, vis_text the text-query
    over visual-key interaction, and text_text the text-key remainder (the
    t^2 block plus, for LLaVA, the causally dead visual-query-over-text-key
    products, so the three parts always sum exactly to attention_scores).
    SAISA has vis_vis == 0 by construction.
    """
    v, t = q.v, q.t
    n, h = q.llm.n, q.llm.h
    if architecture == LLAVA:
        q.validate()
        vis_vis = 4 * n * v * v * h
        vis_text = 4 * n * v * t * h
        text_text = 4 * n * t * (t + v) * h
    elif architecture == SAISA_ARCH:
        q.validate(need_text=True)
        vis_vis = 0
        vis_text = 4 * n * v * t * h
        text_text = 4 * n * t * t * h
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    return vis_vis, vis_text, text_text


def sweep(llm, encoder, v_grid, t_grid):
    """Evaluate both formulas over the grid; rows ordered v-major, then t.

    Returns a list of (v, t, llava_total, saisa_total, ratio) tuples.
    """
    if not len(v_grid) or not len(t_grid):
        raise ValueError("sweep grids must be non-empty")
    rows = []
    for v in v_grid:
        for t in t_grid:
            q = CostQuery(llm=llm, encoder=encoder, v=int(v), t=int(t))
            llava_total = flops_llava(q).total
            saisa_total = flops_saisa(q).total
            rows.append((int(v), int(t), llava_total, saisa_total, saisa_total / llava_total))
    return rows


def oracle_count_flops(variant, llm, encoder, v, t, seed=0):
    """Count the FLOPs a real forward pass executes, by component.

    Builds seeded weights at the given geometry, runs the actual engine
    with an instrumented matmul, and returns the measured breakdown
    (baseline-embed validates the LLaVA formula, saisa the SAISA one).
    Guarded to toy scale: the predicted total must stay below 1e9.
    """
    from . import model
    from .kernels import FlopCounter, make_rng

    if variant not in (model.BASELINE_EMBED, model.SAISA):
        raise ValueError(f"oracle supports baseline-embed and saisa, got {variant!r}")
    arch = LLAVA if variant == model.BASELINE_EMBED else SAISA_ARCH
    query = CostQuery(llm=llm, encoder=EncoderGeometry(v=v, d=encoder.d), v=v, t=t)
    predicted = flops_llava(query) if arch == LLAVA else flops_saisa(query)
    if predicted.total >= ORACLE_FLOP_GUARD:
        raise ValueError(f"oracle guard: predicted {predicted.total} FLOPs >= {ORACLE_FLOP_GUARD}")

    vocab = 13
    weights = model.init_model(variant, llm, EncoderGeometry(v=v, d=encoder.d), vocab, seed)
    rng = make_rng(seed, 1)
    batch = model.make_token_batch(
        Z=rng.uniform(-1.0, 1.0, size=(v, encoder.d)),
        text_ids=rng.integers(0, vocab, size=t),
    )
    counter = FlopCounter()
    model.forward(weights, batch, counter=counter)
    return FlopsBreakdown(
        architecture=arch,
        qkvo_proj=counter.get("qkvo_proj"),
        attention_scores=counter.get("attention_scores"),
        ffn=counter.get("ffn"),
        projector=counter.get("projector"),
    )
