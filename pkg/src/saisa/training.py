"""Two-stage training on synthetic vision-language tasks, at toy scale.

Pre-training updates only the shared projector MLP (one MLP for every
layer); fine-tuning first replicates that MLP per layer (saisa variant)
and then trains everything.  Data is generated on the fly by deterministic
rules, so a (seed, config, task) triple fully determines the loss curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .kernels import make_rng

PRETRAIN = "pretrain"
FINETUNE = "finetune"

RULE_COPY_INDEX = "copy-index"
RULE_FEATURE_ARGMAX = "feature-argmax"
RULE_CONSTANT = "constant"
RULES = (RULE_COPY_INDEX, RULE_FEATURE_ARGMAX, RULE_CONSTANT)

BOS_TOKEN = 0


@dataclass(frozen=True)
class SyntheticTask:
    """Deterministic mapping from a visual feature block to target text.

    Rules: ``copy-index`` targets position j's own index mod vocab;
    ``feature-argmax`` targets argmax(Z[j mod v]) mod vocab; ``constant``
    targets seed mod vocab regardless of Z.
    """

    seed: int
    vocab_size: int
    v: int
    t: int
    d: int
    rule: str = RULE_FEATURE_ARGMAX

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; expected one of {RULES}")
        if self.rule == RULE_FEATURE_ARGMAX and self.v < 1:
            raise ValueError("feature-argmax needs at least one visual token")


@dataclass
class TrainConfig:
    stage: str
    steps: int
    batch_size: int = 8
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if self.stage not in (PRETRAIN, FINETUNE):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps must be >= 0, batch size >= 1, lr > 0")

    @property
    def dtype(self):
        return np.dtype(self.precision)


def targets_for(task, Z):
    """Apply the task rule to a visual block; pure in (rule, Z, seed)."""
    if task.rule == RULE_CONSTANT:
        return np.full(task.t, task.seed % task.vocab_size, dtype=np.int64)
    if task.rule == RULE_COPY_INDEX:
        return np.arange(task.t, dtype=np.int64) % task.vocab_size
    rows = np.arange(task.t) % task.v
    return (Z[rows].argmax(axis=1) % task.vocab_size).astype(np.int64)


def gen_batch(task, step):
    """Deterministic (TokenBatch, target ids) for (task.seed, step)."""
    rng = make_rng(task.seed, step)
    Z = rng.uniform(-1.0, 1.0, size=(task.v, task.d))
    targets = targets_for(task, Z)
    input_ids = np.concatenate([[BOS_TOKEN], targets[:-1]])
    return model.make_token_batch(Z, input_ids), targets


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, state, cfg):
    """One Adam update over the tensors named in `grads`; returns new params.

    Tensors absent from `grads` pass through untouched, which is how the
    stage's frozen set is enforced.
    """
    state.step += 1
    t = state.step
    out = dict(params)
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise ValueError(f"non-finite gradient for tensor {name!r}")
        theta = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        out[name] = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def trainable_names(w, stage):
    """The stage's trainable set: projector only in pretrain, all in finetune."""
    names = list(model.named_parameters(w))
    if stage == PRETRAIN:
        return [n for n in names if n.startswith("projector.")]
    return names


def _mean_loss_and_grads(w, task, global_step, batch_size):
    total_grads = None
    total_loss = 0.0
    for b in range(batch_size):
        batch, targets = gen_batch(task, global_step * batch_size + b)
        dtype = w.embed.dtype
        batch.Z = batch.Z.astype(dtype)
        loss, grads = model.backward(w, batch, targets)
        total_loss += loss
        if total_grads is None:
            total_grads = grads
        else:
            for name in total_grads:
                total_grads[name] += grads[name]
    scale = 1.0 / batch_size
    for name in total_grads:
        total_grads[name] = (total_grads[name] * scale).astype(w.embed.dtype)
    return total_loss * scale, total_grads


def _run_stage(w, task, cfg, stage, start_step=0):
    if w.embed.dtype != cfg.dtype:
        # A silent cast would break the stage's bitwise frozen-set contract.
        raise ValueError(f"weights are {w.embed.dtype}, config wants {cfg.precision}")
    weights = model.clone_weights(w)
    names = trainable_names(weights, stage)
    state = AdamState()
    history = []
    for step in range(cfg.steps):
        loss, grads = _mean_loss_and_grads(weights, task, start_step + step, cfg.batch_size)
        if not np.isfinite(loss):
            raise ValueError(f"non-finite loss at step {start_step + step}")
        history.append((start_step + step, stage, loss, cfg.lr))
        updates = {name: grads[name] for name in names}
        params = optimizer_step(model.named_parameters(weights), updates, state, cfg)
        model.set_parameters(weights, params)
    return weights, history, state


def pretrain(w, task, cfg, start_step=0):
    """Stage 1: train the shared projector MLP, everything else frozen.

    Returns (weights, history, adam state); history rows are
    (step, stage, loss, lr).
    """
    if cfg.stage != PRETRAIN:
        raise ValueError(f"pretrain called with stage {cfg.stage!r}")
    if w.projector.mode != model.SHARED:
        raise ValueError("pretrain requires a shared projector")
    return _run_stage(w, task, cfg, PRETRAIN, start_step)


def finetune(w, task, cfg, start_step=0):
    """Stage 2: everything trainable; saisa replicates the shared MLP first."""
    if cfg.stage != FINETUNE:
        raise ValueError(f"finetune called with stage {cfg.stage!r}")
    weights = model.clone_weights(w)
    if weights.variant == model.SAISA and weights.projector.mode == model.SHARED:
        weights.projector = model.replicate_projector(weights.projector, weights.geom.n)
    return _run_stage(weights, task, cfg, FINETUNE, start_step)
