"""Dense numeric kernels shared by the attention, model and cost modules.

Everything here is a pure function over numpy arrays.  Verification code
runs these in float64; the training loop may run them in float32.  The
matmul wrapper is the single counted path for FLOP instrumentation: every
product that the cost model accounts for must go through it.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

RNG_ALGORITHM = "pcg64"

RMS_EPS = 1e-6


def make_rng(seed, *stream):
    """Deterministic generator for (seed, *stream); algorithm is PCG64.

    Extra integers select independent, reproducible substreams (e.g. one
    per training step and per example within a batch).
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed),) + tuple(int(s) for s in stream))))


class FlopCounter:
    """Per-invocation multiply-accumulate counter (2 FLOPs per MAC).

    Counts are attributed to named components; matmuls executed with
    component=None (e.g. the vocabulary projection) are not recorded,
    matching an accounting that covers only attention/FFN/projector work.
    """

    def __init__(self):
        self.by_component: dict[str, int] = {}

    def add(self, component, flops):
        if component is None:
            return
        self.by_component[component] = self.by_component.get(component, 0) + int(flops)

    def get(self, component):
        return self.by_component.get(component, 0)

    @property
    def total(self):
        return sum(self.by_component.values())


def matmul(a, b, counter=None, component=None):
    """Matrix product, optionally recording 2*m*k*n FLOPs on `counter`.

    Accepts 2-D operands or stacked 3-D operands with a shared leading
    batch axis (the per-head case); the batch multiplies the count.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise ValueError(f"matmul expects matching 2-D or 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if counter is not None:
        batch = a.shape[0] if a.ndim == 3 else 1
        counter.add(component, 2 * batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return a @ b


def masked_softmax_rows(scores, mask, scale):
    """Row softmax of `scores * scale` with disallowed entries forced to zero.

    `mask` is a boolean allow matrix (or anything with an `.allow` array)
    of the same trailing shape as `scores`.  A row with no allowed entry
    signals a malformed mask and is rejected.
    """
    allow = np.asarray(getattr(mask, "allow", mask), dtype=bool)
    scores = np.asarray(scores)
    if scores.shape[-2:] != allow.shape[-2:]:
        raise ValueError(f"scores shape {scores.shape} does not match mask shape {allow.shape}")
    if scale <= 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    if not allow.any(axis=-1).all():
        raise ValueError("masked_softmax_rows: fully masked row (no allowed entries)")
    shifted = np.where(allow, scores * scale, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def softmax_rows_vjp(probs, d_probs):
    """Backward of a row softmax: probs ⊙ (d − Σ d⊙probs) per row."""
    inner = (d_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (d_probs - inner)


def rms_norm(x, gain):
    """Scale each row to unit root-mean-square (epsilon 1e-6 under the root)."""
    x = np.asarray(x)
    gain = np.asarray(gain)
    if gain.shape != (x.shape[-1],):
        raise ValueError(f"gain length {gain.shape} does not match row width {x.shape[-1]}")
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return (x / rms) * gain


def rms_norm_vjp(d_out, x, gain):
    """Gradients of rms_norm w.r.t. its input and gain."""
    width = x.shape[-1]
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    x_hat = x / rms
    d_gain = (d_out * x_hat).sum(axis=tuple(range(x.ndim - 1)))
    u = d_out * gain
    d_x = u / rms - x * ((u * x).sum(axis=-1, keepdims=True) / (width * rms**3))
    return d_x, d_gain


def gelu(x):
    """Exact erf-based GELU, x * Phi(x)."""
    x = np.asarray(x)
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    x = np.asarray(x)
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return cdf + x * phi


def silu(x):
    """x * sigmoid(x)."""
    x = np.asarray(x)
    return x * expit(x)


def silu_grad(x):
    x = np.asarray(x)
    sig = expit(x)
    return sig * (1.0 + x * (1.0 - sig))


def rope_apply(x, positions, head_dim, base=10000.0, inverse=False):
    """Rotate consecutive in-head pairs of each row by position-dependent angles.

    Pair p of every head turns by positions[r] * base**(-2p/head_dim); the
    pairwise L2 norm is preserved and position 0 is the identity.  Columns
    must tile into heads of `head_dim` (even).  `inverse` applies the
    opposite rotation, which is also the transpose used by backprop.
    """
    x = np.asarray(x)
    positions = np.asarray(positions)
    if head_dim % 2 != 0:
        raise ValueError(f"rope head_dim must be even, got {head_dim}")
    rows, cols = x.shape
    if cols % head_dim != 0:
        raise ValueError(f"rope: {cols} columns not divisible by head_dim {head_dim}")
    if positions.shape != (rows,):
        raise ValueError(f"rope: {positions.shape} positions for {rows} rows")
    half = head_dim // 2
    freqs = base ** (-2.0 * np.arange(half) / head_dim)
    angles = positions[:, None].astype(np.float64) * freqs[None, :]
    cos = np.cos(angles).astype(x.dtype)[:, None, :]
    sin = np.sin(angles).astype(x.dtype)[:, None, :]
    if inverse:
        sin = -sin
    paired = x.reshape(rows, cols // head_dim, half, 2)
    even, odd = paired[..., 0], paired[..., 1]
    rotated = np.stack([even * cos - odd * sin, even * sin + odd * cos], axis=-1)
    return rotated.reshape(rows, cols)


def finite_diff_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of a float64 matrix.

    The verification oracle for every hand-derived gradient in the model:
    (f(x + h e) - f(x - h e)) / 2h per entry.
    """
    x = np.asarray(x)
    if x.dtype != np.float64:
        raise ValueError(f"finite_diff_grad requires float64 input, got {x.dtype}")
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = f(x)
        flat_x[i] = orig - h
        f_minus = f(x)
        flat_x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"finite_diff_grad: non-finite evaluation at flat index {i}")
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
