"""Geometry presets for LLM backbones and visual encoders.

Hidden dimensions of the named backbones come from their public model
configurations; each built-in (LLM, encoder) pair is cross-checked at load
time against the published inference-TFLOPs figure it should reproduce,
and any combination that misses its tolerance is flagged (not rejected).
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

PRESETS_ENV_VAR = "SAISA_PRESETS"


@dataclass(frozen=True)
class ModelGeometry:
    """Decoder-LLM dimensions: n layers, hidden h, FFN width m, head layout."""

    n: int
    h: int
    heads: int
    kv_heads: int
    m: int

    @property
    def head_dim(self):
        return self.h // self.heads

    @property
    def k(self):
        """Key/value projection output width (kv_heads * head_dim)."""
        return self.kv_heads * self.head_dim


@dataclass(frozen=True)
class EncoderGeometry:
    """Visual-feature block shape: v tokens of dimension d."""

    v: int
    d: int


def validate_geometry(g):
    """Return the list of violated invariants (empty when valid)."""
    violations = []
    for name in ("n", "h", "heads", "kv_heads", "m"):
        if getattr(g, name) <= 0:
            violations.append(f"{name} must be positive")
    if g.heads > 0 and g.h % g.heads != 0:
        violations.append("h mod heads != 0")
    if g.kv_heads > 0 and g.heads % g.kv_heads != 0:
        violations.append("heads mod kv_heads != 0")
    return violations


def validate_encoder(e):
    violations = []
    if e.v < 0:
        violations.append("v must be >= 0")
    if e.d < 1:
        violations.append("d must be >= 1")
    return violations


BUILTIN_LLMS = {
    "vicuna-7b": ModelGeometry(n=32, h=4096, heads=32, kv_heads=32, m=11008),
    "mistral-7b": ModelGeometry(n=32, h=4096, heads=32, kv_heads=8, m=14336),
    "llama3-8b": ModelGeometry(n=32, h=4096, heads=32, kv_heads=8, m=14336),
    "toy": ModelGeometry(n=2, h=16, heads=4, kv_heads=2, m=32),
    "bench-256": ModelGeometry(n=4, h=256, heads=8, kv_heads=4, m=512),
}

BUILTIN_ENCODERS = {
    "clip-vit-l-336": EncoderGeometry(v=576, d=1024),
    "siglip-so400m-384": EncoderGeometry(v=729, d=1152),
    # ConvNeXt-XXL natively emits 3072-dim features.  The published 4.44
    # SAISA TFLOPs for this encoder is only consistent with d ~= 1024, so
    # this pair is flagged at load time; override d via a preset file to
    # explore the alternative.
    "convnext-xxl-1024": EncoderGeometry(v=1024, d=3072),
    "toy": EncoderGeometry(v=6, d=8),
}

BUILTIN_SOURCES = {
    ("llm", "vicuna-7b"): "public Vicuna-7B-v1.5 configuration",
    ("llm", "mistral-7b"): "public Mistral-7B configuration (GQA, 8 kv heads)",
    ("llm", "llama3-8b"): "public Llama3-8B configuration (GQA, 8 kv heads)",
    ("llm", "toy"): "synthetic test fixture",
    ("llm", "bench-256"): "synthetic benchmark geometry",
    ("encoder", "clip-vit-l-336"): "CLIP-ViT-L/14-336 (576 tokens)",
    ("encoder", "siglip-so400m-384"): "SigLIP-ViT-SO400M/14-384 (729 tokens)",
    ("encoder", "convnext-xxl-1024"): "OpenCLIP ConvNeXt-XXL (1024 tokens, native d=3072)",
    ("encoder", "toy"): "synthetic test fixture",
}

# Published single-image inference TFLOPs at t=64 text tokens, with the
# relative tolerance each pair is expected to meet.  The GQA SAISA entries
# carry a documented ~5% gap from the closed form, and the ConvNeXt SAISA
# entry only matches if d ~= 1024 (see BUILTIN_ENCODERS note).
REFERENCE_TFLOPS = {
    ("vicuna-7b", "clip-vit-l-336", "llava"): (8.53, 0.005),
    ("vicuna-7b", "clip-vit-l-336", "saisa"): (2.86, 0.005),
    ("vicuna-7b", "siglip-so400m-384", "llava"): (10.63, 0.005),
    ("vicuna-7b", "siglip-so400m-384", "saisa"): (3.40, 0.01),
    ("vicuna-7b", "convnext-xxl-1024", "llava"): (14.76, 0.005),
    ("vicuna-7b", "convnext-xxl-1024", "saisa"): (4.44, 0.01),
    ("mistral-7b", "clip-vit-l-336", "llava"): (9.17, 0.005),
    ("mistral-7b", "clip-vit-l-336", "saisa"): (2.10, 0.06),
    ("llama3-8b", "clip-vit-l-336", "llava"): (9.17, 0.005),
    ("llama3-8b", "clip-vit-l-336", "saisa"): (2.10, 0.06),
}

REFERENCE_TEXT_TOKENS = 64


@dataclass
class PresetRegistry:
    """Immutable-after-load map of named geometries plus cross-check flags."""

    llms: dict[str, ModelGeometry] = field(default_factory=dict)
    encoders: dict[str, EncoderGeometry] = field(default_factory=dict)
    sources: dict[tuple[str, str], str] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def resolve_llm(self, preset_id):
        if preset_id not in self.llms:
            raise KeyError(f"unknown LLM preset {preset_id!r}; available: {sorted(self.llms)}")
        return self.llms[preset_id]

    def resolve_encoder(self, preset_id):
        if preset_id not in self.encoders:
            raise KeyError(f"unknown encoder preset {preset_id!r}; available: {sorted(self.encoders)}")
        return self.encoders[preset_id]

    def to_json(self):
        """Serialize in the preset-file schema (k and head_dim stay derived)."""
        return {
            "llms": {
                pid: {"n": g.n, "h": g.h, "heads": g.heads, "kv_heads": g.kv_heads, "m": g.m}
                for pid, g in sorted(self.llms.items())
            },
            "encoders": {pid: {"v": e.v, "d": e.d} for pid, e in sorted(self.encoders.items())},
        }


def _require_int_field(entry, key, preset_id, path):
    if key not in entry:
        raise ValueError(f"{path}: preset {preset_id!r} is missing field {key!r}")
    value = entry[key]
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValueError(f"{path}: preset {preset_id!r} field {key!r} must be an integer, got {value!r}")
    return value


def _cross_check_tflops(registry):
    """Flag any built-in pair whose formula TFLOPs misses its published value."""
    from .flops import CostQuery, flops_llava, flops_saisa

    for (llm_id, enc_id, arch), (expected_tflops, tol) in REFERENCE_TFLOPS.items():
        if llm_id not in registry.llms or enc_id not in registry.encoders:
            continue
        enc = registry.encoders[enc_id]
        query = CostQuery(llm=registry.llms[llm_id], encoder=enc, v=enc.v, t=REFERENCE_TEXT_TOKENS)
        total = (flops_llava(query) if arch == "llava" else flops_saisa(query)).total
        rel_err = abs(total / 1e12 - expected_tflops) / expected_tflops
        if rel_err > tol:
            registry.flags.append(
                f"preset pair ({llm_id}, {enc_id}) {arch}: formula gives "
                f"{total / 1e12:.2f} TFLOPs vs published {expected_tflops:.2f} "
                f"(off by {rel_err:.1%}, tolerance {tol:.1%})"
            )


def load_presets(path=None):
    """Build the registry: built-ins, optionally overlaid by a JSON file.

    `path` defaults to the SAISA_PRESETS environment variable.  File schema:
    {"llms": {id: {n, h, heads, kv_heads, m}}, "encoders": {id: {v, d}}}.
    File entries may add presets or override built-ins.
    """
    registry = PresetRegistry(
        llms=dict(BUILTIN_LLMS),
        encoders=dict(BUILTIN_ENCODERS),
        sources=dict(BUILTIN_SOURCES),
    )

    if path is None:
        path = os.environ.get(PRESETS_ENV_VAR)
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ValueError(f"cannot read preset file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: top level must be a JSON object")
        unknown = set(raw) - {"llms", "encoders"}
        if unknown:
            raise ValueError(f"{path}: unknown top-level keys {sorted(unknown)}")
        for pid, entry in (raw.get("llms") or {}).items():
            geom = ModelGeometry(
                n=_require_int_field(entry, "n", pid, path),
                h=_require_int_field(entry, "h", pid, path),
                heads=_require_int_field(entry, "heads", pid, path),
                kv_heads=_require_int_field(entry, "kv_heads", pid, path),
                m=_require_int_field(entry, "m", pid, path),
            )
            violations = validate_geometry(geom)
            if violations:
                raise ValueError(f"{path}: preset {pid!r} violates: {'; '.join(violations)}")
            registry.llms[pid] = geom
            registry.sources[("llm", pid)] = f"preset file {path}"
        for pid, entry in (raw.get("encoders") or {}).items():
            enc = EncoderGeometry(
                v=_require_int_field(entry, "v", pid, path),
                d=_require_int_field(entry, "d", pid, path),
            )
            violations = validate_encoder(enc)
            if violations:
                raise ValueError(f"{path}: preset {pid!r} violates: {'; '.join(violations)}")
            registry.encoders[pid] = enc
            registry.sources[("encoder", pid)] = f"preset file {path}"

    for pid, geom in registry.llms.items():
        violations = validate_geometry(geom)
        if violations:
            raise ValueError(f"preset {pid!r} violates: {'; '.join(violations)}")

    _cross_check_tflops(registry)
    for flag in registry.flags:
        warnings.warn(flag, stacklevel=2)
    return registry
