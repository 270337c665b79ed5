"""Binary checkpoint format with bit-exact round-tripping.

Layout: the magic ``SAISA1``, a little-endian uint32 metadata length, a
JSON metadata block (variant, stage, geometry, projector mode, seed,
precision, rng algorithm, step, and a name/shape/dtype index of every
tensor), then the raw little-endian tensor bytes in the declared order.
Optimizer moments ride along as ``opt.m.<name>`` / ``opt.v.<name>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import model
from .config import EncoderGeometry, ModelGeometry
from .kernels import RNG_ALGORITHM
from .training import AdamState

MAGIC = b"SAISA1"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float64): "<f8", np.dtype(np.float32): "<f4"}


@dataclass
class Checkpoint:
    weights: model.ModelWeights
    stage: str
    step: int
    seed: int
    precision: str
    opt_state: AdamState | None = None
    llm_preset: str | None = None
    encoder_preset: str | None = None
    task_rule: str | None = None


def _tensor_items(ckpt):
    items = list(model.named_parameters(ckpt.weights).items())
    if ckpt.opt_state is not None:
        for name in model.named_parameters(ckpt.weights):
            if name in ckpt.opt_state.m:
                items.append((f"opt.m.{name}", ckpt.opt_state.m[name]))
                items.append((f"opt.v.{name}", ckpt.opt_state.v[name]))
    return items


def save_checkpoint(ckpt, path):
    items = _tensor_items(ckpt)
    index = []
    for name, arr in items:
        if arr.dtype not in _DTYPE_TAGS:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        index.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPE_TAGS[arr.dtype]})
    g, e = ckpt.weights.geom, ckpt.weights.enc
    meta = {
        "format_version": FORMAT_VERSION,
        "variant": ckpt.weights.variant,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "precision": ckpt.precision,
        "rng_algorithm": RNG_ALGORITHM,
        "projector_mode": ckpt.weights.projector.mode,
        "pilot_freeze_visual": ckpt.weights.pilot_freeze_visual,
        "vocab_size": ckpt.weights.vocab_size,
        "geometry": {"n": g.n, "h": g.h, "heads": g.heads, "kv_heads": g.kv_heads, "m": g.m},
        "encoder_geometry": {"v": e.v, "d": e.d},
        "llm_preset": ckpt.llm_preset,
        "encoder_preset": ckpt.encoder_preset,
        "task_rule": ckpt.task_rule,
        "opt_step": ckpt.opt_state.step if ckpt.opt_state is not None else None,
        "tensors": index,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in items:
            fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated checkpoint: {what}")
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata block"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')!r}")
        tensors = {}
        for entry in meta["tensors"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise ValueError(f"truncated tensor section: {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    geom = ModelGeometry(**meta["geometry"])
    enc = EncoderGeometry(**meta["encoder_geometry"])
    n_mlps = geom.n if meta["projector_mode"] == model.PER_LAYER else 1
    weights = model.ModelWeights(
        variant=meta["variant"], geom=geom, enc=enc, vocab_size=meta["vocab_size"],
        embed=tensors["embed"], unembed=tensors["unembed"],
        layers=[
            model.DecoderLayerWeights(
                attn=model.AttentionWeights(
                    w_q=tensors[f"layers.{i}.w_q"], w_k=tensors[f"layers.{i}.w_k"],
                    w_v=tensors[f"layers.{i}.w_v"], w_o=tensors[f"layers.{i}.w_o"],
                ),
                ffn_gate=tensors[f"layers.{i}.ffn_gate"], ffn_up=tensors[f"layers.{i}.ffn_up"],
                ffn_down=tensors[f"layers.{i}.ffn_down"],
                norm_attn=tensors[f"layers.{i}.norm_attn"], norm_ffn=tensors[f"layers.{i}.norm_ffn"],
            )
            for i in range(geom.n)
        ],
        projector=model.ProjectorWeights(
            mode=meta["projector_mode"],
            mlps=[model.ProjectorMlp(tensors[f"projector.{j}.w1"], tensors[f"projector.{j}.w2"])
                  for j in range(n_mlps)],
        ),
        final_norm=tensors["final_norm"],
        pilot_freeze_visual=meta.get("pilot_freeze_visual", False),
    )
    weights.check_consistent()

    opt_state = None
    moment_names = [name[len("opt.m."):] for name in tensors if name.startswith("opt.m.")]
    if moment_names:
        opt_state = AdamState(
            step=meta["opt_step"] or 0,
            m={name: tensors[f"opt.m.{name}"] for name in moment_names},
            v={name: tensors[f"opt.v.{name}"] for name in moment_names},
        )
    return Checkpoint(
        weights=weights, stage=meta["stage"], step=meta["step"], seed=meta["seed"],
        precision=meta["precision"], opt_state=opt_state,
        llm_preset=meta.get("llm_preset"), encoder_preset=meta.get("encoder_preset"),
        task_rule=meta.get("task_rule"),
    )
