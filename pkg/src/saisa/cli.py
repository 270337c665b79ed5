"""Command-line interface: cost analysis, sweeps, verification, training, bench.

Exit codes are a stable contract: 0 success, 1 verification failure,
2 usage/config error, 3 IO error.  All outputs are deterministic given
flags + seed, except the wall-clock numbers from `bench`.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import checkpoint as ckpt_io
from . import config, flops, model, report, training, verify

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3

BENCH_FLOP_GUARD = 2 * 10**10
BENCH_WARMUPS = 2
BENCH_REPS = 9

VARIANT_NAMES = {
    "saisa": model.SAISA,
    "baseline": model.BASELINE_EMBED,
    "pilot": model.PILOT_NAAVIT,
}


def parse_grid(spec):
    """Grid spec: comma list ('64,128,256') or inclusive range 'a:b:step'."""
    spec = spec.strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError(f"range grid must be a:b:step, got {spec!r}")
        start, stop, step = (int(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError(f"bad grid range {spec!r}")
        return list(range(start, stop + 1, step))
    values = [int(p) for p in spec.split(",") if p.strip()]
    if not values:
        raise ValueError(f"empty grid {spec!r}")
    return values


def _tflops(value):
    return f"{value / 1e12:.2f}"


def _load_registry(args):
    return config.load_presets(getattr(args, "presets", None))


# ---------------------------------------------------------------------------
# flops
# ---------------------------------------------------------------------------

def cmd_flops(args):
    registry = _load_registry(args)
    llm = registry.resolve_llm(args.llm)
    encoder = registry.resolve_encoder(args.encoder)
    v = encoder.v if args.v is None else args.v
    query = flops.CostQuery(llm=llm, encoder=encoder, v=v, t=args.t)

    breakdowns = []
    if args.arch in ("both", "llava"):
        breakdowns.append(flops.flops_llava(query))
    if args.arch in ("both", "saisa"):
        breakdowns.append(flops.flops_saisa(query))
    ratio = flops.flops_ratio(query) if args.arch == "both" else None

    if args.format == "json":
        doc = {
            "schema_version": SCHEMA_VERSION,
            "query": {"llm": args.llm, "encoder": args.encoder, "v": v, "t": args.t},
            "breakdowns": [b.as_dict() for b in breakdowns],
        }
        if ratio is not None:
            doc["ratio"] = ratio
        print(json.dumps(doc, indent=2))
    elif args.format == "csv":
        print("architecture,qkvo_proj,attention_scores,ffn,projector,total,ratio")
        for b in breakdowns:
            r = f"{ratio:.6f}" if (ratio is not None and b.architecture == flops.SAISA_ARCH) else ""
            print(f"{b.architecture},{b.qkvo_proj},{b.attention_scores},{b.ffn},{b.projector},{b.total},{r}")
    else:
        print(f"query: llm={args.llm} encoder={args.encoder} v={v} t={args.t}")
        header = f"{'architecture':<14}{'TFLOPs':>8}{'qkvo':>8}{'attn':>8}{'ffn':>8}{'proj':>8}"
        print(header)
        for b in breakdowns:
            print(f"{b.architecture:<14}{_tflops(b.total):>8}{_tflops(b.qkvo_proj):>8}"
                  f"{_tflops(b.attention_scores):>8}{_tflops(b.ffn):>8}{_tflops(b.projector):>8}")
        if ratio is not None:
            print(f"ratio (saisa/llava): {ratio:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def cmd_sweep(args):
    registry = _load_registry(args)
    llm = registry.resolve_llm(args.llm)
    encoder = registry.resolve_encoder(args.encoder)
    v_grid = parse_grid(args.v_grid)
    t_grid = parse_grid(args.t_grid)
    rows = flops.sweep(llm, encoder, v_grid, t_grid)
    try:
        report.write_sweep_csv(rows, args.out)
        if args.svg is not None:
            svg_path = args.svg if args.svg else str(args.out) + ".svg"
            report.plot_sweep(rows, svg_path)
            print(f"figure: {svg_path}")
    except OSError as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args):
    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    results = verify.run_suites(names)
    failed = [(suite, check) for suite, check in results if not check.passed]
    for suite, check in results:
        status = "PASS" if check.passed else "FAIL"
        detail = f"  [{check.detail}]" if check.detail else ""
        print(f"[{status}] {suite}: {check.name}{detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        for suite, check in failed:
            print(f"FAILED property: {suite}: {check.name}", file=sys.stderr)
        return EXIT_VERIFY_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args):
    registry = _load_registry(args)
    llm = registry.resolve_llm(args.llm)
    encoder = registry.resolve_encoder(args.encoder)
    variant = VARIANT_NAMES[args.variant]
    dtype = np.dtype(args.precision)
    init_std = 1.0 / np.sqrt(llm.h) if args.init_std == "auto" else float(args.init_std)

    task = training.SyntheticTask(
        seed=args.seed, vocab_size=args.vocab, v=encoder.v, t=args.t, d=encoder.d, rule=args.task)

    stages = [args.stage] if args.stage != "both" else [training.PRETRAIN, training.FINETUNE]

    if args.resume:
        loaded = ckpt_io.load_checkpoint(args.resume)
        if loaded.stage == training.FINETUNE and training.PRETRAIN in stages:
            print(f"stage regression: checkpoint {args.resume} is already fine-tuned, "
                  f"cannot resume into pretrain", file=sys.stderr)
            return EXIT_USAGE
        if loaded.weights.variant != variant:
            print(f"checkpoint variant {loaded.weights.variant!r} does not match requested "
                  f"{variant!r}", file=sys.stderr)
            return EXIT_USAGE
        weights = loaded.weights
        start_step = loaded.step
    else:
        projector_mode = model.SHARED if stages[0] == training.PRETRAIN or variant != model.SAISA \
            else model.PER_LAYER
        weights = model.init_model(variant, llm, encoder, args.vocab, seed=args.seed,
                                   dtype=dtype, projector_mode=projector_mode,
                                   pilot_freeze_visual=args.freeze_visual_rows,
                                   init_std=init_std)
        start_step = 0

    history = []
    opt_state = None
    for stage in stages:
        cfg = training.TrainConfig(stage=stage, steps=args.steps, batch_size=args.batch_size,
                                   lr=args.lr, seed=args.seed, precision=args.precision)
        run = training.pretrain if stage == training.PRETRAIN else training.finetune
        weights, stage_history, opt_state = run(weights, task, cfg, start_step=start_step)
        history.extend(stage_history)
        start_step += cfg.steps
        if stage_history:
            print(f"{stage}: steps {stage_history[0][0]}..{stage_history[-1][0]}, "
                  f"loss {stage_history[0][2]:.4f} -> {stage_history[-1][2]:.4f}")
        else:
            print(f"{stage}: 0 steps")

    final = ckpt_io.Checkpoint(
        weights=weights, stage=stages[-1], step=start_step, seed=args.seed,
        precision=args.precision, opt_state=opt_state,
        llm_preset=args.llm, encoder_preset=args.encoder, task_rule=args.task)
    try:
        ckpt_io.save_checkpoint(final, args.ckpt)
        log_path = args.log or str(args.ckpt) + ".loss.csv"
        report.write_train_log(history, log_path)
        if args.plot:
            report.plot_train_log(history, args.plot)
    except OSError as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"checkpoint: {args.ckpt}")
    print(f"loss log:   {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _median_forward_ms(weights, batch):
    times = []
    for rep in range(BENCH_WARMUPS + BENCH_REPS):
        t0 = time.perf_counter()
        model.forward(weights, batch)
        elapsed = (time.perf_counter() - t0) * 1e3
        if rep >= BENCH_WARMUPS:
            times.append(elapsed)
    times.sort()
    return times[len(times) // 2]


def cmd_bench(args):
    registry = _load_registry(args)
    llm = registry.resolve_llm(args.llm)
    encoder = registry.resolve_encoder(args.encoder)
    t_grid = parse_grid(args.t_grid)
    guard_query = flops.CostQuery(llm=llm, encoder=encoder, v=args.v, t=max(t_grid))
    predicted = flops.flops_llava(guard_query).total
    if predicted > BENCH_FLOP_GUARD:
        print(f"bench guard: {predicted:.2e} FLOPs per forward exceeds {BENCH_FLOP_GUARD:.0e}; "
              f"use a smaller geometry", file=sys.stderr)
        return EXIT_USAGE

    from .kernels import make_rng

    vocab = 32
    enc = config.EncoderGeometry(v=args.v, d=encoder.d)
    baseline = model.init_model(model.BASELINE_EMBED, llm, enc, vocab, seed=args.seed)
    saisa = model.init_model(model.SAISA, llm, enc, vocab, seed=args.seed)
    rng = make_rng(args.seed, 1)
    Z = rng.uniform(-1, 1, (args.v, encoder.d))
    rows = []
    for t in sorted(t_grid):
        batch = model.make_token_batch(Z, rng.integers(0, vocab, t))
        llava_ms = _median_forward_ms(baseline, batch)
        saisa_ms = _median_forward_ms(saisa, batch)
        rows.append((t, llava_ms, saisa_ms))
        print(f"t={t}: llava {llava_ms:.2f} ms, saisa {saisa_ms:.2f} ms, "
              f"measured ratio {saisa_ms / llava_ms:.3f}")
    try:
        report.write_bench_csv(rows, args.out)
    except OSError as exc:
        print(f"IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="saisa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_presets(p):
        p.add_argument("--presets", default=None,
                       help=f"preset JSON file (default: ${config.PRESETS_ENV_VAR} if set)")

    p = sub.add_parser("flops", help="closed-form cost breakdown for one query")
    p.add_argument("--llm", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--v", type=int, default=None, help="visual tokens (default: encoder preset)")
    p.add_argument("--t", type=int, default=64, help="text tokens (default 64)")
    p.add_argument("--arch", choices=["both", "llava", "saisa"], default="both")
    p.add_argument("--format", choices=["text", "json", "csv"], default="text")
    add_presets(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep", help="evaluate both formulas over a (v, t) grid")
    p.add_argument("--llm", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--v-grid", required=True, help="comma list or a:b:step")
    p.add_argument("--t-grid", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--svg", nargs="?", const="", default=None,
                   help="also render the ratio chart (optional path; default <out>.svg)")
    add_presets(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument("--suite", choices=[*verify.SUITES, "all"], default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="two-stage toy training on a synthetic task")
    p.add_argument("--variant", choices=sorted(VARIANT_NAMES), default="saisa")
    p.add_argument("--task", choices=list(training.RULES), default=training.RULE_FEATURE_ARGMAX)
    p.add_argument("--stage", choices=[training.PRETRAIN, training.FINETUNE, "both"], default="both")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--ckpt", default="saisa.ckpt")
    p.add_argument("--log", default=None, help="loss CSV path (default <ckpt>.loss.csv)")
    p.add_argument("--plot", default=None, help="optional loss-curve figure path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--llm", default="toy")
    p.add_argument("--encoder", default="toy")
    p.add_argument("--t", type=int, default=6)
    p.add_argument("--vocab", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--precision", choices=["float32", "float64"], default="float32")
    p.add_argument("--init-std", default="auto",
                   help="weight init std; 'auto' = 1/sqrt(h), the toy-width analog of 0.02")
    p.add_argument("--freeze-visual-rows", action="store_true",
                   help="pilot variant: skip the FFN on visual rows too")
    add_presets(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="wall-clock forward-pass comparison (relative only)")
    p.add_argument("--llm", default="bench-256")
    p.add_argument("--encoder", default="toy")
    p.add_argument("--v", type=int, default=512)
    p.add_argument("--t-grid", default="64,128,256")
    p.add_argument("--out", default="saisa-bench.csv")
    p.add_argument("--seed", type=int, default=0)
    add_presets(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
