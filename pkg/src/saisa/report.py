"""CSV and figure emission for the CLI report paths.

Delimited outputs are deterministic byte-for-byte given the same inputs;
figures are rendered with matplotlib's Agg backend so everything works
headless.  The sweep chart is a plain line plot of the cost ratio against
the visual token count, one line per text token count.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def format_loss(value):
    """Full-precision float formatting so rerun logs compare bitwise."""
    return f"{value:.17g}"


def write_sweep_csv(rows, path):
    """Columns v,t,llava_flops,saisa_flops,ratio (integer FLOPs, 6-dp ratio)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["v", "t", "llava_flops", "saisa_flops", "ratio"])
        for v, t, llava_total, saisa_total, ratio in rows:
            writer.writerow([v, t, llava_total, saisa_total, f"{ratio:.6f}"])


def plot_sweep(rows, path):
    """Ratio-vs-v line chart, one series per t, written to `path`.

    The suffix picks the format (.svg by default from the CLI; anything
    matplotlib supports works).
    """
    by_t: dict[int, list] = {}
    for v, t, _, _, ratio in rows:
        by_t.setdefault(t, []).append((v, ratio))
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for t in sorted(by_t):
        points = sorted(by_t[t])
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", markersize=3, label=f"t={t}")
    ax.set_xlabel("visual tokens (v)")
    ax.set_ylabel("SAISA / LLaVA FLOPs ratio")
    ax.set_title("Inference cost ratio vs visual token count")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def write_train_log(history, path):
    """One row per training step: step,stage,loss,lr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "stage", "loss", "lr"])
        for step, stage, loss, lr in history:
            writer.writerow([step, stage, format_loss(loss), f"{lr:g}"])


def plot_train_log(history, path):
    """Loss curve with a pretrain/finetune stage boundary marker."""
    steps = [row[0] for row in history]
    losses = [row[2] for row in history]
    stages = [row[1] for row in history]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(steps, losses, lw=1.0)
    boundaries = [steps[i] for i in range(1, len(stages)) if stages[i] != stages[i - 1]]
    for b in boundaries:
        ax.axvline(b, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def write_bench_csv(rows, path):
    """One row per text-token count: t,llava_ms,saisa_ms,ratio."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "llava_ms", "saisa_ms", "ratio"])
        for t, llava_ms, saisa_ms in rows:
            writer.writerow([t, f"{llava_ms:.3f}", f"{saisa_ms:.3f}", f"{saisa_ms / llava_ms:.3f}"])
