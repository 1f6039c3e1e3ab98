"""Figure rendering for CLI reports: every report path gets PNGs next to the
JSON Lines output (loss/step-time curves, per-shape throughput, scaling)."""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def setup_style() -> None:
    plt.rcdefaults()
    plt.rc("figure", figsize=(6.0, 3.6), dpi=110)
    plt.rc("axes", grid=True)
    plt.rc("grid", alpha=0.3)
    plt.rc("lines", linewidth=1.6)


def read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _fig_path(report_path: str, suffix: str) -> str:
    base, _ = os.path.splitext(report_path)
    return f"{base}.{suffix}.png"


def render_train_figures(report_path: str) -> list[str]:
    rows = [r for r in read_jsonl(report_path) if r.get("type") == "step"]
    if not rows:
        return []
    setup_style()
    out = []
    steps = [r["step"] for r in rows]

    fig, ax = plt.subplots()
    ax.plot(steps, [r["loss"] for r in rows], color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    path = _fig_path(report_path, "loss")
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    out.append(path)

    fig, ax = plt.subplots()
    ax.plot(steps, [r["wall_s"] for r in rows], color="tab:orange")
    ax.set_xlabel("step")
    ax.set_ylabel("seconds")
    ax.set_title("iteration time")
    path = _fig_path(report_path, "step_time")
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    out.append(path)
    return out


def render_bench_figures(report_path: str) -> list[str]:
    rows = [r for r in read_jsonl(report_path) if r.get("type") == "gemm"]
    if not rows:
        return []
    setup_style()
    labels = [f'{r["shape"][0]}x{r["shape"][1]}x{r["shape"][2]}' for r in rows]
    fig, ax = plt.subplots()
    ax.bar(range(len(rows)), [r["gflops"] for r in rows], color="tab:green")
    ax.set_xticks(range(len(rows)), labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("GFLOP/s")
    ax.set_title("blocked GEMM throughput")
    path = _fig_path(report_path, "gflops")
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return [path]


def render_scaling_figures(report_path: str) -> list[str]:
    rows = [r for r in read_jsonl(report_path) if r.get("type") == "scaling"]
    if not rows:
        return []
    setup_style()
    ranks = [r["ranks"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.4, 3.4))
    ax1.plot(ranks, [r["avg_step_s"] for r in rows], marker="o")
    ax1.set_xlabel("ranks")
    ax1.set_ylabel("avg step (s)")
    ax1.set_title("iteration time")
    ax2.plot(ranks, [r["efficiency"] for r in rows], marker="o", color="tab:red")
    ax2.set_xlabel("ranks")
    ax2.set_ylabel("parallel efficiency")
    ax2.set_ylim(0, 1.1)
    ax2.set_title("efficiency")
    path = _fig_path(report_path, "scaling")
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return [path]
