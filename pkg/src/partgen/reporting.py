"""Figure rendering for the report paths.

Benchmark and evaluation commands write PNG figures next to their
delimited output so a run directory is self-describing.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import BenchReport, latency_scaling


def render_bench_figures(report: BenchReport, out_dir) -> list[Path]:
    """Throughput bars plus, when a partitioned trace exists, the per-step
    latency-vs-clean-count scaling plot with its linear fit."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [f"{r.model}\n{r.sampler}\nT={r.steps}" for r in report.rows]
    values = [r.tok_per_s for r in report.rows]
    ax.bar(range(len(values)), values, color="#3a7ca5")
    ax.set_xticks(range(len(values)), labels, fontsize=8)
    ax.set_ylabel("tokens / s")
    ax.set_title("Sampling throughput")
    fig.tight_layout()
    path = out_dir / "bench_throughput.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    for key, trace in report.traces.items():
        if not trace.sampler.startswith("pgm"):
            continue
        slope, intercept, r2, points = latency_scaling(trace)
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.scatter(xs, ys, s=12, color="#3a7ca5", label="per-step latency")
        ax.plot(xs, [slope * x + intercept for x in xs], color="#d1495b",
                label=f"fit (R^2={r2:.3f})")
        ax.set_xlabel("clean tokens at step")
        ax.set_ylabel("latency (ms)")
        ax.set_title(f"{key[0]} / {key[1]}: step cost vs clean count")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"bench_scaling_{key[0]}_{key[1]}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
        break
    return written


def render_eval_figure(metrics: dict, per_sample_ppl, out_dir) -> Path:
    """Histogram of per-sample reference perplexities with summary lines."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    if per_sample_ppl is not None and len(per_sample_ppl):
        ax.hist(per_sample_ppl, bins=24, color="#3a7ca5")
        ax.set_xlabel("per-sample generative perplexity")
        ax.set_ylabel("count")
    summary = ", ".join(f"{k}={v:.4g}" for k, v in metrics.items() if isinstance(v, (int, float)))
    ax.set_title(summary[:90])
    fig.tight_layout()
    path = out_dir / "eval_report.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
