"""Delimited output and matplotlib figures for training curves and eval reports."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402


def write_rows_csv(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


def plot_training_curve(curve: list[dict], path: str | Path, title: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [row["step"] for row in curve]
    for key in curve[0]:
        if key == "step":
            continue
        ax.plot(steps, [row[key] for row in curve], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metric_bars(report: dict, path: str | Path) -> Path:
    """Generated-metric means with CI bars; ground-truth values marked where present."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gen = report["generated"]
    names = list(gen.keys())
    means = [gen[n]["mean"] for n in names]
    cis = [gen[n]["ci"] for n in names]
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(names)), 4))
    xs = np.arange(len(names))
    ax.bar(xs, means, yerr=cis, capsize=3, color="#4878d0", label="generated")
    gt = report.get("ground_truth", {})
    gt_xs = [i for i, n in enumerate(names) if n in gt]
    if gt_xs:
        ax.scatter(gt_xs, [gt[names[i]] for i in gt_xs], color="#d65f5f", zorder=3,
                   marker="_", s=300, label="real data")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_title("generation metrics")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_similarity_heatmap(matrix: np.ndarray, path: str | Path,
                            title: str = "text-motion similarity") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xlabel("text")
    ax.set_ylabel("motion")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_rank_histogram(ranks: list[int], n: int, path: str | Path, title: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.hist(ranks, bins=np.arange(min(ranks) - 0.5, n + 1.5), color="#4878d0")
    ax.axvline(n, color="#d65f5f", linestyle="--", label=f"full rank ({n})")
    ax.set_xlabel("numerical rank")
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def report_to_rows(report: dict) -> list[dict]:
    rows = []
    for name, value in report.get("ground_truth", {}).items():
        rows.append({"metric": name, "split": "ground_truth", "mean": value, "ci": 0.0})
    for name, entry in report.get("generated", {}).items():
        rows.append({"metric": name, "split": "generated",
                     "mean": entry["mean"], "ci": entry["ci"]})
    return rows


def write_eval_report(report: dict, out_path: str | Path,
                      similarity: np.ndarray | None = None) -> dict[str, Path]:
    """Write report.json, the delimited summary, and the report figures."""
    out_path = Path(out_path)
    out_dir = out_path.parent if out_path.suffix else out_path
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_path if out_path.suffix == ".json" else out_dir / "report.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    csv_path = json_path.with_suffix(".csv")
    write_rows_csv(csv_path, report_to_rows(report))
    figures = out_dir / "figures"
    paths = {"json": json_path, "csv": csv_path,
             "metrics_png": plot_metric_bars(report, figures / "metrics.png")}
    if similarity is not None:
        paths["heatmap_png"] = plot_similarity_heatmap(similarity,
                                                       figures / "similarity_heatmap.png")
    return paths
