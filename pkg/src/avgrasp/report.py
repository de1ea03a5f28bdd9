"""Experiment reports: delimited output plus rendered figures.

Every report directory gets report.json (full detail), report.csv (flat
summary rows), and PNG figures for whatever the report contains (success
rates, per-step latency, learning curves).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def write_report(report: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=1, default=float)
    _write_csv(report, out / "report.csv")
    if "episodes" in report:
        _success_figure(report, out / "success.png")
        _latency_figure(report, out / "latency.png")
    if "learning_curve" in report and report["learning_curve"]:
        _curve_figure({"run": report["learning_curve"]}, out / "learning_curve.png")
    return out


def _flat_items(report: dict, prefix=""):
    for key, value in report.items():
        if isinstance(value, dict):
            yield from _flat_items(value, f"{prefix}{key}.")
        elif isinstance(value, (int, float, str, bool)) or value is None:
            yield f"{prefix}{key}", value


def _write_csv(report: dict, path: Path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["key", "value"])
        for key, value in _flat_items(report):
            writer.writerow([key, value])


def _success_figure(report: dict, path: Path):
    eps = report["episodes"]
    outcomes = np.array([1 if e["success"] else 0 for e in eps])
    fig, ax = plt.subplots(figsize=(5, 3))
    window = max(1, len(outcomes) // 20)
    running = np.convolve(outcomes, np.ones(window) / window, mode="valid")
    ax.plot(np.arange(len(running)) + window, running, lw=1.5)
    ax.axhline(outcomes.mean(), color="gray", ls="--", lw=1,
               label=f"overall {outcomes.mean():.2f}")
    ax.set_xlabel("episode")
    ax.set_ylabel(f"success (window {window})")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _latency_figure(report: dict, path: Path):
    eps = report["episodes"]
    lat = [s for e in eps for s in e.get("step_seconds", [])]
    if not lat:
        return
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(np.asarray(lat) * 1000, bins=40, color="#4477aa")
    ax.set_xlabel("per-step latency (ms)")
    ax.set_ylabel("steps")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _curve_figure(curves: dict, path: Path):
    fig, ax = plt.subplots(figsize=(5, 3))
    for name, pts in curves.items():
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel("fine-tuning episodes")
    ax.set_ylabel("evaluation success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def comparison_figure(curves: dict, out_path) -> None:
    """Overlay learning curves (e.g. pretrained vs from-scratch)."""
    _curve_figure(curves, Path(out_path))
