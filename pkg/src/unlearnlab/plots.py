"""SVG figures for experiment, ablation and SNR outputs (matplotlib, Agg backend)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "unlearnlab"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps reruns byte-identical
_SVG_META = {"Date": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_summary(table, path) -> Path:
    """Forget and retain exact match per variant (mean and std over seeds)."""
    summ = table.summary()
    names = [s["variant"] for s in summ]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5, 0.6 * len(names) + 2), 3.5))
    for off, key, label in ((-0.2, "forget_em", "forget EM (lower is better)"), (0.2, "retain_em", "retain EM (higher is better)")):
        mean = [s[f"{key}_mean"] if s[f"{key}_mean"] is not None else np.nan for s in summ]
        std = [s[f"{key}_std"] if s[f"{key}_std"] is not None else 0.0 for s in summ]
        ax.bar(x + off, mean, 0.4, yerr=std, label=label, capsize=2)
    ax.set_xticks(x, names, rotation=45, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("exact match")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_tradeoff(runs_dir, path) -> Path:
    """Retain vs forget exact match along each run's trajectory."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for f in sorted(Path(runs_dir).glob("*.jsonl")):
        recs = [json.loads(line) for line in f.read_text().splitlines() if line.strip()]
        if not recs:
            continue
        ax.plot([r["forget_em"] for r in recs], [r["retain_em"] for r in recs], marker=".", lw=0.8, label=f.stem)
    ax.set_xlabel("forget EM")
    ax.set_ylabel("retain EM")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    if ax.lines and len(ax.lines) <= 16:
        ax.legend(fontsize=6)
    return _save(fig, path)


def plot_ablation(rows, axis: str, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = (lambda v: 1.0 - v) if axis == "alpha" else (lambda v: v)
    for variant in sorted({r["variant"] for r in rows}):
        pts = sorted((xs(r["value"]), r["forget_em_mean"], r["retain_em_mean"]) for r in rows if r["variant"] == variant)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{variant} forget")
        ax.plot([p[0] for p in pts], [p[2] for p in pts], marker="s", ls="--", label=f"{variant} retain")
    ax.set_xlabel("selection ratio r" if axis == "r" else "entropy share 1 - alpha")
    ax.set_ylabel("exact match")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_snr(rows, path) -> Path:
    """Measured vs predicted SNR ratio against T/|K| on log-log axes."""
    pts = [r for r in rows if r["kind"] == "slope"]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    if pts:
        x = [r["T"] / r["n_critical"] for r in pts]
        ax.loglog(x, [r["ratio"] for r in pts], "o", label="Monte Carlo")
        ax.loglog(x, [r["predicted"] for r in pts], "-", label="closed form")
        ax.legend(fontsize=8)
    ax.set_xlabel("T / |K|")
    ax.set_ylabel("SNR token / SNR sequence")
    return _save(fig, path)
