"""Static SVG figures from metrics CSVs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .runner import RunError, read_metrics  # noqa: E402

PLOT_KINDS = ("loss_curves", "accuracy_curves", "singular_values")

_YLABEL = {
    "loss_curves": "training loss (total)",
    "accuracy_curves": "test accuracy",
    "singular_values": "classifier singular value",
}


def _series_label(path: Path, rows: list[dict], taken: set[str]) -> str:
    names = sorted({r["strategy"] for r in rows})
    label = "+".join(names)
    if label in taken:
        label = f"{label} ({path.parent.name or path.stem})"
    taken.add(label)
    return label


def _per_round(rows: list[dict], key) -> tuple[np.ndarray, list[list[float]]]:
    by_round = defaultdict(list)
    for r in rows:
        by_round[r["round"]].append(key(r))
    rounds = np.array(sorted(by_round))
    return rounds, [by_round[k] for k in rounds]


def plot_command(csv_paths, kind: str, out_dir) -> Path:
    """Overlay one series per metrics file; values are averaged over seeds per round."""
    if kind not in PLOT_KINDS:
        raise RunError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    if not csv_paths:
        raise RunError("no metrics files given")
    loaded = [(Path(p), read_metrics(p)) for p in csv_paths]

    plt.rcParams["svg.hashsalt"] = "feduv"
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    taken: set[str] = set()
    for path, rows in loaded:
        label = _series_label(path, rows, taken)
        if kind == "singular_values":
            rounds, sv_mean = _per_round(rows, lambda r: r["sv_mean"])
            _, sv_lo = _per_round(rows, lambda r: min(r["sv_values"]))
            _, sv_hi = _per_round(rows, lambda r: max(r["sv_values"]))
            mean = np.array([np.mean(v) for v in sv_mean])
            (line,) = ax.plot(rounds, mean, label=f"{label} mean")
            ax.fill_between(
                rounds,
                [np.min(v) for v in sv_lo],
                [np.max(v) for v in sv_hi],
                color=line.get_color(),
                alpha=0.2,
                label=f"{label} min/max",
            )
        else:
            key = "total" if kind == "loss_curves" else "test_accuracy"
            rounds, vals = _per_round(rows, lambda r: r[key])
            ax.plot(rounds, [np.mean(v) for v in vals], marker="o", markersize=2, label=label)
    ax.set_xlabel("aggregation round")
    ax.set_ylabel(_YLABEL[kind])
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / f"{kind}.svg"
    fig.savefig(target, format="svg", metadata={"Date": None})
    plt.close(fig)
    return target
