"""Training curves from metrics files: mean over seeds with a min-max band."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import read_metrics  # noqa: E402


def series(records: list[dict], key: str) -> tuple[np.ndarray, np.ndarray]:
    pts = [(r["env_step"], r[key]) for r in records if r.get(key) is not None]
    if not pts:
        return np.zeros(0), np.zeros(0)
    x, y = zip(*pts)
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def aggregate(runs: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Align runs on the union of their x values (linear interpolation inside each run's range)
    and return ``(x, mean, low, high)``."""
    runs = [r for r in runs if len(r[0])]
    if not runs:
        raise ValueError("no data points to aggregate")
    x = np.unique(np.concatenate([r[0] for r in runs]))
    ys = np.stack([np.interp(x, rx, ry) for rx, ry in runs])
    return x, ys.mean(0), ys.min(0), ys.max(0)


def emit_plots(metric_files: list[str | Path], out_dir: str | Path,
               keys: tuple[str, ...] = ("mean_episode_return", "wm_loss_total")) -> list[Path]:
    """One PNG per key; with several files each curve is the mean with a shaded min-max band."""
    if not metric_files:
        raise ValueError("no metrics files given")
    all_records = [read_metrics(p) for p in metric_files]
    if not any(all_records):
        raise ValueError("metrics files are empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    max_step = max(r["env_step"] for recs in all_records for r in recs)
    written = []
    for key in keys:
        runs = [series(recs, key) for recs in all_records]
        if not any(len(r[0]) for r in runs):
            continue
        x, mean, low, high = aggregate(runs)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(x, mean, lw=1.5, label=f"mean of {len([r for r in runs if len(r[0])])}")
        if len(metric_files) > 1:
            ax.fill_between(x, low, high, alpha=0.25, label="min-max")
        ax.set_xlim(0, max_step)
        ax.set_xlabel("env step")
        ax.set_ylabel(key)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{key}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    if not written:
        raise ValueError(f"none of {keys} present in the metrics")
    return written
