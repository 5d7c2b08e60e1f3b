"""Plot cached learning curves (running success over attempts, mean and 95% CI).

    python scripts/plot_curves.py results/grasp curves_grasp.png
"""

import json
import sys
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from afflab.pipeline import mean_ci95  # noqa: E402


def running(success, window=50):
    s = np.asarray(success, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(s)])
    i = np.arange(1, len(s) + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)


def main(src, dst):
    groups = {}
    for f in sorted(Path(src).glob("*.json")):
        r = json.loads(f.read_text())
        groups.setdefault(f"{r['vision_task']} / {r['strategy']}", []).append(running(r["success"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curves in groups.items():
        a = np.stack(curves)
        stats = np.array([mean_ci95(col) for col in a.T])
        x = np.arange(1, a.shape[1] + 1)
        ax.plot(x, stats[:, 0], label=f"{name} (n={len(curves)})")
        ax.fill_between(x, stats[:, 1], stats[:, 2], alpha=0.2)
    ax.set_xlabel("attempt")
    ax.set_ylabel("success rate (trailing 50)")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(dst, dpi=120)


if __name__ == "__main__":
    main(*sys.argv[1:3])
