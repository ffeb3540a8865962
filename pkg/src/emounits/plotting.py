"""Report figures (PNG, headless backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"axes.spines.top": False, "axes.spines.right": False, "font.size": 9,
         "savefig.dpi": 120, "savefig.bbox": "tight"}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def eval_figures(report, out_dir: Path) -> list[Path]:
    """Histograms of per-pair UER and F0 MAE, and duration accuracy by tolerance."""
    rows = report.per_pair
    out = []
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        for ax, key, label in ((axes[0], "uer", "UER"), (axes[1], "f0_mae_hz", "F0 MAE (Hz)")):
            vals = np.array([r[key] for r in rows], dtype=float)
            vals = vals[~np.isnan(vals)]
            ax.hist(vals, bins=20, color="0.35")
            ax.set_xlabel(label)
            ax.set_ylabel("pairs")
        out.append(_save(fig, Path(out_dir) / "per_pair_hist.png"))

        fig, ax = plt.subplots(figsize=(4, 3))
        tol = [0, 20, 40]
        ax.plot(tol, [report.aggregate[f"acc@{t}ms"] for t in tol], "o-", color="k")
        ax.set_xticks(tol)
        ax.set_xlabel("tolerance (ms)")
        ax.set_ylabel("duration accuracy")
        ax.set_ylim(0, 1)
        out.append(_save(fig, Path(out_dir) / "duration_accuracy.png"))
    return out


def f0_grid_figure(rows, path: Path) -> Path:
    """Grouped bars of median MAE per (strategy, normalization), one bar per decode rule."""
    med = [r for r in rows if r["seed"] == "median"] or rows
    configs = list(dict.fromkeys((r["strategy"], r["normalization"]) for r in med))
    rules = list(dict.fromkeys(r["decode_rule"] for r in med))
    val = {(r["strategy"], r["normalization"], r["decode_rule"]): r["f0_mae_hz"] for r in med}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 3))
        x = np.arange(len(configs))
        w = 0.8 / len(rules)
        for i, rule in enumerate(rules):
            ax.bar(x + i * w - 0.4 + w / 2, [val[c + (rule,)] for c in configs], w, label=rule)
        ax.set_xticks(x)
        ax.set_xticklabels([f"{s}\n{n}" for s, n in configs])
        ax.set_ylabel("F0 MAE (Hz)")
        ax.legend(frameon=False)
        return _save(fig, path)


def duration_figure(rows, path: Path) -> Path:
    med = [r for r in rows if r["seed"] == "median"] or rows
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
        names = [r["model"] for r in med]
        a.bar(names, [r["mae_frames"] for r in med], color="0.35")
        a.set_ylabel("MAE (frames)")
        for r in med:
            b.plot([0, 20, 40], [r["acc@0ms"], r["acc@20ms"], r["acc@40ms"]], "o-", label=r["model"])
        b.set_xlabel("tolerance (ms)")
        b.set_ylabel("accuracy")
        b.legend(frameon=False)
        return _save(fig, path)
