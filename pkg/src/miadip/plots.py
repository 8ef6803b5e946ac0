"""SVG figures for sweep results.

Everything renders through the Agg backend with a pinned hash salt and a
stripped Date field, so rerunning a sweep rewrites byte-identical files.
"""

import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg", force=True)
matplotlib.rcParams["svg.hashsalt"] = "miadip"

import matplotlib.pyplot as plt

ATTACK_COLUMNS = ("asr_bim", "asr_hsj", "asr_entropy")


def _mean(vals: Sequence[float]) -> float:
    return sum(vals) / len(vals)


def _group(rows, keys):
    out: Dict[tuple, List[dict]] = {}
    for r in rows:
        out.setdefault(tuple(r[k] for k in keys), []).append(r)
    return out


def _save(fig, path: str) -> str:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _panel_grid(rows):
    """Panels are (N, variant) pairs; one subplot each, shared scale."""
    n_vals = sorted({r["N"] for r in rows})
    variants = sorted({r["variant"] for r in rows})
    return n_vals, variants


def _bars_vs_mfrac(rows, value_cols, labels, ylabel, title, path):
    n_vals, variants = _panel_grid(rows)
    fig, axes = plt.subplots(
        len(n_vals), len(variants),
        figsize=(3.6 * len(variants), 2.8 * len(n_vals)),
        squeeze=False,
    )
    for i, n in enumerate(n_vals):
        for j, variant in enumerate(variants):
            ax = axes[i][j]
            sub = [r for r in rows if r["N"] == n and r["variant"] == variant]
            fracs = sorted({r["M_frac"] for r in sub})
            width = 0.8 / len(value_cols)
            for k, (col, lab) in enumerate(zip(value_cols, labels)):
                means = [
                    _mean([r[col] for r in sub if r["M_frac"] == f]) for f in fracs
                ]
                xs = [x + (k - (len(value_cols) - 1) / 2) * width
                      for x in range(len(fracs))]
                ax.bar(xs, means, width=width, label=lab)
            ax.set_xticks(range(len(fracs)))
            ax.set_xticklabels([f"{f:g}" for f in fracs])
            ax.set_ylim(0, 1.05)
            ax.set_xlabel("frozen fraction M/K")
            ax.set_ylabel(ylabel)
            ax.set_title(f"{variant}, N={n}")
            if i == 0 and j == 0:
                ax.legend(fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def _lines_vs_sigma(rows, value_cols, labels, ylabel, title, path):
    n_vals, variants = _panel_grid(rows)
    fig, axes = plt.subplots(
        len(n_vals), len(variants),
        figsize=(3.6 * len(variants), 2.8 * len(n_vals)),
        squeeze=False,
    )
    for i, n in enumerate(n_vals):
        for j, variant in enumerate(variants):
            ax = axes[i][j]
            sub = [r for r in rows if r["N"] == n and r["variant"] == variant]
            sigmas = sorted({r["sigma"] for r in sub})
            for col, lab in zip(value_cols, labels):
                means = [
                    _mean([r[col] for r in sub if r["sigma"] == s]) for s in sigmas
                ]
                ax.plot(sigmas, means, marker="o", label=lab)
            ax.set_ylim(0, 1.05)
            ax.set_xlabel("sigma (train-std units)")
            ax.set_ylabel(ylabel)
            ax.set_title(f"{variant}, N={n}")
            if i == 0 and j == 0:
                ax.legend(fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def render_report(rows: List[dict], out_dir: str) -> List[str]:
    """Write ASR/ACC figures versus frozen fraction and, when the sweep
    varied it, versus sigma. Returns the written paths."""
    if not rows:
        return []
    os.makedirs(out_dir, exist_ok=True)
    paths = [
        _bars_vs_mfrac(
            rows, ATTACK_COLUMNS, ("bim", "hsj", "entropy"),
            "ASR", "Attack success vs frozen fraction",
            os.path.join(out_dir, "asr_vs_mfrac.svg"),
        ),
        _bars_vs_mfrac(
            rows, ("acc", "train_acc"), ("eval", "train"),
            "accuracy", "Accuracy vs frozen fraction",
            os.path.join(out_dir, "acc_vs_mfrac.svg"),
        ),
    ]
    if len({r["sigma"] for r in rows}) > 1:
        paths.append(_lines_vs_sigma(
            rows, ATTACK_COLUMNS, ("bim", "hsj", "entropy"),
            "ASR", "Attack success vs smoothing noise",
            os.path.join(out_dir, "asr_vs_sigma.svg"),
        ))
        paths.append(_lines_vs_sigma(
            rows, ("acc",), ("eval",),
            "accuracy", "Accuracy vs smoothing noise",
            os.path.join(out_dir, "acc_vs_sigma.svg"),
        ))
    return paths
