"""Matplotlib figures for the report (Agg backend, fixed metadata for stable bytes)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def pareto_figure(rows: list[dict], path: Path) -> Path | None:
    if not rows:
        return None
    models = sorted({r["model_id"] for r in rows})
    fams = sorted({r["family"] for r in rows})
    markers = dict(zip(fams, "osD^v<>"))
    fig, axes = plt.subplots(1, len(models), figsize=(4.2 * len(models), 3.8), squeeze=False)
    for ax, mid in zip(axes[0], models):
        for fam in fams:
            sel = [r for r in rows if r["model_id"] == mid and r["family"] == fam]
            if not sel:
                continue
            h = [float(r["evaluation_hallucination_rate"]) for r in sel]
            a = [float(r["evaluation_accuracy"]) for r in sel]
            ax.scatter(h, a, marker=markers[fam], label=fam, alpha=0.7)
            for r in sel:
                if r["selected"]:
                    ax.scatter([float(r["evaluation_hallucination_rate"])], [float(r["evaluation_accuracy"])],
                               s=120, facecolors="none", edgecolors="k")
        ax.set_title(mid)
        ax.set_xlabel("hallucination rate")
        ax.set_ylabel("accuracy")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def lens_figure(rows: list[dict], path: Path) -> Path | None:
    if not rows:
        return None
    models = sorted({r["model_id"] for r in rows})
    fig, axes = plt.subplots(1, len(models), figsize=(4.2 * len(models), 3.4), squeeze=False)
    for ax, mid in zip(axes[0], models):
        for r in rows:
            if r["model_id"] != mid:
                continue
            y = np.array(r["mean_per_layer_delta"], dtype=float)
            ax.plot(np.arange(len(y)), y, marker="o", label=f"{r['subset']} (n={r['n']})")
        ax.axhline(0.0, color="0.6", lw=0.8)
        ax.set_title(mid)
        ax.set_xlabel("layer")
        ax.set_ylabel("mean per-layer change in logit difference")
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def depth_profile_figure(ws, path: Path) -> Path | None:
    from .circuits import depth_normalize

    ids = ws.config.model_ids()
    fig, ax = plt.subplots(figsize=(6, 3.4))
    grid = None
    for mid in ids:
        prof = depth_normalize(ws.load_circuit(mid))
        grid = np.linspace(0.0, 1.0, len(prof.profile))
        ax.plot(grid, prof.profile, marker=".", label=mid)
    if grid is None:
        plt.close(fig)
        return None
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.set_xlabel("relative depth")
    ax.set_ylabel("Cohen's d (members)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def render_figures(ws, tables: dict, out_dir: Path) -> list[Path]:
    figs = [
        pareto_figure(tables["pareto"], out_dir / "pareto.png"),
        lens_figure(tables["lens_layers"], out_dir / "lens_layers.png"),
        depth_profile_figure(ws, out_dir / "depth_profiles.png"),
    ]
    return [f for f in figs if f is not None]
