"""Figures for the report path. Everything renders headless to files."""

from __future__ import annotations

import functools
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .chanstats import bsc_rates  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _styled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with plt.rc_context(STYLE):
            return fn(*args, **kwargs)
    return wrapper


def _figure(width=6.0, ratio=0.6):
    return plt.subplots(figsize=(width, width * ratio))


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


@_styled
def plot_accuracy(rows, path, fpr=None):
    """Grouped bars of mean bit accuracy per distortion, one colour per method."""
    if fpr is None and rows:
        fpr = rows[0]["fpr"]
    rows = [r for r in rows if r["fpr"] == fpr]
    methods = list(dict.fromkeys(r["method"] for r in rows))
    dists = list(dict.fromkeys(r["distortion"] for r in rows))
    fig, ax = _figure(7.0, 0.45)
    width = 0.8 / max(1, len(methods))
    x = np.arange(len(dists))
    for j, m in enumerate(methods):
        acc = {r["distortion"]: r["acc"] for r in rows if r["method"] == m}
        ax.bar(x + j * width, [acc.get(d, np.nan) for d in dists], width, label=m)
    ax.set_xticks(x + width * (len(methods) - 1) / 2)
    ax.set_xticklabels(dists, rotation=30, ha="right")
    ax.set_ylim(0.4, 1.0)
    ax.axhline(0.5, color="0.5", lw=0.6, ls=":")
    ax.set_ylabel("bit accuracy")
    ax.legend(frameon=False, ncol=max(1, len(methods)))
    return _save(fig, path)


@_styled
def plot_step_curves(curves: dict, path):
    """Bit accuracy after each inversion step; step 0 is the encoder output."""
    fig, ax = _figure()
    for (method, dist), curve in curves.items():
        ax.plot(np.arange(len(curve)), curve, label=f"{method} / {dist}", lw=1.2)
    ax.set_xlabel("inversion step")
    ax.set_ylabel("bit accuracy")
    if len(curves) <= 12:
        ax.legend(frameon=False, fontsize=6, ncol=2)
    return _save(fig, path)


@_styled
def plot_user_count(points, shape, path):
    """log2 of the number of distinguishable users versus bit accuracy.

    ``points`` maps a label to an accuracy; the curve is the capacity bound
    for the given latent shape.
    """
    fig, ax = _figure()
    acc = np.linspace(0.5, 1.0, 201)
    ax.plot(acc, [bsc_rates(a, shape).log2_users for a in acc], color="0.3", lw=1.0,
            label=f"f_hw={shape.f_hw}")
    for label, a in points.items():
        users = bsc_rates(a, shape).log2_users
        ax.scatter([a], [users], zorder=3)
        ax.annotate(f"{label}: 2^{users:.0f}", (a, users), textcoords="offset points", xytext=(4, 4))
    ax.set_xlabel("bit accuracy")
    ax.set_ylabel("log2(users)")
    return _save(fig, path)


@_styled
def plot_loss_history(history, path):
    fig, ax = _figure()
    epochs = [h.epoch for h in history]
    for name in ("bce", "mse", "total"):
        ax.plot(epochs, [getattr(h, name) for h in history], marker="o", ms=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, path)


def render_report(out_dir, rows, curves, shape) -> list[Path]:
    out = Path(out_dir)
    paths = []
    if rows:
        paths.append(plot_accuracy(rows, out / "accuracy.png"))
        adv = {r["method"]: r["acc"] for r in rows if r["distortion"] == "Adv."}
        if adv:
            paths.append(plot_user_count(adv, shape, out / "user_count.png"))
    if curves:
        paths.append(plot_step_curves(curves, out / "step_accuracy.png"))
    return paths
