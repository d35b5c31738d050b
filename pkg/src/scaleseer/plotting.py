"""Figure rendering for CLI reports (matplotlib, Agg backend).

Every function takes plain rows or arrays, writes one PNG and returns its
path. Nothing here is needed by the numerical modules.
"""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _legend(ax, **kw):
    if ax.get_legend_handles_labels()[0]:
        ax.legend(**kw)


def _group(rows, key):
    out = defaultdict(list)
    for r in rows:
        out[key(r)].append(r)
    return dict(sorted(out.items()))


def alignment_curves(summary: list, x_key: str, group_key: str, path, x_label=None, x_fn=None,
                     level: float | None = None):
    """Mean alignment (with standard error) against ``x`` for each group."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for g, pts in _group([s for s in summary if s.get("n_ok")], lambda s: s[group_key]).items():
        pts = sorted(pts, key=lambda s: x_fn(s) if x_fn else s[x_key])
        xs = [x_fn(s) if x_fn else s[x_key] for s in pts]
        ys = [s["alignment_mean"] for s in pts]
        err = [0.0 if math.isnan(s["alignment_sem"]) else s["alignment_sem"] for s in pts]
        ax.errorbar(xs, ys, yerr=err, marker="o", capsize=3, label=f"{group_key}={g}")
    if level is not None:
        ax.axhline(level, color="grey", lw=0.8, ls="--")
    ax.set_xscale("log")
    ax.set_xlabel(x_label or x_key)
    ax.set_ylabel("alignment")
    _legend(ax, fontsize=8)
    return _save(fig, path)


def count_scaling(summary: list, x_key: str, columns: tuple, path, ref_slope: float | None = None):
    """Log-log plot of mean specialized counts (or amplitudes) against width."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for col in columns:
        pts = [s for s in summary if s.get(col + "_mean") not in ("", None) and s[col + "_mean"] > 0]
        if not pts:
            continue
        pts.sort(key=lambda s: s[x_key])
        ax.plot([s[x_key] for s in pts], [s[col + "_mean"] for s in pts], "o-", label=col)
        if ref_slope is not None and len(pts) > 1:
            x0, y0 = pts[0][x_key], pts[0][col + "_mean"]
            xs = np.array([p[x_key] for p in pts], dtype=float)
            ax.plot(xs, y0 * (xs / x0) ** ref_slope, ":", color="grey")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(x_key)
    ax.set_ylabel("ensemble mean")
    _legend(ax, fontsize=8)
    return _save(fig, path)


def overlap_histograms(overlaps: dict, labels: dict, threshold: dict, path):
    """Negative log histogram of neuron overlaps, one curve per point and layer."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for key, arr in sorted(overlaps.items()):
        v = np.asarray(arr).ravel()
        if v.size < 2:
            continue
        hist, edges = np.histogram(v, bins=40, density=True)
        mid = 0.5 * (edges[1:] + edges[:-1])
        keep = hist > 0
        ax.plot(mid[keep], -np.log(hist[keep]), label=labels.get(key, str(key)))
        if key in threshold:
            ax.axvline(threshold[key], color="grey", lw=0.6, ls=":")
    ax.set_xlabel("|overlap|")
    ax.set_ylabel("-log density")
    _legend(ax, fontsize=7)
    return _save(fig, path)


def ldt_sweep(rows: list, path, slope: float | None = None):
    fig, ax = plt.subplots(figsize=(5, 4))
    d = [r["d"] for r in rows]
    ax.loglog(d, [r["p_star"] for r in rows], "o-", label="P*")
    if slope is not None:
        ax.set_title(f"fitted slope {slope:.3f}")
    ax.set_xlabel("d")
    ax.set_ylabel("P*")
    _legend(ax)
    return _save(fig, path)


def beta_profile(beta, H, path, title: str = ""):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(beta, H)
    ax.set_xlabel("beta")
    ax.set_ylabel("H(beta)")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def gfl_propagation(rows: list, path, slope: float | None = None):
    fig, ax = plt.subplots(figsize=(5, 4))
    D = [r["D"] for r in rows]
    ax.loglog(D, [r["rkhs_phi2"] for r in rows], "o-", label="RKHS norm")
    ax.loglog(D, [r["inv_expectation"] for r in rows], "s--", label="1 / expectation")
    ax.set_xlabel("D")
    ax.set_ylabel("value")
    if slope is not None:
        ax.set_title(f"RKHS slope {slope:.2f}")
    _legend(ax)
    return _save(fig, path)


def spike_propagation(rows: list, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    x = [r["N"] / r["M"] for r in rows]
    ax.loglog(x, [r["rkhs_of_sigma_phi"] for r in rows], "o", label="measured")
    ax.loglog(x, [r["predicted"] for r in rows], "-", label="N / M")
    ax.set_xlabel("N / M")
    ax.set_ylabel("RKHS norm of target")
    _legend(ax)
    return _save(fig, path)
