"""Figure rendering for the report paths: every CSV or field artifact a
command writes gets a PNG rendered next to it."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return Path(path)


def render_field(path, values, dx, title="", cmap="RdBu_r", symmetric=True):
    """Heatmap of a 2D field (or a mid-slice of a 3D one)."""
    values = np.asarray(values)
    if values.ndim == 1:
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(np.arange(values.size) * dx, values)
        ax.set_xlabel("x [m]")
        ax.set_title(title)
        return _save(fig, path)
    if values.ndim == 3:
        values = values[:, :, values.shape[2] // 2]
        title = f"{title} (mid slice)"
    vmax = np.max(np.abs(values)) or 1.0
    kw = dict(vmin=-vmax, vmax=vmax) if symmetric else {}
    fig, ax = plt.subplots(figsize=(5.5, 5.5 * values.shape[1] / values.shape[0]))
    im = ax.imshow(values.T, origin="lower", cmap=cmap,
                   extent=(0, (values.shape[0] - 1) * dx,
                           0, (values.shape[1] - 1) * dx), **kw)
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_xlabel("x1 [m]")
    ax.set_ylabel("x2 [m]")
    ax.set_title(title)
    return _save(fig, path)


def render_traces(path, traces, dt, title="sensor traces"):
    fig, ax = plt.subplots(figsize=(7, 4))
    t = np.arange(traces.shape[1]) * dt
    show = traces[:: max(1, traces.shape[0] // 12)]
    for row in show:
        ax.plot(t, row, lw=0.7)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("u")
    ax.set_title(title)
    return _save(fig, path)


def render_ksweep(path, rows, threshold=0.05, title="superposed gradient error vs k"):
    """Log-log error magnitude curves for both precisions with the threshold."""
    rows = sorted(rows)
    ks = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for idx, (label, color) in enumerate((("single", "k"), ("double", "tab:blue"))):
        err = [np.sqrt(r[idx + 1]) if np.isfinite(r[idx + 1]) else np.nan for r in rows]
        ax.loglog(ks, err, "o-", ms=3.5, lw=1.0, color=color, label=label)
    ax.axhline(np.sqrt(threshold), ls="--", color="gray",
               label=f"{threshold:.0%} rel. MSE")
    ax.set_xlabel("k")
    ax.set_ylabel("relative error magnitude")
    ax.legend()
    ax.set_title(title)
    return _save(fig, path)


def render_calibration(path, rows, rel_tol, chosen_k):
    rows = sorted(rows)
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    ks = [r[0] for r in rows]
    diffs = [r[1] if np.isfinite(r[1]) else np.nan for r in rows]
    ax.loglog(ks, diffs, "o-", color="k", label="single vs double")
    ax.axhline(rel_tol, ls="--", color="gray", label="tolerance")
    ax.axvline(chosen_k, ls=":", color="tab:red", label=f"chosen k = {chosen_k:g}")
    ax.set_xlabel("k")
    ax.set_ylabel("relative MSE between precisions")
    ax.legend()
    ax.set_title("precision-divergence calibration")
    return _save(fig, path)


def render_cost_log(path, log, title="optimization progress"):
    fig, ax = plt.subplots(figsize=(6.5, 4))
    its = [r["iteration"] for r in log]
    costs = [abs(r["cost"]) for r in log]
    ax.semilogy(its, costs, "o-", ms=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("|cost|")
    ax.set_title(title)
    return _save(fig, path)


def render_bench(path, rows, title="wall time per step"):
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    dofs = [r["dofs"] for r in rows]
    ax.loglog(dofs, [r["forward_time_per_step"] for r in rows], "o-", label="forward")
    ax.loglog(dofs, [r["gradient_time_per_step"] for r in rows], "s-", label="gradient")
    ax.set_xlabel("degrees of freedom")
    ax.set_ylabel("seconds per step")
    ax.legend()
    ax.set_title(title)
    return _save(fig, path)
