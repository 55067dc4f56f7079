"""Figure rendering for the CLI report path.

Every CSV the CLI emits gets a PNG next to it (under figures/). The CSVs
remain the deterministic contract; figures are a convenience rendering of
the same rows.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def loss_curve(steps, losses, path, title="training loss", seg_curves=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.0, label="loss")
    if seg_curves:
        for name, ys in seg_curves.items():
            ax.plot(steps, ys, lw=0.8, alpha=0.7, label=name)
        ax.legend(fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    return _save(fig, path)


def scatter_samples(points, path, title="samples", reference=None):
    fig, ax = plt.subplots(figsize=(5, 5))
    if reference is not None:
        ax.scatter(reference[:, 0], reference[:, 1], s=4, alpha=0.3, label="data", color="grey")
    ax.scatter(points[:, 0], points[:, 1], s=4, alpha=0.6, label="samples")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)


def gte_curve_plot(series, path, title="endpoint GTE vs NFE"):
    """series: list of (label, nfe array, gte array)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, nfe, gte in series:
        ax.plot(nfe, gte, "o-", label=label)
    ax.set_xlabel("NFE")
    ax.set_ylabel("mean endpoint GTE")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)


def straightness_curve(bin_times, bin_values, path, title="straightness over t", boundaries=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(bin_times, bin_values, lw=1.0)
    if boundaries is not None:
        for b in boundaries[1:-1]:
            ax.axvline(b, color="grey", lw=0.6, ls="--")
    ax.set_xlabel("t (0 = noise, 1 = data)")
    ax.set_ylabel("mean squared chord deviation")
    ax.set_title(title)
    return _save(fig, path)


def lipschitz_plot(t_grid, m_hat, mean_sq_norm, path, title="field statistics over t"):
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].plot(t_grid, m_hat, "o-")
    axes[0].set_xlabel("t")
    axes[0].set_ylabel("Lipschitz estimate")
    axes[1].plot(t_grid, mean_sq_norm, "o-")
    axes[1].set_xlabel("t")
    axes[1].set_ylabel("mean squared field norm")
    fig.suptitle(title)
    return _save(fig, path)


def order_plot(series, path, title="convergence order"):
    """series: list of (label, h array, gte array, fitted slope)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, hs, gtes, slope in series:
        ax.plot(hs, gtes, "o-", label=f"{label} (p={slope:.2f})")
    ax.set_xlabel("h")
    ax.set_ylabel("endpoint GTE")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)


def trajectory_plot(times, states, path, title="solver trajectory"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for d in range(states.shape[2]):
        ax.plot(times, states[:, 0, d], lw=1.0, label=f"x[{d}]")
    ax.set_xlabel("t")
    ax.set_ylabel("state")
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)


def variance_bars(labels, joint_vals, indep_vals, path, title="target variance by coupling"):
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(labels))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], joint_vals, width, label="joint (seqrf pairs)")
    ax.bar([x + width / 2 for x in xs], indep_vals, width, label="independent")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_ylabel("aggregate target variance")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)
