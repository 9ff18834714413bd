"""Static figures written next to the CSV outputs (PNG, Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_trace(trace, path):
    it = [r["iter"] for r in trace if np.isfinite(r["d_kl"])]
    dk = [r["d_kl"] for r in trace if np.isfinite(r["d_kl"])]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.semilogy(it, dk, "o-", color="C0")
    ax.set_xlabel("iteration")
    ax.set_ylabel("D_KL")
    return _save(fig, path)


def plot_stress_points(table, path):
    order = np.argsort(table["node"])
    x = np.arange(len(order))
    fig, ax = plt.subplots(figsize=(9, 3.5))
    for key, colour, shift in (("base", "k", -0.15), ("corrected", "C3", 0.15)):
        m = np.asarray(table[f"{key}_mean"])[order]
        s = np.asarray(table[f"{key}_sd"])[order]
        ax.errorbar(x + shift, m, yerr=1.96 * s, fmt=".", color=colour, ms=3, lw=0.7, label=key)
    ax.plot(x, np.asarray(table["truth"])[order], "_", color="C0", ms=8, label="truth")
    ax.set_xlabel("stress point (ordered by node)")
    ax.set_ylabel("linear predictor")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_latent_series(t, truth, mean, sd, path, marks=None):
    fig, ax = plt.subplots(figsize=(9, 3.2))
    ax.fill_between(t, mean - 1.96 * sd, mean + 1.96 * sd, color="C0", alpha=0.25, lw=0)
    ax.plot(t, mean, color="C0", lw=0.8)
    ax.plot(t, truth, color="k", lw=0.6)
    for m in marks if marks is not None else ():
        ax.axvline(m, color="C3", lw=0.4, alpha=0.6)
    ax.set_xlabel("t")
    return _save(fig, path)


def plot_observed_predicted(y, mean, path):
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(y, mean, ".", ms=2)
    lo, hi = np.nanmin([y.min(), mean.min()]), np.nanmax([y.max(), mean.max()])
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.6)
    ax.set_xlabel("observed")
    ax.set_ylabel("predicted")
    return _save(fig, path)


def plot_blocks(coords, blocks, path):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    sc = ax.scatter(coords[:, 0], coords[:, 1], c=blocks, s=5, cmap="tab20")
    fig.colorbar(sc, ax=ax, label="block")
    return _save(fig, path)
