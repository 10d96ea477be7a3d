"""Matplotlib renderings written next to the delimited outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def residual_figure(traces, path, title="alternating-solver residual"):
    """Semilog residual trace per restart."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for i, trace in enumerate(traces):
        ax.semilogy(np.arange(len(trace)), np.maximum(trace, 1e-300), label=f"restart {i}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.set_title(title)
    if len(traces) > 1:
        ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fsc_figure(radii, values, path, title="coefficient-space shell correlation"):
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(radii, values, marker="o", ms=3)
    ax.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("radius")
    ax.set_ylabel("correlation")
    ax.set_ylim(-0.1, 1.05)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def spectra_figure(reports, path, title="identifiability singular spectra"):
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for rep in reports:
        s = np.asarray(rep.singular_values)
        ax.semilogy(
            np.arange(1, len(s) + 1),
            np.maximum(s / s[0], 1e-300),
            marker=".",
            label=f"{rep.lemma} L={rep.bandlimit} (rank {rep.rank})",
        )
    ax.set_xlabel("index")
    ax.set_ylabel("singular value / largest")
    ax.set_title(title)
    ax.legend(fontsize=7)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
