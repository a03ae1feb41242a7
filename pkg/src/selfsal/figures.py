"""Figure rendering for run reports.

Every delimited report the CLI writes gets a matplotlib companion:
loss curves next to the training CSV, the PR curve next to its CSV.
Rendering is headless (Agg) and file-only.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_loss_curves(rows, path) -> None:
    """Per-term loss trajectories plus the EMA momentum schedule."""
    steps = [r.step for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7.0, 6.0), sharex=True,
                                   height_ratios=[3, 1])
    ax1.plot(steps, [r.l_st for r in rows], label="distill", lw=1.0)
    ax1.plot(steps, [r.l_rho for r in rows], label="contrastive", lw=1.0)
    ax1.plot(steps, [r.l_pgt for r in rows], label="pseudo-label bce", lw=1.0)
    ax1.plot(steps, [r.l_gs for r in rows], label="structure", lw=1.0)
    ax1.plot(steps, [r.l_total for r in rows], label="total", lw=1.6, color="k")
    ax1.set_yscale("symlog")
    ax1.set_ylabel("loss")
    ax1.legend(loc="upper right", fontsize=8)
    ax1.grid(alpha=0.3)
    ax2.plot(steps, [r.lam for r in rows], color="tab:purple", lw=1.2)
    ax2.set_ylabel("ema momentum")
    ax2.set_xlabel("step")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_pr_curve(curve, path) -> None:
    """Recall vs precision over the threshold sweep."""
    rec = [r for _, _, r in curve]
    prec = [p for _, p, _ in curve]
    fig, ax = plt.subplots(figsize=(5.0, 4.5))
    ax.plot(rec, prec, lw=1.5)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
