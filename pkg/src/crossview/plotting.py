"""Figures written next to the CSV outputs (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

AXIS_LABELS = {
    "confidence_top_fraction": "fraction of most confident samples",
    "prior_delta": "orientation prior half-width (deg)",
    "fov": "ground field of view (deg)",
}


def plot_curves(rows, out_dir) -> list[Path]:
    """One PNG per curve axis present in ``rows`` (axis, value, median loc, median ori)."""
    out_dir = Path(out_dir)
    by_axis: dict[str, list] = {}
    for axis, value, loc, ori in rows:
        by_axis.setdefault(axis, []).append((value, loc, ori))
    paths = []
    for axis, pts in by_axis.items():
        pts.sort()
        x = [p[0] for p in pts]
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
        a1.plot(x, [p[1] for p in pts], "o-")
        a1.set_ylabel("median localization error (m)")
        a2.plot(x, [p[2] for p in pts], "o-", color="tab:orange")
        a2.set_ylabel("median orientation error (deg)")
        for a in (a1, a2):
            a.set_xlabel(AXIS_LABELS.get(axis, axis))
            a.grid(alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"curve_{axis}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_losses(rows, path) -> Path:
    """Training loss components against step, log scale."""
    path = Path(path)
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in (("loss_loc", "localization"), ("loss_ori", "orientation"), ("loss_con", "contrastive")):
        ax.plot(steps, [float(r[key]) for r in rows], label=label, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_prediction(ground, aerial, estimate, gt, path) -> Path:
    """Aerial patch with the predicted distribution overlaid, plus the ground image."""
    import math

    path = Path(path)
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(6, 8), gridspec_kw={"height_ratios": [1, 3]})
    a1.imshow(ground, interpolation="nearest")
    a1.set_axis_off()
    a2.imshow(aerial, interpolation="nearest")
    if estimate.distribution is not None:
        a2.imshow(estimate.distribution, alpha=0.5, cmap="magma", interpolation="nearest")
    for pose, color in ((gt, "lime"), (estimate.pose, "red")):
        if pose is None:
            continue
        r = math.radians(pose.heading)
        x, y = pose.v - 0.5, pose.u - 0.5
        a2.plot(x, y, "+", color=color, ms=10)
        a2.arrow(x, y, 6 * math.sin(r), -6 * math.cos(r), color=color, head_width=1.5)
    a2.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
