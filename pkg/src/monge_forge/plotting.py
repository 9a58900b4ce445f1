"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"source": "tab:blue", "target": "tab:orange", "pushforward": "tab:green"}


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path).name


def history_figure(history, path) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = history.column("step")
    ax.plot(steps, history.column("lagrangian"), label="Lagrangian")
    ax.plot(steps, history.column("transport_cost"), label="transport cost", alpha=0.8)
    ax.set_xlabel("outer step")
    ax.legend(frameon=False)
    return _save(fig, path)


def scatter_figure(X, Y, P, path, xlabel="x0", ylabel="x1", lines=0) -> str:
    """Source, target and pushforward clouds; ``lines`` draws that many x -> T(x) segments."""
    fig, ax = plt.subplots(figsize=(5.5, 5))
    k = min(len(X), 1000)
    ax.scatter(Y[:k, 0], Y[:k, 1], s=4, c=STYLE["target"], label="target")
    if X.shape[1] == 2:
        ax.scatter(X[:k, 0], X[:k, 1], s=4, c=STYLE["source"], label="source")
        for i in range(min(lines, k)):
            ax.plot([X[i, 0], P[i, 0]], [X[i, 1], P[i, 1]], c="0.6", lw=0.4)
    ax.scatter(P[:k, 0], P[:k, 1], s=4, c=STYLE["pushforward"], label="pushforward")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False, markerscale=3)
    return _save(fig, path)


def line_figure(X, Y, TX, path, T=None, reference=None) -> str:
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(9, 3.5))
    bins = 40
    a0.hist(Y[:, 0], bins=bins, density=True, alpha=0.5, color=STYLE["target"], label="target")
    a0.hist(TX[:, 0], bins=bins, density=True, alpha=0.5, color=STYLE["pushforward"], label="pushforward")
    a0.legend(frameon=False)
    if T is not None:
        lo, hi = float(X.min()), float(X.max())
        if hi - lo < 1e-12:
            lo, hi = lo - 1, hi + 1
        grid = np.linspace(lo, hi, 400)[:, None]
        a1.plot(grid[:, 0], T(grid)[:, 0], label="learned")
        if reference is not None:
            a1.plot(grid[:, 0], reference(grid)[:, 0], "--", label="reference")
        a1.set_xlabel("x")
        a1.set_ylabel("T(x)")
        a1.legend(frameon=False)
    return _save(fig, path)


def sphere_figure(X, Y, P, path) -> str:
    """(theta, phi) plane with phi increasing downward, north pole on top."""
    fig, ax = plt.subplots(figsize=(7, 3.8))
    k = min(len(X), 2000)
    for name, pts in (("target", Y), ("source", X), ("pushforward", P)):
        ax.scatter(pts[:k, 0], pts[:k, 1], s=3, c=STYLE[name], label=name)
    ax.set_xlim(0, 2 * np.pi)
    ax.set_ylim(np.pi, 0)
    ax.set_xlabel("theta")
    ax.set_ylabel("phi")
    ax.legend(frameon=False, markerscale=3, loc="lower right")
    return _save(fig, path)


def checkpoint_figure(records, path) -> str:
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r["bound"] if r["bound"] is not None else np.nan for r in records], "o-", label="gap bound")
    if all("map_l2_error" in r for r in records):
        ax.plot(steps, [r["map_l2_error"] for r in records], "s-", label="map L2 error")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("outer step")
    ax.legend(frameon=False)
    return _save(fig, path)


def image_grid_figure(X, G, Y, side, path, n=6) -> str:
    fig, axes = plt.subplots(3, n, figsize=(1.3 * n, 4))
    for j in range(n):
        for i, (name, imgs) in enumerate((("masked", X), ("composite", G), ("target", Y))):
            ax = axes[i, j]
            ax.imshow(imgs[j].reshape(side, side), cmap="gray")
            ax.set_xticks([])
            ax.set_yticks([])
            if j == 0:
                ax.set_ylabel(name)
    return _save(fig, path)


def experiment_figures(experiment, out_dir, X, Y, P, history, T, problem, metrics) -> dict[str, str]:
    out_dir = Path(out_dir)
    figs = {"history_figure": history_figure(history, out_dir / "history.png")}
    if problem.on_sphere:
        figs["samples_figure"] = sphere_figure(X, Y, P, out_dir / "samples.png")
    elif X.shape[1] == 1 and P.shape[1] == 1:
        figs["samples_figure"] = line_figure(X, Y, P, out_dir / "samples.png", T, problem.true_map)
    elif P.shape[1] == 2:
        figs["samples_figure"] = scatter_figure(X, Y, P, out_dir / "samples.png", lines=60)
    if experiment == "toy_inpaint":
        side = int(np.sqrt(X.shape[1]))
        figs["samples_figure"] = image_grid_figure(X, T.composite(X), Y, side, out_dir / "samples.png")
    if "checkpoints" in metrics:
        figs["checkpoint_figure"] = checkpoint_figure(metrics["checkpoints"], out_dir / "checkpoints.png")
    return figs
