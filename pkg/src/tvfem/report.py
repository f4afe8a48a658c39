"""Matplotlib figures rendered next to the csv tables of a run.

Rendering is an optional reporting layer: the csv files remain the canonical
output, and nothing here is imported by the numerical modules.
"""

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "figure.figsize": (6.0, 4.0),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 160,
    "savefig.bbox": "tight",
})


def convergence_figure(records, path, title="", reference_rates=()):
    """Log-log error and estimator against the number of vertices."""
    n = np.array([r.n_vertices for r in records], dtype=float)
    err = np.array([r.error_l2 for r in records])
    fig, ax = plt.subplots()
    ax.loglog(n, err, "o-", label="$L^2$ error")
    est = np.array([r.e_est for r in records])
    if np.any(np.isfinite(est)):
        ax.loglog(n, est, "s--", label="estimator")
    h = np.array([r.h_avg for r in records])
    for rate in reference_rates:
        ref = err[-1] * (h / h[-1]) ** rate
        ax.loglog(n, ref, ":", color="gray",
                  label=f"$h^{{{rate:g}}}$ reference")
    ax.set_xlabel("number of vertices")
    ax.set_ylabel("error")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.savefig(path)
    plt.close(fig)


def mesh_figure(mesh, path, title=""):
    fig, ax = plt.subplots()
    if mesh.dim == 2:
        ax.triplot(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.cells,
                   lw=0.4, color="tab:blue")
        ax.set_aspect("equal")
    else:
        x = mesh.vertices[:, 0]
        ax.plot(x, np.zeros_like(x), "|", markersize=12)
        ax.set_yticks([])
    if title:
        ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)


def solution_figure(mesh, u, path, title=""):
    """Piecewise-constant rendering of the cell averages of the iterate."""
    from .fem import cell_means

    fig, ax = plt.subplots()
    if mesh.dim == 2:
        values = cell_means(u)
        tpc = ax.tripcolor(mesh.vertices[:, 0], mesh.vertices[:, 1],
                           mesh.cells, facecolors=values, cmap="viridis")
        fig.colorbar(tpc, ax=ax)
        ax.set_aspect("equal")
    else:
        x = mesh.vertices[:, 0]
        order = np.argsort(x)
        ax.plot(x[order], u.dofs[order], "-")
        ax.set_xlabel("x")
    if title:
        ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)
