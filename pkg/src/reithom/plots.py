"""Figure rendering for the reporting drivers.

Every function saves a PNG next to the CSV it illustrates and closes the
figure, so batch runs do not accumulate open canvases.  The Agg backend is
forced on import: these plots are meant for files, not windows.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 150


def convergence_figure(rows, path):
    """Log-log homogenization error vs epsilon with a first-order guide."""
    eps = np.array([r.epsilon for r in rows])
    l2 = np.maximum([r.rel_l2 for r in rows], 1e-18)
    lux = np.maximum([r.rel_lux for r in rows], 1e-18)
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    ax.loglog(eps, l2, "o-", label="rel. L2 error")
    ax.loglog(eps, lux, "s--", label="rel. Luxemburg error")
    if l2[0] > 1e-18:
        guide = l2[0] * eps / eps[0]
        ax.loglog(eps, guide, "k:", lw=0.8, label="slope 1")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("relative error")
    ax.invert_xaxis()
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def twoscale_figure(rows, path):
    """Pairing defects vs epsilon, one line per test function."""
    by_phi = {}
    for r in rows:
        by_phi.setdefault(r[1], []).append((r[0], r[2]))
    fig, ax = plt.subplots(figsize=(5.4, 3.8))
    for phi_id, pts in sorted(by_phi.items()):
        pts = sorted(pts, reverse=True)
        eps = [p[0] for p in pts]
        d = [max(p[1], 1e-18) for p in pts]
        style = "o-" if phi_id.startswith("u:") else "s--"
        ax.loglog(eps, d, style, label=phi_id, ms=4)
    ax.set_xlabel("epsilon")
    ax.set_ylabel("pairing defect")
    ax.invert_xaxis()
    ax.legend(fontsize=7, ncol=2)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def manufactured_figure(rows, path):
    """Max error vs mesh size with a second-order guide."""
    h = np.array([1.0 / r.n for r in rows])
    err = np.array([r.max_err for r in rows])
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    ax.loglog(h, err, "o-", label="max nodal error")
    if err[0] > 0:
        ax.loglog(h, err[0] * (h / h[0]) ** 2, "k:", lw=0.8, label="slope 2")
    ax.set_xlabel("h")
    ax.set_ylabel("max error")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def field_figure(u, grid, path, title=None):
    """Nodal field: line plot in d=1, pcolor image in d=2."""
    u = np.asarray(u, dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    if grid.dim == 1:
        x = np.linspace(0.0, 1.0, grid.n + 1)
        ax.plot(x, u, "-")
        ax.set_xlabel("x")
        ax.set_ylabel("u")
    else:
        im = ax.imshow(u.T, origin="lower", extent=(0, 1, 0, 1),
                       cmap="viridis")
        fig.colorbar(im, ax=ax, shrink=0.85)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def diagnostics_figure(history, path):
    """Per-step L2 norm and energy ledger of a time march."""
    t = np.arange(history.snapshots.shape[0]) * history.tgrid.dt
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    ax.plot(t, history.l2_norms, "-", label="|u|_L2")
    ax.plot(t, np.sqrt(np.maximum(history.work, 0.0)), "--",
            label="energy bound")
    ax.set_xlabel("t")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def table_figure(table, path):
    """Effective flux samples: curve in d=1, arrow field in d=2."""
    pts = table.sample_points()
    vals = table.sample_values()
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    if pts.shape[1] == 1:
        ax.plot(pts[:, 0], vals[:, 0], "o-", ms=3)
        ax.set_xlabel("xi")
        ax.set_ylabel("q(xi)")
    else:
        ax.quiver(pts[:, 0], pts[:, 1], vals[:, 0], vals[:, 1],
                  np.hypot(vals[:, 0], vals[:, 1]), cmap="viridis")
        ax.set_xlabel("xi_1")
        ax.set_ylabel("xi_2")
        ax.set_aspect("equal")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def corrector_figure(pi, grid, path, title=None):
    """Periodic corrector: line over the cell in d=1, image in d=2."""
    pi = np.asarray(pi, dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    if grid.dim == 1:
        y = np.arange(grid.n) * grid.h
        ax.plot(y, pi, "-")
        ax.set_xlabel("cell coordinate")
        ax.set_ylabel("corrector")
    else:
        im = ax.imshow(pi.T, origin="lower", extent=(0, 1, 0, 1),
                       cmap="RdBu_r")
        fig.colorbar(im, ax=ax, shrink=0.85)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
