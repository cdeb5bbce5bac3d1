"""Standalone SVG figures with byte-reproducible output."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "planarion"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def gap_curve(path, xi, gaps_mK) -> None:
    """Gap to the first excited configuration versus anisotropy."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xi, gaps_mK, "o-", color="k")
    ax.set_xlabel(r"anisotropy $\xi$")
    ax.set_ylabel("gap (mK)")
    fig.tight_layout()
    _save(fig, path)


def sideband_lines(path, lines_hz, labels=None) -> None:
    """Stick spectrum of red-sideband detunings (MHz)."""
    fig, ax = plt.subplots(figsize=(6, 2.5))
    det = np.array([d for d, _ in lines_hz]) / 1e6
    mult = np.array([m for _, m in lines_hz])
    ax.vlines(det, 0, mult, color="k", lw=0.8)
    ax.set_xlabel("detuning (MHz)")
    ax.set_ylabel("modes")
    fig.tight_layout()
    _save(fig, path)


def cluster_scatter(path, coefficients, labels) -> None:
    """First three eigenpicture coefficients coloured by cluster; noise in grey."""
    c = np.asarray(coefficients)
    labels = np.asarray(labels)
    fig = plt.figure(figsize=(4.5, 4))
    ax = fig.add_subplot(projection="3d")
    noise = labels < 0
    ax.scatter(*c[noise, :3].T, s=3, color="0.6")
    ax.scatter(*c[~noise, :3].T, s=3, c=labels[~noise], cmap="tab10")
    ax.set_xlabel("$c_1$")
    ax.set_ylabel("$c_2$")
    ax.set_zlabel("$c_3$")
    _save(fig, path)


def force_field(path, positions_2d, forces_2d) -> None:
    """Coulomb force on each ion, z horizontal and y vertical."""
    p = np.asarray(positions_2d)
    f = np.asarray(forces_2d)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.quiver(p[:, 1], p[:, 0], f[:, 1], f[:, 0], angles="xy")
    ax.plot(p[:, 1], p[:, 0], ".", color="C3", ms=3)
    ax.set_aspect("equal")
    ax.set_xlabel("z")
    ax.set_ylabel("y")
    fig.tight_layout()
    _save(fig, path)
