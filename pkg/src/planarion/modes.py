"""Pseudopotential normal modes of a crystal and derived laser couplings."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .equilibrium import as_positions, energy_hessian, forces, is_planar
from .trapmath import HBAR, TWO_PI, PotentialSpec

OUT_OF_PLANE = "out-of-plane"
IN_PLANE = "in-plane"


class StructuralInstability(ValueError):
    """The configuration is not a local minimum (negative Hessian eigenvalue)."""


@dataclass
class ModeSpectrum:
    frequencies: np.ndarray  # rad/s, ascending
    eigenvectors: np.ndarray  # (3N, 3N), column m is mode m; row 3*i + d is ion i, axis d
    labels: list
    omega_ref: float

    @property
    def n_ions(self) -> int:
        return len(self.frequencies) // 3

    def mode_vectors(self, m: int) -> np.ndarray:
        """Per-ion displacement vectors (N x 3) of mode ``m``."""
        return self.eigenvectors[:, m].reshape(-1, 3)

    def polarized(self, label: str) -> np.ndarray:
        return self.frequencies[[lab == label for lab in self.labels]]


@dataclass
class CouplingTable:
    eta: np.ndarray  # (N ions, 3N modes); NaN where the mode is excluded
    excluded: np.ndarray  # boolean per mode (zero-frequency modes)


def hessian(config, spec: PotentialSpec) -> np.ndarray:
    """3N x 3N potential curvature matrix in units of ``m omega_z**2``."""
    pos = as_positions(config)
    fmax = np.abs(forces(pos, spec)).max()
    if fmax > 1e-6:
        warnings.warn(f"configuration is not relaxed (max force {fmax:.2e} E0/l0)", stacklevel=2)
    return energy_hessian(pos, spec)


def _block_eigh(h: np.ndarray, n: int):
    """eigh that keeps x- and (y, z)-polarized subspaces apart when they decouple."""
    xi = np.arange(n) * 3
    yz = np.sort(np.concatenate([xi + 1, xi + 2]))
    cross = np.abs(h[np.ix_(xi, yz)]).max() if n else 0.0
    if cross > 1e-12 * np.abs(h).max():
        return np.linalg.eigh(h)
    wx, vx = np.linalg.eigh(h[np.ix_(xi, xi)])
    wyz, vyz = np.linalg.eigh(h[np.ix_(yz, yz)])
    w = np.concatenate([wx, wyz])
    v = np.zeros((3 * n, 3 * n))
    v[np.ix_(xi, np.arange(n))] = vx
    v[np.ix_(yz, np.arange(n, 3 * n))] = vyz
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def mode_spectrum(config, spec: PotentialSpec) -> ModeSpectrum:
    """Normal modes from the mass-weighted Hessian (single species, so mass-weighting is uniform)."""
    pos = as_positions(config)
    n = len(pos)
    w, v = _block_eigh(hessian(pos, spec), n)
    if w[0] < -1e-9 * w[-1]:
        raise StructuralInstability(f"negative curvature {w[0]:.3e}: configuration is not a stable minimum")
    freqs = spec.omega_z * np.sqrt(np.clip(w, 0.0, None))
    xweight = np.sum(v[0::3, :] ** 2, axis=0)
    labels = [OUT_OF_PLANE if wx > 0.5 else IN_PLANE for wx in xweight]
    return ModeSpectrum(freqs, v, labels, spec.omega_z)


def out_of_plane_block(config, spec: PotentialSpec, tol: float = 1e-6):
    """x-x block of the Hessian for a planar crystal and its N mode frequencies (rad/s).

    For ions in the x = 0 plane the out-of-plane coordinates decouple:
    the block is ``k_x - sum_j 1/r_ij**3`` on the diagonal and ``1/r_ij**3`` off it.
    """
    pos = as_positions(config)
    planar, excursion = is_planar(pos, tol)
    if not planar:
        raise ValueError(f"configuration is not planar (max |x| = {excursion:.3g} l0)")
    n = len(pos)
    block = np.full((n, n), 0.0)
    if n > 1:
        d = pos[:, None, 1:] - pos[None, :, 1:]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        np.fill_diagonal(r2, 1.0)
        c = r2**-1.5
        np.fill_diagonal(c, 0.0)
        block = c - np.diag(c.sum(axis=1))
    block += np.eye(n) * spec.stiffness[0]
    w = np.linalg.eigvalsh(block)
    if w[0] < 0:
        raise StructuralInstability("out-of-plane block has negative curvature: the crystal buckles")
    return block, spec.omega_z * np.sqrt(w)


def lamb_dicke(spectrum: ModeSpectrum, probe_wavevector, spec: PotentialSpec) -> CouplingTable:
    """Per-ion, per-mode Lamb-Dicke parameters for wavevector ``probe_wavevector`` (1/m)."""
    k = np.asarray(probe_wavevector, dtype=float)
    n = spectrum.n_ions
    b = spectrum.eigenvectors.reshape(n, 3, 3 * n)
    proj = np.einsum("d,idm->im", k, b)
    excluded = spectrum.frequencies <= 1e-9 * spectrum.frequencies.max()
    with np.errstate(divide="ignore"):
        scale = np.sqrt(HBAR / (2.0 * spec.mass * spectrum.frequencies))
    eta = proj * np.where(excluded, np.nan, scale)
    return CouplingTable(eta, excluded)


def sideband_positions(spectrum: ModeSpectrum, tol_hz: float = 10.0, label: str | None = None):
    """Red-sideband detunings ``-omega_m / 2 pi`` in Hz as ``(detuning, multiplicity)`` pairs.

    Modes closer than ``tol_hz`` are merged into one line.
    """
    freqs = spectrum.frequencies if label is None else spectrum.polarized(label)
    f = np.sort(freqs / TWO_PI)
    lines = []
    group = [f[0]] if len(f) else []
    for val in f[1:]:
        if val - group[-1] < tol_hz:
            group.append(val)
        else:
            lines.append((-float(np.mean(group)), len(group)))
            group = [val]
    if group:
        lines.append((-float(np.mean(group)), len(group)))
    return sorted(lines)


def save_spectrum(path, spectrum: ModeSpectrum) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "freq_hz", "polarization"])
        for m, (f, lab) in enumerate(zip(spectrum.frequencies, spectrum.labels)):
            w.writerow([m, repr(float(f / TWO_PI)), lab])


def save_couplings(path, table: CouplingTable) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ion", "mode", "eta"])
        n_ions, n_modes = table.eta.shape
        for i in range(n_ions):
            for m in range(n_modes):
                if not table.excluded[m]:
                    w.writerow([i, m, repr(float(table.eta[i, m]))])
