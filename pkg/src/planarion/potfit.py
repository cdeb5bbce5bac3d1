"""Trap potential from observed ion positions.

In equilibrium the trap force on each ion cancels the Coulomb force of the
others, so Coulomb forces computed from positions sample the trap force
field. A quadratic potential ``V = 1/2 (r - r0)^T A (r - r0)`` gives a
linear force field, fitted here by least squares. Positions are 2-D with
columns ``(y, z)`` and ``A = [[alpha, beta], [beta, gamma]]`` acts on
``(y - y0, z - z0)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from .trapmath import COULOMB_K, E_CHARGE, PotentialSpec


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class QuadraticFit:
    matrix: np.ndarray  # 2 x 2 in (y, z) order
    center: np.ndarray  # (y0, z0)
    phi: float  # angle of the principal z' axis from z towards y, in [-pi/4, pi/4]
    eigencurvatures: np.ndarray  # largest first
    axes: np.ndarray  # columns: unit eigenvectors matching eigencurvatures

    @property
    def alpha(self) -> float:
        return float(self.matrix[0, 0])

    @property
    def beta(self) -> float:
        return float(self.matrix[0, 1])

    @property
    def gamma(self) -> float:
        return float(self.matrix[1, 1])

    @property
    def confining(self) -> bool:
        return bool(np.all(self.eigencurvatures > 0))

    @property
    def xi_inv(self) -> float:
        """Anisotropy ``sqrt(lambda_min / lambda_max)``."""
        if not self.confining:
            raise FitError("fit is not confining")
        return math.sqrt(self.eigencurvatures[-1] / self.eigencurvatures[0])

    def frame(self) -> np.ndarray:
        """Rows are the unit vectors of the rotated (y', z') axes in (y, z) components."""
        c, s = math.cos(self.phi), math.sin(self.phi)
        return np.array([[c, -s], [s, c]])  # y' = (c, -s), z' = (s, c)

    @property
    def z_curvature(self) -> float:
        """Curvature along z'."""
        ez = self.frame()[1]
        return float(ez @ self.matrix @ ez)


@dataclass(frozen=True)
class ResidualField:
    dF_y: np.ndarray  # along y'
    dF_z: np.ndarray  # along z'

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.dF_y**2 + self.dF_z**2)))


def coulomb_force_field(positions_2d, length_scale: float | None = None, charge: float | None = None) -> np.ndarray:
    """Coulomb force on every ion from all others.

    Without ``length_scale`` the result is dimensionless (``1/d**2`` with
    ``d`` in input units). With ``length_scale`` in metres per input unit
    it is in newtons for point charges ``charge`` (default e).
    """
    p = np.asarray(positions_2d, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 2:
        raise ValueError("need an (N, 2) array with N >= 2")
    d = p[:, None, :] - p[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", d, d)
    np.fill_diagonal(r2, np.inf)
    if r2.min() == 0:
        i, j = np.unravel_index(np.argmin(r2), r2.shape)
        raise ValueError(f"ions {min(i, j)} and {max(i, j)} coincide")
    f = np.einsum("ij,ijk->ik", r2**-1.5, d)
    if length_scale is not None:
        q = E_CHARGE if charge is None else charge
        f *= COULOMB_K * q * q / length_scale**2
    return f


def _canonical(matrix: np.ndarray):
    w, v = np.linalg.eigh(matrix)
    w, v = w[::-1], v[:, ::-1]
    # z' is the principal axis closest to z
    k = int(np.argmax(np.abs(v[1])))
    ez = v[:, k] * np.sign(v[1, k])
    phi = math.atan2(ez[0], ez[1]) + 0.0
    return w, v, phi


def fit_quadratic(positions_2d, forces_2d, rcond: float = 1e-10) -> QuadraticFit:
    """Least-squares fit of ``F_coulomb = A (r - r0)``.

    The trap force ``-A (r - r0)`` balances the Coulomb force. Unknowns are
    alpha, beta, gamma and the constant force ``A r0``; the design matrix
    uses centred coordinates and is solved by QR.
    """
    p = np.asarray(positions_2d, dtype=float)
    f = np.asarray(forces_2d, dtype=float)
    n = len(p)
    if n < 4:
        raise FitError("need at least 4 ions")
    mean = p.mean(axis=0)
    y, z = (p - mean).T
    zero, one = np.zeros(n), np.ones(n)
    design = np.block([
        [np.column_stack([y, z, zero, -one, zero])],
        [np.column_stack([zero, y, z, zero, -one])],
    ])
    rhs = np.concatenate([f[:, 0], f[:, 1]])
    q, r = linalg.qr(design, mode="economic")
    diag = np.abs(np.diag(r))
    if diag.min() <= rcond * diag.max():
        raise FitError("rank-deficient design matrix (collinear or degenerate positions)")
    alpha, beta, gamma, cy, cz = linalg.solve_triangular(r, q.T @ rhs)
    a = np.array([[alpha, beta], [beta, gamma]])
    try:
        center = mean + np.linalg.solve(a, [cy, cz])
    except np.linalg.LinAlgError:
        raise FitError("singular curvature matrix") from None
    w, v, phi = _canonical(a)
    return QuadraticFit(a, center, phi, w, v)


def residuals(positions_2d, forces_2d, fit: QuadraticFit) -> ResidualField:
    """Force residuals of the linear fit in the rotated (y', z') frame."""
    p = np.asarray(positions_2d, dtype=float)
    d = np.asarray(forces_2d, dtype=float) - (p - fit.center) @ fit.matrix.T
    rot = d @ fit.frame().T
    return ResidualField(rot[:, 0], rot[:, 1])


def calibrate_scale(pixel_positions, known_omega_z: float, spec: PotentialSpec) -> float:
    """Metres per pixel such that the fitted curvature along z' equals ``m omega_z**2``.

    Forces from pixel positions carry a ``1/s**2`` factor and curvatures a
    ``1/s**3`` factor, so ``s**3 = k e**2 A_z' / (m omega_z**2)``.
    """
    if not known_omega_z > 0:
        raise ValueError("known_omega_z must be > 0")
    p = np.asarray(pixel_positions, dtype=float)
    fit = fit_quadratic(p, coulomb_force_field(p))
    if not fit.confining:
        raise FitError("fit is not confining")
    return float((COULOMB_K * spec.charge**2 * fit.z_curvature / (spec.mass * known_omega_z**2)) ** (1 / 3))


def load_positions(path) -> tuple[np.ndarray, str]:
    """Read ``ion,y_px,z_px`` or ``ion,y_um,z_um``; returns positions and the unit suffix."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError("empty positions file")
    for unit in ("px", "um"):
        if f"y_{unit}" in rows[0]:
            return np.array([[float(r[f"y_{unit}"]), float(r[f"z_{unit}"])] for r in rows]), unit
    raise ValueError("positions file needs y_px,z_px or y_um,z_um columns")


def fit_report(fit: QuadraticFit, res: ResidualField, scale_um_per_px: float | None = None) -> dict:
    return {
        "alpha": fit.alpha,
        "beta": fit.beta,
        "gamma": fit.gamma,
        "y0": float(fit.center[0]),
        "z0": float(fit.center[1]),
        "phi": fit.phi,
        "xi_inv": fit.xi_inv if fit.confining else None,
        "scale_um_per_px": scale_um_per_px,
        "rms_residual": res.rms,
    }


def save_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
