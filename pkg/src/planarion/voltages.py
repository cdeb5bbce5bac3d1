"""Multipole expansion of electrode potentials and Tikhonov voltage solves.

Potentials near the trap centre are expanded to second order in real
solid harmonics::

    V(r) = V0 + Ex x + Ey y + Ez z
              + U1 (z**2 - (x**2 + y**2) / 2) + U2 (x**2 - y**2)
              + U3 2xy + U4 2yz + U5 2xz

The dipole coefficients are potential gradients (V/m), so the electric
field is their negative. Each of the 12 dc electrodes contributes one
column of multipole responses per volt; required voltages for a target
change of multipoles follow from a Tikhonov-regularized SVD solve.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TERMS = ("Ex", "Ey", "Ez", "U1", "U2", "U3", "U4", "U5")


class ComplianceError(ValueError):
    def __init__(self, electrodes, limit):
        self.electrodes = list(electrodes)
        super().__init__(f"voltage limit {limit} V exceeded on electrodes {', '.join(self.electrodes)}")


@dataclass(frozen=True)
class MultipoleCoefficients:
    dipole: np.ndarray  # V/m
    quadrupole: np.ndarray  # V/m^2, (U1..U5)
    offset: float = 0.0
    residual: float = 0.0  # RMS fit residual (V)

    def __post_init__(self):
        object.__setattr__(self, "dipole", np.asarray(self.dipole, dtype=float).reshape(3))
        object.__setattr__(self, "quadrupole", np.asarray(self.quadrupole, dtype=float).reshape(5))
        if not (np.all(np.isfinite(self.dipole)) and np.all(np.isfinite(self.quadrupole))):
            raise ValueError("multipole coefficients must be finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dipole, self.quadrupole])

    @classmethod
    def from_vector(cls, vec, **kw) -> "MultipoleCoefficients":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:3], vec[3:8], **kw)

    @classmethod
    def from_terms(cls, **terms) -> "MultipoleCoefficients":
        unknown = set(terms) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown terms {sorted(unknown)}")
        return cls.from_vector([terms.get(t, 0.0) for t in TERMS])

    def to_dict(self) -> dict:
        return dict(zip(TERMS, map(float, self.as_vector())))


@dataclass(frozen=True)
class TargetAction:
    change: MultipoleCoefficients

    def __post_init__(self):
        if not np.any(self.change.as_vector()):
            raise ValueError("target action has no nonzero component")

    @classmethod
    def from_terms(cls, **terms) -> "TargetAction":
        return cls(MultipoleCoefficients.from_terms(**terms))


@dataclass
class ElectrodeBasisMatrix:
    matrix: np.ndarray  # (8, n_electrodes)
    names: list
    geometry: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.shape != (len(TERMS), len(self.names)):
            raise ValueError(f"basis must be {len(TERMS)} x {len(self.names)}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("basis entries must be finite")

    @property
    def n_electrodes(self) -> int:
        return len(self.names)

    def column(self, name_or_index) -> np.ndarray:
        k = self.names.index(name_or_index) if isinstance(name_or_index, str) else name_or_index
        return self.matrix[:, k]


@dataclass
class VoltageSet:
    voltages: np.ndarray
    residual: float
    lam: float
    singular_values: np.ndarray
    names: list

    def to_dict(self) -> dict:
        return {
            "voltages": dict(zip(self.names, map(float, self.voltages))),
            "residual": self.residual,
            "lambda": self.lam,
            "singular_values": [float(s) for s in self.singular_values],
        }


# multipole fit

def harmonic_design(rel) -> np.ndarray:
    """Columns: constant, x, y, z, then the five quadrupole harmonics."""
    x, y, z = np.asarray(rel, dtype=float).T
    return np.column_stack([
        np.ones_like(x), x, y, z,
        z * z - (x * x + y * y) / 2, x * x - y * y, 2 * x * y, 2 * y * z, 2 * x * z,
    ])


def sample_sphere(center, radius: float, n_theta: int = 8, n_phi: int = 16):
    """Gauss-Legendre in cos(theta) times uniform phi quadrature on a sphere.

    Returns points ``(n_theta * n_phi, 3)`` and quadrature weights summing
    to ``4 pi``. The rule integrates spherical harmonics up to degree
    ``min(2 n_theta - 1, n_phi - 1)`` exactly, so with the defaults degree
    <= 2 harmonics are orthogonal to everything up to degree 7.
    """
    u, wu = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    st = np.sqrt(1 - u * u)
    pts = np.stack([
        np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)), np.outer(u, np.ones(n_phi)),
    ], axis=-1).reshape(-1, 3)
    w = np.outer(wu, np.full(n_phi, 2 * np.pi / n_phi)).ravel()
    return np.asarray(center, dtype=float) + radius * pts, w


def fit_multipoles(points, values, center=(0.0, 0.0, 0.0), radius: float | None = None,
                   weights=None, rcond: float = 1e-10) -> MultipoleCoefficients:
    """Weighted least-squares fit of degree <= 2 solid harmonics.

    Parameters
    ----------
    points : (M, 3) array
        Sample positions (m).
    values : (M,) array
        Potential at the samples (V).
    center : 3-vector
        Expansion point.
    radius : float, optional
        Only samples within this distance of ``center`` are used.
    weights : (M,) array, optional
        Quadrature or reliability weights.
    """
    pts = np.asarray(points, dtype=float)
    vals = np.asarray(values, dtype=float)
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=float)
    rel = pts - np.asarray(center, dtype=float)
    if radius is not None:
        keep = np.linalg.norm(rel, axis=1) <= radius * (1 + 1e-9)
        rel, vals, w = rel[keep], vals[keep], w[keep]
    if len(rel) < 20:
        raise ValueError(f"need at least 20 samples within the fit radius, got {len(rel)}")
    scale = np.sqrt(np.mean(np.sum(rel**2, axis=1)))
    if scale == 0:
        raise ValueError("degenerate sampling: all points at the centre")
    design = harmonic_design(rel / scale)
    sw = np.sqrt(w)
    u, s, vt = np.linalg.svd(design * sw[:, None], full_matrices=False)
    if s[-1] <= rcond * s[0]:
        raise ValueError("degenerate sampling: harmonic terms are not independent on these points")
    coef = vt.T @ ((u.T @ (vals * sw)) / s)
    resid = design @ coef - vals
    coef[1:4] /= scale
    coef[4:] /= scale**2
    return MultipoleCoefficients(coef[1:4], coef[4:], float(coef[0]),
                                 float(np.sqrt(np.sum(w * resid**2) / np.sum(w))))


def multipoles_from_derivatives(gradient, hessian) -> MultipoleCoefficients:
    """Exact expansion coefficients from the potential's gradient and (traceless) Hessian."""
    h = np.asarray(hessian, dtype=float)
    quad = [h[2, 2] / 2, (h[0, 0] - h[1, 1]) / 4, h[0, 1] / 2, h[1, 2] / 2, h[0, 2] / 2]
    return MultipoleCoefficients(gradient, quad)


# synthetic electrode model

def synthetic_geometry(d: float = 400e-6, angle_deg: float = 30.0, segment_length: float = 1.5e-3,
                       gap: float = 50e-6, width: float = 200e-6, n_width: int = 4,
                       n_length: int = 12) -> dict:
    """Four electrode rows at distance ``d`` from the axis, each cut into three z segments.

    Rows sit at ``(+-d cos a, +-d sin a)`` in the radial plane; the angle
    ``a`` keeps the layout from having the x <-> y symmetry that would make
    the ``x**2 - y**2`` response vanish. Electrodes are ordered row by row,
    segments ``-z, centre, +z`` within a row.
    """
    a = math.radians(angle_deg)
    rows = [(1, 1), (1, -1), (-1, 1), (-1, -1)]
    electrodes = []
    for sx, sy in rows:
        for seg in (-1, 0, 1):
            electrodes.append({
                "name": f"{'p' if sx > 0 else 'm'}x{'p' if sy > 0 else 'm'}y_{('zm', 'c', 'zp')[seg + 1]}",
                "center": [sx * d * math.cos(a), sy * d * math.sin(a), seg * (segment_length + gap)],
                "row": [sx, sy],
                "segment": seg,
            })
    return {"d": d, "angle_deg": angle_deg, "segment_length": segment_length, "gap": gap,
            "width": width, "n_width": n_width, "n_length": n_length, "electrodes": electrodes}


def electrode_charges(electrode: dict, geometry: dict) -> np.ndarray:
    """Point-charge positions of one electrode: a rectangle facing the trap axis."""
    c = np.asarray(electrode["center"], dtype=float)
    radial = np.array([c[0], c[1], 0.0])
    radial /= np.linalg.norm(radial)
    tangent = np.array([-radial[1], radial[0], 0.0])
    nw, nl = geometry["n_width"], geometry["n_length"]
    # midpoint grid: never includes the rectangle centre
    sw = ((np.arange(nw) + 0.5) / nw - 0.5) * geometry["width"]
    sl = ((np.arange(nl) + 0.5) / nl - 0.5) * geometry["segment_length"]
    return (c + sw[:, None, None] * tangent + sl[None, :, None] * np.array([0.0, 0.0, 1.0])).reshape(-1, 3)


def electrode_potential(electrode: dict, geometry: dict, points) -> np.ndarray:
    """Potential per volt: charges scaled so the electrode centre sits at 1 V."""
    q = electrode_charges(electrode, geometry)

    def raw(p):
        r = np.linalg.norm(np.asarray(p, dtype=float)[:, None, :] - q[None, :, :], axis=-1)
        return np.sum(1.0 / r, axis=1)

    return raw(points) / raw(np.asarray(electrode["center"], dtype=float)[None, :])[0]


def build_basis(source=None, fit_radius: float = 20e-6, n_theta: int = 8, n_phi: int = 16) -> ElectrodeBasisMatrix:
    """Multipole response matrix from a synthetic geometry (dict) or a coefficient CSV path."""
    if source is None:
        source = synthetic_geometry()
    if not isinstance(source, dict):
        return load_basis(source)
    pts, w = sample_sphere((0.0, 0.0, 0.0), fit_radius, n_theta, n_phi)
    cols = []
    for el in source["electrodes"]:
        mp = fit_multipoles(pts, electrode_potential(el, source, pts), weights=w)
        cols.append(mp.as_vector())
    return ElectrodeBasisMatrix(np.column_stack(cols), [el["name"] for el in source["electrodes"]], source)


def mirror_permutation(basis: ElectrodeBasisMatrix, axis: int) -> np.ndarray:
    """Electrode index map under the mirror ``axis -> -axis`` (0 = x, 1 = y, 2 = z)."""
    els = basis.geometry["electrodes"]
    centers = np.array([e["center"] for e in els])
    flipped = centers.copy()
    flipped[:, axis] *= -1
    perm = np.array([int(np.argmin(np.linalg.norm(centers - f, axis=1))) for f in flipped])
    if not np.allclose(centers[perm], flipped, atol=1e-12):
        raise ValueError("geometry is not mirror symmetric")
    return perm


def mirror_signs(axis: int) -> np.ndarray:
    """Sign of each term under ``axis -> -axis``."""
    odd = {0: ("Ex", "U3", "U5"), 1: ("Ey", "U3", "U4"), 2: ("Ez", "U4", "U5")}[axis]
    return np.array([-1.0 if t in odd else 1.0 for t in TERMS])


# Tikhonov solve

def solve_tikhonov(basis: ElectrodeBasisMatrix, target, lam: float | None = None,
                   compliance: float | None = None, rel_cutoff: float = 1e-14) -> VoltageSet:
    """Regularized voltages ``v = sum_i s_i / (s_i**2 + lam**2) (u_i . t) w_i``.

    ``v`` minimizes ``|B v - t|**2 + lam**2 |v|**2``. The default ``lam``
    is 1e-3 times the largest singular value; ``lam = 0`` gives the
    minimum-norm least-squares solution (singular values below
    ``rel_cutoff`` relative are dropped).
    """
    t = _target_vector(target)
    b = basis.matrix
    u, s, wt = np.linalg.svd(b, full_matrices=False)
    if lam is None:
        lam = 1e-3 * s[0]
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    keep = s > rel_cutoff * s[0]
    filt = np.zeros_like(s)
    filt[keep] = s[keep] / (s[keep] ** 2 + lam**2)
    v = wt.T @ (filt * (u.T @ t))
    resid = float(np.linalg.norm(b @ v - t))
    if compliance is not None:
        over = np.flatnonzero(np.abs(v) > compliance)
        if len(over):
            raise ComplianceError([basis.names[k] for k in over], compliance)
    return VoltageSet(v, resid, float(lam), s, list(basis.names))


def achieved_action(basis: ElectrodeBasisMatrix, voltages, target=None):
    """Multipoles produced by ``voltages`` and, with a target, the residual norm."""
    v = voltages.voltages if isinstance(voltages, VoltageSet) else np.asarray(voltages, dtype=float)
    if v.shape != (basis.n_electrodes,):
        raise ValueError(f"expected {basis.n_electrodes} voltages")
    got = basis.matrix @ v
    resid = None if target is None else float(np.linalg.norm(got - _target_vector(target)))
    return MultipoleCoefficients.from_vector(got), resid


def _target_vector(target) -> np.ndarray:
    if isinstance(target, TargetAction):
        return target.change.as_vector()
    if isinstance(target, MultipoleCoefficients):
        return target.as_vector()
    t = np.asarray(target, dtype=float)
    if t.shape != (len(TERMS),):
        raise ValueError(f"target needs {len(TERMS)} components")
    return t


# files

def save_basis(path, basis: ElectrodeBasisMatrix) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["electrode", "term", "value"])
        for k, name in enumerate(basis.names):
            for i, term in enumerate(TERMS):
                w.writerow([name, term, repr(float(basis.matrix[i, k]))])


def load_basis(path) -> ElectrodeBasisMatrix:
    """Read an ``electrode,term,value`` CSV; errors name the offending line."""
    names, entries = [], {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["electrode", "term", "value"]:
            raise ValueError(f"{path}:1: expected header electrode,term,value")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{line}: expected 3 fields, got {len(row)}")
            name, term, val = row
            if term not in TERMS:
                raise ValueError(f"{path}:{line}: unknown term {term!r}")
            try:
                x = float(val)
            except ValueError:
                raise ValueError(f"{path}:{line}: bad value {val!r}") from None
            if name not in entries:
                names.append(name)
                entries[name] = {}
            if term in entries[name]:
                raise ValueError(f"{path}:{line}: duplicate {name}/{term}")
            entries[name][term] = x
    for name in names:
        missing = [t for t in TERMS if t not in entries[name]]
        if missing:
            raise ValueError(f"{path}: electrode {name} lacks terms {missing}")
    mat = np.array([[entries[n][t] for n in names] for t in TERMS])
    return ElectrodeBasisMatrix(mat, names)


def save_solution(path, vs: VoltageSet) -> None:
    Path(path).write_text(json.dumps(vs.to_dict(), indent=2) + "\n")
