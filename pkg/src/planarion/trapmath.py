"""Trap constants, unit system and closed-form linear-trap formulas.

All angular frequencies are in rad/s unless a name ends in ``_hz``.
Crystal computations elsewhere in the package use the dimensionless unit
system built by :class:`UnitSystem`: lengths in ``l0`` with
``l0**3 = e**2 / (4 pi eps0 m omega_z**2)`` and energies in
``E0 = m omega_z**2 l0**2``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# CODATA-2018
CONSTANTS = {
    "e": 1.602176634e-19,  # C
    "eps0": 8.8541878128e-12,  # F/m
    "k_B": 1.380649e-23,  # J/K
    "amu": 1.66053906660e-27,  # kg
    "hbar": 1.054571817e-34,  # J s
}
E_CHARGE = CONSTANTS["e"]
EPS0 = CONSTANTS["eps0"]
K_B = CONSTANTS["k_B"]
AMU = CONSTANTS["amu"]
HBAR = CONSTANTS["hbar"]
COULOMB_K = 1.0 / (4.0 * math.pi * EPS0)

CA40_MASS_AMU = 39.962591
CA40_MASS = CA40_MASS_AMU * AMU

TWO_PI = 2.0 * math.pi


class TrapError(ValueError):
    """Invalid or unstable trap parameters."""


class InstabilityError(TrapError):
    """A Mathieu parameter set with a negative pseudopotential radicand."""

    def __init__(self, axis, radicand):
        self.axis = axis
        self.radicand = radicand
        super().__init__(f"unstable along axis {'xyz'[axis]}: q^2/2 + a = {radicand:.6g} < 0")


@dataclass(frozen=True)
class PotentialSpec:
    """Harmonic trap: angular secular frequencies plus the ion species."""

    omega_x: float
    omega_y: float
    omega_z: float
    mass: float = CA40_MASS
    charge: float = E_CHARGE

    def __post_init__(self):
        for name in ("omega_x", "omega_y", "omega_z"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise TrapError(f"{name} must be > 0, got {val!r}")
        if not self.mass > 0:
            raise TrapError(f"mass must be > 0, got {self.mass!r}")
        if self.charge == 0:
            raise TrapError("charge must be nonzero")

    @classmethod
    def from_hz(cls, fx, fy, fz, mass_amu=CA40_MASS_AMU, charge_e=1.0):
        return cls(TWO_PI * fx, TWO_PI * fy, TWO_PI * fz, mass_amu * AMU, charge_e * E_CHARGE)

    @property
    def omegas(self) -> np.ndarray:
        return np.array([self.omega_x, self.omega_y, self.omega_z])

    @property
    def stiffness(self) -> np.ndarray:
        """Per-axis curvature in units of ``m omega_z**2``."""
        return (self.omegas / self.omega_z) ** 2

    @property
    def anisotropy(self) -> float:
        return self.omega_y / self.omega_z

    def with_anisotropy(self, xi: float) -> "PotentialSpec":
        """Same trap with omega_y replaced by ``xi * omega_z``."""
        return PotentialSpec(self.omega_x, xi * self.omega_z, self.omega_z, self.mass, self.charge)

    def units(self) -> "UnitSystem":
        return UnitSystem.from_spec(self)

    def to_dict(self) -> dict:
        return {
            "omega_x_hz": self.omega_x / TWO_PI,
            "omega_y_hz": self.omega_y / TWO_PI,
            "omega_z_hz": self.omega_z / TWO_PI,
            "mass_amu": self.mass / AMU,
            "charge_e": self.charge / E_CHARGE,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PotentialSpec":
        return cls.from_hz(
            float(d["omega_x_hz"]),
            float(d["omega_y_hz"]),
            float(d["omega_z_hz"]),
            float(d.get("mass_amu", CA40_MASS_AMU)),
            float(d.get("charge_e", 1.0)),
        )


@dataclass(frozen=True)
class MathieuSpec:
    """rf drive frequency and per-axis Mathieu ``q`` and ``a`` parameters."""

    drive_freq: float
    q: tuple = (0.0, 0.0, 0.0)
    a: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim == 0:
            q = np.array([q, -q, 0.0])
        object.__setattr__(self, "q", tuple(float(v) for v in q))
        object.__setattr__(self, "a", tuple(float(v) for v in np.broadcast_to(self.a, (3,))))
        if not self.drive_freq > 0:
            raise TrapError(f"drive_freq must be > 0, got {self.drive_freq!r}")
        if abs(sum(self.a)) > 1e-9 * max(1.0, max(abs(v) for v in self.a)):
            warnings.warn(f"a-parameters do not sum to zero (sum = {sum(self.a):.3g})", stacklevel=2)

    @property
    def q_scalar(self) -> float:
        return max(abs(v) for v in self.q)

    @property
    def radicands(self) -> np.ndarray:
        return np.asarray(self.q) ** 2 / 2 + np.asarray(self.a)

    @classmethod
    def from_potential(cls, spec: PotentialSpec, q: float, drive_freq: float | None = None):
        """Linear trap (q, -q, 0) reproducing ``spec`` in the pseudopotential limit.

        x and y are the rf (radial) axes, z the axial one. If ``drive_freq`` is
        omitted the smallest drive compatible with ``q`` is used, which makes
        the ``a`` parameters sum to zero.
        """
        if drive_freq is None:
            drive_freq = min_drive_frequency(spec, q)
        w = spec.omegas
        scaled = (2 * w / drive_freq) ** 2
        a = (scaled[0] - q * q / 2, scaled[1] - q * q / 2, scaled[2])
        return cls(drive_freq, (q, -q, 0.0), a)

    def to_dict(self) -> dict:
        return {"drive_hz": self.drive_freq / TWO_PI, "q": list(self.q), "a": list(self.a)}

    @classmethod
    def from_dict(cls, d: dict) -> "MathieuSpec":
        q = d.get("q", 0.0)
        return cls(TWO_PI * float(d["drive_hz"]), q if np.ndim(q) else float(q), d.get("a", (0.0, 0.0, 0.0)))


@dataclass(frozen=True)
class UnitSystem:
    length_scale: float
    energy_scale: float
    time_scale: float

    @classmethod
    def from_spec(cls, spec: PotentialSpec) -> "UnitSystem":
        w = spec.omega_z
        l0 = (COULOMB_K * spec.charge**2 / (spec.mass * w**2)) ** (1.0 / 3.0)
        return cls(l0, spec.mass * w**2 * l0**2, 1.0 / w)

    @property
    def omega_ref(self) -> float:
        return 1.0 / self.time_scale


def anisotropy(spec: PotentialSpec) -> float:
    """Trap anisotropy xi = omega_y / omega_z."""
    return spec.omega_y / spec.omega_z


def secular_frequencies(mathieu: MathieuSpec) -> np.ndarray:
    """Pseudopotential secular frequencies ``(Omega/2) sqrt(q_d**2/2 + a_d)``."""
    rad = mathieu.radicands
    for axis, r in enumerate(rad):
        if r < 0:
            raise InstabilityError(axis, r)
    return mathieu.drive_freq / 2 * np.sqrt(rad)


def min_drive_frequency(targets, q_max: float) -> float:
    """Lowest drive frequency giving ``targets`` with ``|q| <= q_max``.

    ``targets`` is a PotentialSpec or three angular frequencies.
    """
    if not q_max > 0:
        raise TrapError("q_max must be > 0")
    w = targets.omegas if isinstance(targets, PotentialSpec) else np.asarray(targets, dtype=float)
    return 2.0 / q_max * math.sqrt(float(np.sum(w**2)))


def freq_sensitivity(mathieu: MathieuSpec) -> np.ndarray:
    """Per-axis derivative of the secular frequency with respect to q.

    Axes without rf (``q_d == 0``) return exactly 0.
    """
    w = secular_frequencies(mathieu)
    q = mathieu.q_scalar
    out = np.zeros(3)
    for d in range(3):
        if mathieu.q[d] == 0:
            continue
        if w[d] == 0:
            raise ZeroDivisionError(f"zero secular frequency along axis {'xyz'[d]}")
        out[d] = mathieu.drive_freq**2 * q / (8.0 * w[d])
    return out


def anisotropy_sensitivity(spec: PotentialSpec, rel_voltage_change: float) -> float:
    """Relative change of xi for a relative rf-voltage change.

    Assumes x is the strong rf axis, y the weak rf axis and z the axial one
    (``omega_x >> omega_y >= omega_z``); a warning is issued otherwise.
    """
    w1, w2, w3 = spec.omegas
    if w2 == 0:
        raise ZeroDivisionError("omega_y is zero")
    if not (w1 > 2 * w2 and w2 >= w3):
        warnings.warn("anisotropy sensitivity assumes omega_x >> omega_y >= omega_z", stacklevel=2)
    return -rel_voltage_change * float(np.sum(spec.omegas**2)) / (2.0 * w2**2)


@dataclass(frozen=True)
class PlanarityResult:
    threshold: float
    ratio: float
    margin: float
    planar: bool
    axis_ratios: tuple  # omega_s / omega_w for each weak axis separately


def planarity_threshold(n_ions: int) -> float:
    return 1.23 * n_ions**0.25


def planarity_criterion(spec: PotentialSpec, n_ions: int) -> PlanarityResult:
    """Necessary condition ``omega_s / omega_w > 1.23 N**(1/4)`` for a planar crystal.

    ``omega_w`` is the geometric mean of the two weaker frequencies.
    """
    if n_ions < 1:
        raise ValueError("n_ions must be >= 1")
    w = np.sort(spec.omegas)[::-1]
    strong, weak = w[0], w[1:]
    ratio = strong / math.sqrt(weak[0] * weak[1])
    thr = planarity_threshold(n_ions)
    return PlanarityResult(thr, ratio, ratio - thr, bool(ratio > thr), tuple(strong / weak))


def modulation_index_from_rabi(sideband_rabi: float, carrier_rabi: float) -> float:
    """Small-modulation micromotion index from sideband and carrier Rabi frequencies."""
    if carrier_rabi == 0:
        raise ZeroDivisionError("carrier Rabi frequency is zero")
    return 2.0 * sideband_rabi / carrier_rabi


def predicted_modulation_index(displacement_from_null, q: float, wavenumber: float):
    """First-order modulation index ``k q x / 2`` of an ion displaced from the rf null."""
    if abs(q) >= 0.3:
        warnings.warn("q outside the small-modulation regime", stacklevel=2)
    beta = wavenumber * q * np.asarray(displacement_from_null) / 2.0
    if np.any(np.abs(beta) > 1):
        warnings.warn("modulation index > 1: small-beta approximation does not hold", stacklevel=2)
    return beta if np.ndim(beta) else float(beta)


def gap_to_temperature(energy_gap, units: UnitSystem):
    """Convert an energy in E0 units to kelvin."""
    gap = np.asarray(energy_gap, dtype=float)
    if np.any(gap < 0):
        raise ValueError("energy gap must be >= 0")
    t = gap * units.energy_scale / K_B
    return t if t.ndim else float(t)


def load_spec(path) -> PotentialSpec | MathieuSpec:
    """Read a PotentialSpec or MathieuSpec JSON document (kind inferred from keys)."""
    d = json.loads(Path(path).read_text())
    if "drive_hz" in d and "omega_x_hz" not in d:
        return MathieuSpec.from_dict(d)
    return PotentialSpec.from_dict(d)


def save_spec(spec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
