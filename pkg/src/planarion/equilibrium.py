"""Crystal energies, local relaxation, simulated annealing and configuration census.

Positions are N x 3 arrays ``(x, y, z)`` in units of ``l0`` (see
:class:`planarion.trapmath.UnitSystem`), x being the strongly confined,
out-of-plane axis. Energies are in ``E0``. In these units the potential
energy of a crystal is

    E = 1/2 sum_i sum_d k_d r_id**2 + sum_{i<j} 1 / |r_i - r_j|

with per-axis stiffness ``k_d = (omega_d / omega_z)**2``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import integrate, optimize, special
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .trapmath import PotentialSpec, UnitSystem, gap_to_temperature

log = logging.getLogger(__name__)

MIN_SEPARATION = 1e-9
# sign flips of the in-plane coordinates (identity, y, z, y and z)
IN_PLANE_FLIPS = (
    np.array([1.0, 1.0, 1.0]),
    np.array([1.0, -1.0, 1.0]),
    np.array([1.0, 1.0, -1.0]),
    np.array([1.0, -1.0, -1.0]),
)


class ConfigurationError(ValueError):
    """Invalid ion positions (coincident ions, non-finite values, degenerate shapes)."""


class RelaxationError(RuntimeError):
    def __init__(self, message, grad_norm):
        self.grad_norm = grad_norm
        super().__init__(f"{message} (last max force component {grad_norm:.3e} E0/l0)")


@dataclass(frozen=True, eq=False)
class IonConfiguration:
    positions: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim == 1 and pos.size == 3:
            pos = pos[None, :]
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ConfigurationError(f"positions must have shape (N, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ConfigurationError("positions contain non-finite values")
        if len(pos) > 1:
            dmin = pdist(pos).min()
            if dmin <= MIN_SEPARATION:
                raise ConfigurationError(f"coincident ions (minimum separation {dmin:.3g} l0)")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def n_ions(self) -> int:
        return len(self.positions)

    def flipped(self, signs) -> "IonConfiguration":
        return IonConfiguration(self.positions * np.asarray(signs))

    def __len__(self):
        return self.n_ions


def as_positions(config) -> np.ndarray:
    if isinstance(config, IonConfiguration):
        return config.positions
    return IonConfiguration(config).positions


def _pair_geometry(pos):
    diff = pos[:, None, :] - pos[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(r2, np.inf)
    if len(pos) > 1 and r2.min() <= MIN_SEPARATION**2:
        raise ConfigurationError("coincident ions")
    return diff, r2


def total_energy(config, spec: PotentialSpec) -> float:
    """Trap plus Coulomb potential energy in E0."""
    pos = as_positions(config)
    e = 0.5 * np.sum(spec.stiffness * pos**2)
    if len(pos) > 1:
        e += np.sum(1.0 / pdist(pos))
    return float(e)


def coulomb_forces(positions) -> np.ndarray:
    """Pairwise Coulomb forces in E0/l0 for positions in l0 (2D or 3D)."""
    pos = np.asarray(positions, dtype=float)
    if len(pos) < 2:
        return np.zeros_like(pos)
    diff, r2 = _pair_geometry(pos)
    return np.sum(diff / (r2 * np.sqrt(r2))[:, :, None], axis=1)


def forces(config, spec: PotentialSpec) -> np.ndarray:
    """Negative energy gradient, N x 3 in E0/l0."""
    pos = as_positions(config)
    return -spec.stiffness * pos + coulomb_forces(pos)


def energy_hessian(config, spec: PotentialSpec) -> np.ndarray:
    """3N x 3N second-derivative matrix of :func:`total_energy` (units E0/l0**2)."""
    pos = as_positions(config)
    n = len(pos)
    h = np.zeros((n, 3, n, 3))
    if n > 1:
        diff, r2 = _pair_geometry(pos)
        np.fill_diagonal(r2, 1.0)
        r5 = r2**2.5
        eye = np.eye(3)
        blocks = (3.0 * diff[:, :, :, None] * diff[:, :, None, :] - r2[:, :, None, None] * eye) / r5[:, :, None, None]
        idx = np.arange(n)
        blocks[idx, idx] = 0.0
        h -= blocks.transpose(0, 2, 1, 3)
        h[idx, :, idx, :] += blocks.sum(axis=1)
    h[np.arange(n), :, np.arange(n), :] += np.diag(spec.stiffness)
    h = h.reshape(3 * n, 3 * n)
    return 0.5 * (h + h.T)


# ---------------------------------------------------------------------------
# local relaxation


def relax(config, spec: PotentialSpec, tol: float = 1e-10, max_iters: int = 5000) -> IonConfiguration:
    """Local energy minimum reached from ``config``.

    Quasi-Newton descent followed by Newton polishing on the full Hessian
    until every force component is below ``tol``. Saddle points are escaped
    along the most negative curvature direction.
    """
    pos0 = as_positions(config)
    n = len(pos0)
    k = spec.stiffness

    def fun(x):
        p = x.reshape(n, 3)
        e = 0.5 * np.sum(k * p**2)
        g = k * p
        if n > 1:
            diff, r2 = _pair_geometry(p)
            inv = 1.0 / np.sqrt(r2)
            e += 0.5 * inv.sum()
            g = g - np.sum(diff * (inv**3)[:, :, None], axis=1)
        return e, g.ravel()

    x = pos0.ravel().copy()
    e, g = fun(x)
    e_start = e
    iters = 0
    for _ in range(20):
        if np.abs(g).max() < tol:
            break
        res = optimize.minimize(
            fun, x, jac=True, method="L-BFGS-B",
            options={"maxiter": max_iters, "maxcor": 30, "gtol": tol, "ftol": 0.0},
        )
        iters += res.nit
        if res.fun <= e:
            x, e, g = res.x, res.fun, res.jac
        for _newton in range(30):
            if np.abs(g).max() < tol:
                break
            w, v = np.linalg.eigh(energy_hessian(x.reshape(n, 3), spec))
            if w[0] < -1e-8 * max(1.0, w[-1]):
                x, e, g = _escape_saddle(fun, x, e, v[:, 0])
                break
            cutoff = 1e-10 * w[-1]
            inv = np.where(np.abs(w) > cutoff, 1.0 / np.where(np.abs(w) > cutoff, w, 1.0), 0.0)
            step = -v @ (inv * (v.T @ g))
            alpha = 1.0
            while alpha > 1e-6:
                e_new, g_new = fun(x + alpha * step)
                # energy changes near the minimum are below roundoff; accept on gradient decrease
                if e_new <= e + 1e-13 * abs(e) and np.abs(g_new).max() < np.abs(g).max():
                    break
                alpha *= 0.5
            else:
                break
            x, e, g = x + alpha * step, min(e, e_new), g_new
        if np.abs(g).max() < tol or iters > max_iters:
            break
    gmax = float(np.abs(g).max())
    if gmax >= tol:
        raise RelaxationError("relaxation did not converge", gmax)
    if e > e_start + 1e-12 * abs(e_start):
        raise RelaxationError("relaxation increased the energy", gmax)
    return IonConfiguration(x.reshape(n, 3))


def _escape_saddle(fun, x, e, direction):
    best = (x, e, fun(x)[1])
    for s in (0.05, -0.05):
        res = optimize.minimize(fun, x + s * direction, jac=True, method="L-BFGS-B",
                                options={"maxiter": 5000, "gtol": 1e-10, "ftol": 0.0})
        if res.fun < best[1]:
            best = (res.x, res.fun, res.jac)
    return best


# ---------------------------------------------------------------------------
# charged-fluid model


def aspect_ratio_theory(xi_inverse: float) -> float:
    """Aspect ratio of a planar crystal in the charged-fluid (thin ellipsoid) limit.

    Solves ``zeta**2 (K - E) / (E - zeta**2 K) = xi**-2`` for ``zeta`` in (0, 1],
    with K, E the complete elliptic integrals of modulus ``sqrt(1 - zeta**2)``.
    """
    if not 0 < xi_inverse <= 1:
        raise ValueError(f"xi_inverse must lie in (0, 1], got {xi_inverse!r}")
    if xi_inverse == 1:
        return 1.0
    target = xi_inverse**2

    def g(z):
        # K = R_F(0, z^2, 1) and K - E = (m/3) R_D(0, z^2, 1); the factor m cancels
        rf = special.elliprf(0.0, z * z, 1.0)
        rd3 = special.elliprd(0.0, z * z, 1.0) / 3.0
        return z * z * rd3 / (rf - rd3) - target

    # g -> -target as z -> 0 and g -> 1 - target as z -> 1
    return float(optimize.brentq(g, 1e-12, 1.0, xtol=1e-14, rtol=1e-14))


def fluid_semi_axes(n_ions: int, spec: PotentialSpec) -> tuple[float, float]:
    """Semi-axes ``(a_z, a_y)`` in l0 of the charged-fluid ellipse for the in-plane trap."""
    xi = spec.omega_y / spec.omega_z
    if xi >= 1:
        zeta = aspect_ratio_theory(1.0 / xi)
        soft = 1.0
    else:
        zeta = aspect_ratio_theory(xi)
        soft = xi**2
    # force balance along the major axis: (3N/2) J(1, zeta) / a**3 = stiffness
    j, _ = integrate.quad(lambda s: 1.0 / ((1 + s) ** 1.5 * math.sqrt((zeta**2 + s) * s)), 0, np.inf, limit=200)
    a_major = (1.5 * n_ions * j / soft) ** (1.0 / 3.0)
    if xi >= 1:
        return a_major, zeta * a_major
    return zeta * a_major, a_major


def aspect_ratio_measured(config) -> float:
    """``sqrt(lambda_2 / lambda_1)`` of the covariance of the in-plane positions."""
    pos = as_positions(config)
    if len(pos) < 3:
        raise ConfigurationError("aspect ratio needs at least 3 ions")
    lam = np.linalg.eigvalsh(np.cov(pos[:, 1:].T))
    if lam[0] <= 1e-12 * lam[1]:
        raise ConfigurationError("collinear configuration: covariance is degenerate")
    return float(math.sqrt(lam[0] / lam[1]))


def is_planar(config, tol: float = 1e-6) -> tuple[bool, float]:
    """Whether every ion lies within ``tol`` of the x = 0 plane, plus the largest excursion."""
    pos = as_positions(config)
    excursion = float(np.abs(pos[:, 0]).max())
    return excursion < tol, excursion


# ---------------------------------------------------------------------------
# simulated annealing


@dataclass(frozen=True)
class AnnealSchedule:
    start_temp: float = 0.1
    end_temp: float = 1e-6
    sweeps: int = 2000
    step_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not self.start_temp > self.end_temp > 0:
            raise ValueError("need start_temp > end_temp > 0")
        if self.sweeps < 1:
            raise ValueError("sweeps must be >= 1")

    def temperatures(self) -> np.ndarray:
        if self.sweeps == 1:
            return np.array([self.start_temp])
        return self.start_temp * (self.end_temp / self.start_temp) ** (np.arange(self.sweeps) / (self.sweeps - 1))

    def with_seed(self, seed: int) -> "AnnealSchedule":
        return AnnealSchedule(self.start_temp, self.end_temp, self.sweeps, self.step_scale, seed)


WARM_SCHEDULE = AnnealSchedule(start_temp=0.01, end_temp=1e-6, sweeps=4000, step_scale=0.1)


@njit(cache=True, nogil=True)
def _metropolis(pos, stiff, temps, steps, axis_scale, rand_disp, rand_acc):
    n = pos.shape[0]
    new = np.empty(3)
    accepted = 0
    for s in range(temps.shape[0]):
        beta = 1.0 / temps[s]
        for i in range(n):
            de = 0.0
            for d in range(3):
                new[d] = pos[i, d] + steps[s] * axis_scale[d] * (2.0 * rand_disp[s, i, d] - 1.0)
                de += 0.5 * stiff[d] * (new[d] * new[d] - pos[i, d] * pos[i, d])
            for j in range(n):
                if j == i:
                    continue
                a0 = pos[i, 0] - pos[j, 0]
                a1 = pos[i, 1] - pos[j, 1]
                a2 = pos[i, 2] - pos[j, 2]
                b0 = new[0] - pos[j, 0]
                b1 = new[1] - pos[j, 1]
                b2 = new[2] - pos[j, 2]
                de += 1.0 / math.sqrt(b0 * b0 + b1 * b1 + b2 * b2) - 1.0 / math.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
            if de <= 0.0 or rand_acc[s, i] < math.exp(-de * beta):
                for d in range(3):
                    pos[i, d] = new[d]
                accepted += 1
    return accepted


def initial_positions(n_ions: int, spec: PotentialSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform random positions inside the charged-fluid ellipse, with a small out-of-plane jitter."""
    a_z, a_y = fluid_semi_axes(n_ions, spec)
    r = np.sqrt(rng.random(n_ions))
    t = rng.random(n_ions) * 2 * math.pi
    pos = np.empty((n_ions, 3))
    pos[:, 0] = 0.05 * (2 * rng.random(n_ions) - 1)
    pos[:, 1] = a_y * r * np.sin(t)
    pos[:, 2] = a_z * r * np.cos(t)
    return pos


def anneal(n_ions: int, spec: PotentialSpec, schedule: AnnealSchedule | None = None,
           initial=None) -> IonConfiguration:
    """Metropolis annealing followed by :func:`relax`; deterministic in ``schedule.seed``.

    ``initial`` warm-starts the chain from a given configuration instead of a
    random fill of the fluid-model ellipse.
    """
    if n_ions < 1:
        raise ValueError("n_ions must be >= 1")
    schedule = schedule or AnnealSchedule()
    rng = np.random.default_rng(schedule.seed)
    if initial is None:
        pos = initial_positions(n_ions, spec, rng)
    else:
        pos = np.array(as_positions(initial), dtype=float)
        if len(pos) != n_ions:
            raise ValueError("initial configuration has the wrong ion count")
    temps = schedule.temperatures()
    steps = schedule.step_scale * np.sqrt(temps / temps[0])
    stiff = spec.stiffness
    axis_scale = np.sqrt(stiff.min() / stiff)
    rand_disp = rng.random((schedule.sweeps, n_ions, 3))
    rand_acc = rng.random((schedule.sweeps, n_ions))
    _metropolis(pos, stiff, temps, steps, axis_scale, rand_disp, rand_acc)
    return relax(pos, spec)


# ---------------------------------------------------------------------------
# configuration identity and census


def _matches(a: np.ndarray, b: np.ndarray, tol: float) -> bool:
    """Permutation-invariant positional equality within ``tol``."""
    if a.shape != b.shape:
        return False
    d, idx = cKDTree(b).query(a)
    return bool(d.max() < tol and len(np.unique(idx)) == len(idx))


def symmetry_multiplicity(config, tol: float = 1e-4) -> int:
    """Number of distinct configurations among the in-plane sign-flip images (1, 2 or 4)."""
    pos = as_positions(config)
    stabilizer = sum(_matches(pos * f, pos, tol) for f in IN_PLANE_FLIPS)
    return 4 // stabilizer


def related_by_flip(a, b, tol: float = 1e-4):
    """The in-plane flip mapping ``a`` onto ``b`` (as a sign vector), or None."""
    pa, pb = as_positions(a), as_positions(b)
    for f in IN_PLANE_FLIPS:
        if _matches(pa * f, pb, tol):
            return f
    return None


@dataclass
class ConfigurationClass:
    representative: IonConfiguration
    energy: float
    multiplicity: int = 1
    occurrences: int = 1
    runs: list = field(default_factory=list)
    _distances: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._distances is None:
            self._distances = np.sort(pdist(self.representative.positions))

    def same_as(self, energy: float, distances: np.ndarray, energy_tol=1e-6, rel_tol=1e-3) -> bool:
        """Class identity: equal energy and element-wise equal sorted pair distances.

        Sorted pair distances are invariant under permutations and all sign
        flips, so mirror images fall into the same class.
        """
        if abs(energy - self.energy) >= energy_tol:
            return False
        d = self._distances
        return d.shape == distances.shape and bool(np.all(np.abs(d - distances) <= rel_tol * d))


class Census:
    """Accumulates relaxed configurations into classes (order-preserving)."""

    def __init__(self):
        self.classes: list[ConfigurationClass] = []

    def add(self, config: IonConfiguration, energy: float, run=None) -> ConfigurationClass:
        dist = np.sort(pdist(config.positions)) if config.n_ions > 1 else np.zeros(0)
        for c in self.classes:
            if c.same_as(energy, dist):
                c.occurrences += 1
                c.runs.append(run)
                return c
        c = ConfigurationClass(config, energy, symmetry_multiplicity(config), 1, [run], dist)
        self.classes.append(c)
        return c

    def sorted(self) -> list[ConfigurationClass]:
        return sorted(self.classes, key=lambda c: (c.energy, c.runs[0] if c.runs else 0))


def _run_all(jobs, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda f: f(), jobs))
    return [f() for f in jobs]


def enumerate_configurations(n_ions: int, spec: PotentialSpec, runs: int,
                             schedule: AnnealSchedule | None = None, threads: int = 1,
                             census: Census | None = None) -> list[ConfigurationClass]:
    """Anneal ``runs`` times (run k uses seed ``schedule.seed + k``) and class the results.

    Returns classes sorted by energy; the first entry is the ground state
    found. Results are merged in run order regardless of thread scheduling.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    schedule = schedule or AnnealSchedule()
    jobs = [lambda k=k: anneal(n_ions, spec, schedule.with_seed(schedule.seed + k)) for k in range(runs)]
    census = census if census is not None else Census()
    for k, cfg in enumerate(_run_all(jobs, threads)):
        census.add(cfg, total_energy(cfg, spec), run=k)
    return census.sorted()


# ---------------------------------------------------------------------------
# anisotropy sweep


@dataclass
class GapCurve:
    anisotropies: np.ndarray
    classes: list  # per anisotropy: list[ConfigurationClass] sorted by energy
    energy_scale_kelvin: float

    def gaps(self, i: int) -> np.ndarray:
        e = np.array([c.energy for c in self.classes[i]])
        return e - e[0]

    def gaps_mK(self, i: int) -> np.ndarray:
        return 1e3 * self.energy_scale_kelvin * self.gaps(i)

    def ground_gap(self) -> np.ndarray:
        """Energy of the first excited class above the ground class, per anisotropy (E0)."""
        return np.array([g[1] if len(g) > 1 else np.nan for g in map(self.gaps, range(len(self.classes)))])

    def ground_gap_mK(self) -> np.ndarray:
        return 1e3 * self.energy_scale_kelvin * self.ground_gap()

    def rows(self):
        for i, xi in enumerate(self.anisotropies):
            gaps = self.gaps_mK(i)
            for cid, c in enumerate(self.classes[i]):
                yield {"xi": float(xi), "class_id": cid, "energy_e0": c.energy,
                       "gap_mK": float(gaps[cid]), "occurrences": c.occurrences}


def anisotropy_sweep(n_ions: int, spec_base: PotentialSpec, xi_values, runs: int,
                     schedule: AnnealSchedule | None = None,
                     warm_schedule: AnnealSchedule | None = None,
                     warm_classes: int = 10, threads: int = 1) -> GapCurve:
    """Metastable-configuration census versus anisotropy with omega_z held fixed.

    Each anisotropy gets ``runs`` fresh annealing runs. The lowest
    ``warm_classes`` classes found at each neighbouring anisotropy are then
    re-annealed at this one with the slower ``warm_schedule`` and merged.
    """
    xi_values = np.asarray(list(xi_values), dtype=float)
    if xi_values.size == 0:
        raise ValueError("xi_values must be nonempty")
    schedule = schedule or AnnealSchedule()
    warm_schedule = warm_schedule or WARM_SCHEDULE
    specs = [spec_base.with_anisotropy(xi) for xi in xi_values]
    censuses = []
    for i, sp in enumerate(specs):
        c = Census()
        enumerate_configurations(n_ions, sp, runs, schedule.with_seed(schedule.seed + i * runs), threads, census=c)
        censuses.append(c)
        log.info("xi=%.4f: %d classes from %d runs", xi_values[i], len(c.classes), runs)
    fresh = [c.sorted()[:warm_classes] for c in censuses]
    for i, sp in enumerate(specs):
        starts = [cls.representative for j in (i - 1, i + 1) if 0 <= j < len(specs) for cls in fresh[j]]
        base = warm_schedule.seed + 1_000_000 * (i + 1)
        jobs = [lambda k=k, s=s: anneal(n_ions, sp, warm_schedule.with_seed(base + k), initial=s)
                for k, s in enumerate(starts)]
        for k, cfg in enumerate(_run_all(jobs, threads)):
            censuses[i].add(cfg, total_energy(cfg, sp), run=("warm", k))
    kelvin = gap_to_temperature(1.0, UnitSystem.from_spec(spec_base))
    return GapCurve(xi_values, [c.sorted() for c in censuses], kelvin)


# ---------------------------------------------------------------------------
# file formats


def save_configuration(path, config, spec: PotentialSpec | None = None, seed=None) -> None:
    """Write ``ion,x,y,z`` CSV (l0 units) plus a JSON sidecar ``<path>.json``."""
    pos = as_positions(config)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ion", "x", "y", "z"])
        for i, (x, y, z) in enumerate(pos):
            w.writerow([i, repr(float(x)), repr(float(y)), repr(float(z))])
    meta = {"n_ions": len(pos), "seed": seed, "spec": spec.to_dict() if spec else None}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_configuration(path) -> IonConfiguration:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["ion"]))
    return IonConfiguration([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])


def save_gap_curve(path, curve: GapCurve) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["xi", "class_id", "energy_e0", "gap_mK", "occurrences"])
        w.writeheader()
        for row in curve.rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
