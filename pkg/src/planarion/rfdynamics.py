"""Time-dependent rf trap dynamics: velocity-Verlet trajectories and their spectra.

Equations of motion per axis d, with positions in l0 and time in seconds::

    x_d'' = -(Omega**2 / 4) (a_d + 2 q_d cos(Omega t)) x_d + omega_ref**2 * F_coulomb,d + stray_d

where ``omega_ref`` is the reference frequency of the unit system that
defines l0 (so the Coulomb term has the same form as in the crystal
energy model).
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy import signal

from .equilibrium import as_positions
from .trapmath import TWO_PI, MathieuSpec, UnitSystem, secular_frequencies

COLLISION_DISTANCE = 1e-6
TRAJ_MAGIC = b"PLNTRAJ1"


class IntegrationError(RuntimeError):
    pass


@dataclass
class RfTrajectory:
    times: np.ndarray  # (T,) seconds
    positions: np.ndarray  # (T, N, 3) l0
    velocities: np.ndarray  # (T, N, 3) l0/s
    mathieu: MathieuSpec

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def n_ions(self) -> int:
        return self.positions.shape[1]


@njit(cache=True, nogil=True)
def _accel(pos, t, omega, a, q, coul, stray, out):
    n = pos.shape[0]
    c = math.cos(omega * t)
    for d in range(3):
        k = omega * omega / 4.0 * (a[d] + 2.0 * q[d] * c)
        for i in range(n):
            out[i, d] = -k * pos[i, d] + stray[d]
    rmin2 = 1e300
    for i in range(n):
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 < rmin2:
                rmin2 = r2
            f = coul / (r2 * math.sqrt(r2))
            out[i, 0] += f * dx
            out[i, 1] += f * dy
            out[i, 2] += f * dz
            out[j, 0] -= f * dx
            out[j, 1] -= f * dy
            out[j, 2] -= f * dz
    return rmin2


@njit(cache=True, nogil=True)
def _verlet(pos, vel, t0, dt, n_steps, every, omega, a, q, coul, stray, rmin2_allowed, xs, vs):
    n = pos.shape[0]
    acc = np.empty((n, 3))
    acc_new = np.empty((n, 3))
    # collisions are reported as -(step + 1)
    if _accel(pos, t0, omega, a, q, coul, stray, acc) < rmin2_allowed:
        return -1
    xs[0] = pos
    vs[0] = vel
    rec = 1
    for s in range(1, n_steps + 1):
        t = t0 + s * dt
        for i in range(n):
            for d in range(3):
                pos[i, d] += vel[i, d] * dt + 0.5 * acc[i, d] * dt * dt
        rmin2 = _accel(pos, t, omega, a, q, coul, stray, acc_new)
        if rmin2 < rmin2_allowed:
            return -(s + 1)
        for i in range(n):
            for d in range(3):
                vel[i, d] += 0.5 * (acc[i, d] + acc_new[i, d]) * dt
                acc[i, d] = acc_new[i, d]
        if s % every == 0:
            xs[rec] = pos
            vs[rec] = vel
            rec += 1
    return rec


def rf_period(mathieu: MathieuSpec) -> float:
    return TWO_PI / mathieu.drive_freq


def stray_accel_for_offset(mathieu: MathieuSpec, offset) -> np.ndarray:
    """Uniform acceleration (l0/s^2) that holds a single ion at ``offset`` (l0) in the pseudopotential."""
    return secular_frequencies(mathieu) ** 2 * np.asarray(offset, dtype=float)


def make_kick(n_ions: int, axis: int, magnitude: float = 1e-3, seed: int | None = 0) -> np.ndarray:
    """Displacement kick (N x 3, l0) along ``axis``.

    With ``seed=None`` the kick is uniform, which excites only the
    centre-of-mass mode; otherwise each ion gets an independent amplitude
    in ``[-magnitude, magnitude]`` so that all modes polarized along
    ``axis`` are excited.
    """
    kick = np.zeros((n_ions, 3))
    if seed is None:
        kick[:, axis] = magnitude
    else:
        kick[:, axis] = magnitude * (2 * np.random.default_rng(seed).random(n_ions) - 1)
    return kick


def mode_kick(mode_vectors, axis: int, magnitude: float = 1e-3) -> np.ndarray:
    """Displacement kick with equal projection on every column of ``mode_vectors`` (N x M).

    Scaled so that the largest single-ion displacement equals ``magnitude``.
    """
    v = np.asarray(mode_vectors, dtype=float)
    v = v * np.sign(v.sum(axis=0) + (v.sum(axis=0) == 0))
    disp = v.sum(axis=1)
    kick = np.zeros((v.shape[0], 3))
    kick[:, axis] = magnitude * disp / np.abs(disp).max()
    return kick


def integrate(config, mathieu: MathieuSpec, units: UnitSystem, dt: float | None = None,
              duration: float | None = None, n_steps: int | None = None, initial_kick=None,
              initial_velocity=None, stray_accel=None, micromotion_init: bool = True,
              t0: float = 0.0, record_every: int = 1) -> RfTrajectory:
    """Integrate the full rf equations of motion with velocity Verlet.

    Parameters
    ----------
    config : IonConfiguration or (N, 3) array
        Secular (time-averaged) starting positions in l0.
    mathieu : MathieuSpec
        Drive frequency and Mathieu parameters; must be stable.
    units : UnitSystem
        Unit system defining l0 (sets the strength of the Coulomb term).
    dt : float, optional
        Time step in seconds, default rf period / 100. Must satisfy
        ``|dt| <= 2 pi / (50 Omega)``; a negative step integrates backwards.
    duration, n_steps
        Length of the run, either in seconds or in steps.
    initial_kick : (N, 3) array, optional
        Displacement added to the starting positions (l0).
    initial_velocity : (N, 3) array, optional
        Starting velocities in l0/s (default zero).
    stray_accel : (3,) array, optional
        Uniform static acceleration (l0/s^2), e.g. a stray field.
    micromotion_init : bool
        Start on the first-order micromotion orbit ``x_d (1 + q_d/2 cos(Omega t0))``
        with matching velocity, which avoids exciting secular motion.
    record_every : int
        Store every k-th step; the rf period must remain a multiple of the
        stored sampling interval for demodulation.
    """
    secular_frequencies(mathieu)  # raises on instability
    period = rf_period(mathieu)
    dt = period / 100.0 if dt is None else float(dt)
    if dt == 0 or abs(dt) > period / 50.0 * (1 + 1e-12):
        raise IntegrationError(f"time step {dt:.3g} s exceeds rf period / 50 = {period / 50:.3g} s")
    if n_steps is None:
        if duration is None:
            raise ValueError("give duration or n_steps")
        n_steps = int(round(abs(duration / dt)))
    pos = np.array(as_positions(config), dtype=float)
    if initial_kick is not None:
        pos = pos + np.asarray(initial_kick, dtype=float)
    vel = np.zeros_like(pos) if initial_velocity is None else np.array(initial_velocity, dtype=float)
    q = np.asarray(mathieu.q, dtype=float)
    a = np.asarray(mathieu.a, dtype=float)
    om = mathieu.drive_freq
    if micromotion_init:
        ph = om * t0
        vel = vel - pos * (q / 2) * om * math.sin(ph)
        pos = pos * (1 + q / 2 * math.cos(ph))
    stray = np.zeros(3) if stray_accel is None else np.asarray(stray_accel, dtype=float)
    n_rec = n_steps // record_every + 1
    xs = np.empty((n_rec, len(pos), 3))
    vs = np.empty((n_rec, len(pos), 3))
    status = _verlet(pos, vel, t0, dt, n_steps, record_every, om, a, q,
                     units.omega_ref**2, stray, COLLISION_DISTANCE**2, xs, vs)
    if status < 0:
        raise IntegrationError(f"ion collision at step {-status - 1}")
    times = t0 + dt * record_every * np.arange(n_rec)
    return RfTrajectory(times, xs, vs, mathieu)


@dataclass(frozen=True)
class Peak:
    ion: int
    axis: int
    freq_hz: float
    amplitude: float


def spectrum(traj: RfTrajectory, axis: int, ion: int):
    """Hann-windowed one-sided amplitude spectrum of one ion's displacement."""
    x = traj.positions[:, ion, axis]
    x = x - x.mean()
    win = signal.windows.hann(len(x), sym=False)
    mag = np.abs(np.fft.rfft(x * win)) * 2.0 / win.sum()
    freqs = np.fft.rfftfreq(len(x), traj.dt)
    return freqs, mag


def extract_frequencies_fft(traj: RfTrajectory, axis: int, ions=None, threshold: float = 10.0,
                            dynamic_range: float = 1e-3, min_amplitude: float = 1e-12,
                            min_samples: int = 2**14) -> list[Peak]:
    """Spectral peaks of per-ion displacement along ``axis``.

    A peak is a local maximum above ``threshold`` times the median spectral
    magnitude and above ``dynamic_range`` times the largest magnitude of
    that ion's spectrum. The second floor matters for noiseless simulations,
    where the median sits at round-off level and window leakage would
    otherwise produce spurious maxima. Peaks below ``min_amplitude`` (l0)
    are round-off in a static crystal and are dropped. Positions are refined by a parabola
    through the log magnitudes of the three bins around each peak.
    """
    if len(traj.times) < min_samples:
        raise ValueError(f"trajectory has {len(traj.times)} samples, need >= {min_samples}")
    ions = range(traj.n_ions) if ions is None else np.atleast_1d(ions)
    df = 1.0 / (len(traj.times) * abs(traj.dt))
    peaks = []
    for i in ions:
        if np.ptp(traj.positions[:, i, axis]) == 0:
            continue
        freqs, mag = spectrum(traj, axis, i)
        floor = np.median(mag)
        if floor == 0:
            floor = np.finfo(float).tiny
        height = max(threshold * floor, dynamic_range * mag.max(), min_amplitude)
        idx, _ = signal.find_peaks(mag, height=height)
        for k in idx:
            if k == 0 or k == len(mag) - 1:
                continue
            la, lb, lc = np.log(mag[k - 1:k + 2] + floor * 1e-12)
            denom = la - 2 * lb + lc
            delta = 0.5 * (la - lc) / denom if denom != 0 else 0.0
            amp = math.exp(lb - 0.25 * (la - lc) * delta)
            peaks.append(Peak(int(i), int(axis), float(freqs[k] + delta * df), float(amp)))
    return peaks


def dominant_frequencies(peaks, rel: float = 0.1, f_max: float | None = None,
                         merge_hz: float | None = None) -> np.ndarray:
    """Distinct peak frequencies (Hz) whose strongest amplitude over ions is >= ``rel`` of the overall maximum.

    Peaks closer than ``merge_hz`` (default: 0.1% of the frequency) are one line.
    """
    pk = [p for p in peaks if f_max is None or p.freq_hz < f_max]
    if not pk:
        return np.zeros(0)
    pk.sort(key=lambda p: p.freq_hz)
    groups = [[pk[0]]]
    for p in pk[1:]:
        tol = merge_hz if merge_hz is not None else 1e-3 * p.freq_hz
        if p.freq_hz - groups[-1][-1].freq_hz <= tol:
            groups[-1].append(p)
        else:
            groups.append([p])
    best = [max(g, key=lambda p: p.amplitude) for g in groups]
    top = max(p.amplitude for p in best)
    return np.array([p.freq_hz for p in best if p.amplitude >= rel * top])


def match_frequencies(measured, predicted) -> np.ndarray:
    """Relative distance from each predicted frequency to the nearest measured one."""
    m = np.asarray(measured, dtype=float)
    pr = np.asarray(predicted, dtype=float)
    if len(m) == 0:
        return np.full(len(pr), np.inf)
    return np.min(np.abs(m[None, :] - pr[:, None]), axis=1) / pr


def micromotion_amplitude(traj: RfTrajectory, drive_freq: float, per_axis: bool = False) -> np.ndarray:
    """Amplitude (l0) of each ion's position component at the drive frequency.

    Demodulates over the largest whole number of rf periods in the record.
    """
    period = TWO_PI / drive_freq
    per = period / abs(traj.dt)
    spp = int(round(per))
    if abs(per - spp) > 1e-6 * per:
        raise ValueError("sampling interval does not divide the rf period")
    n = (len(traj.times) // spp) * spp
    if n == 0:
        raise ValueError("trajectory shorter than one rf period")
    t = traj.times[:n]
    ph = np.exp(-1j * drive_freq * t)
    amp = 2.0 * np.abs(np.einsum("t,tnd->nd", ph, traj.positions[:n])) / n
    return amp if per_axis else np.sqrt(np.sum(amp**2, axis=1))


def save_trajectory(path, traj: RfTrajectory) -> None:
    """Binary record: magic, little-endian u64 header length, JSON header, then float64 data."""
    header = {
        "shape": list(traj.positions.shape),
        "dt": traj.dt,
        "t0": float(traj.times[0]),
        "mathieu": traj.mathieu.to_dict(),
        "layout": ["positions", "velocities"],
        "dtype": "<f8",
    }
    hb = json.dumps(header).encode()
    with Path(path).open("wb") as fh:
        fh.write(TRAJ_MAGIC + struct.pack("<Q", len(hb)) + hb)
        fh.write(np.ascontiguousarray(traj.positions, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.velocities, dtype="<f8").tobytes())


def load_trajectory(path) -> RfTrajectory:
    raw = Path(path).read_bytes()
    if raw[:8] != TRAJ_MAGIC:
        raise ValueError("not a trajectory file")
    (hl,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hl])
    shape = tuple(header["shape"])
    size = int(np.prod(shape))
    data = np.frombuffer(raw, dtype="<f8", offset=16 + hl)
    pos = data[:size].reshape(shape).astype(float)
    vel = data[size:2 * size].reshape(shape).astype(float)
    times = header["t0"] + header["dt"] * np.arange(shape[0])
    return RfTrajectory(times, pos, vel, MathieuSpec.from_dict(header["mathieu"]))


def save_peaks(path, peaks) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ion", "axis", "freq_hz", "amplitude"])
        for p in peaks:
            w.writerow([p.ion, "xyz"[p.axis], repr(p.freq_hz), repr(p.amplitude)])
