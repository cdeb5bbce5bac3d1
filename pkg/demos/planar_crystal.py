"""A 91-ion planar crystal: structure, shape and out-of-plane modes.

Run with ``python3 demos/planar_crystal.py``. Takes a few seconds.
"""
import math

import numpy as np

from planarion import equilibrium as eq
from planarion import modes
from planarion import rfdynamics as rf
from planarion.trapmath import TWO_PI, MathieuSpec, PotentialSpec, planarity_criterion

spec = PotentialSpec.from_hz(2196e3, 680e3, 343e3)
u = spec.units()
print(f"length scale l0 = {u.length_scale * 1e6:.2f} um, energy scale E0/kB = {u.energy_scale / 1.380649e-23:.3f} K")

# the strong x confinement has to beat a threshold that grows slowly with N
pl = planarity_criterion(spec, 91)
print(f"planarity ratio {pl.ratio:.3f} vs threshold {pl.threshold:.3f}: {'planar' if pl.planar else 'buckled'}")

crystal = eq.anneal(91, spec, eq.AnnealSchedule(seed=0))
planar, exc = eq.is_planar(crystal)
print(f"relaxed crystal: planar={planar}, max |x| = {exc:.1e} l0, energy {eq.total_energy(crystal, spec):.4f} E0")

# compare the measured shape with the charged-fluid prediction
xi_inv = spec.omega_z / spec.omega_y
print(f"aspect ratio: measured {eq.aspect_ratio_measured(crystal):.4f}, fluid model {eq.aspect_ratio_theory(xi_inv):.4f}")

spectrum = modes.mode_spectrum(crystal, spec)
_, fx = modes.out_of_plane_block(crystal, spec)
fx = np.sort(fx) / TWO_PI / 1e3
print(f"{len(spectrum.frequencies)} modes; out-of-plane band {fx[0]:.1f} .. {fx[-1]:.1f} kHz")

# push the x frequency 5% below threshold and watch the centre pop out of the plane
wx = 0.95 * pl.threshold * math.sqrt(spec.omega_y * spec.omega_z)
soft = PotentialSpec(wx, spec.omega_y, spec.omega_z)
pos = crystal.positions.copy()
pos[:, 0] += 1e-4 * np.random.default_rng(0).normal(size=91)
buckled = eq.relax(pos, soft)
x = np.abs(buckled.positions[:, 0])
print(f"omega_x = 2pi x {wx / TWO_PI / 1e3:.0f} kHz: {np.sum(x > 1e-3)} ions leave the plane, max |x| = {x.max():.3f} l0")

# full rf dynamics of a small crystal against the pseudopotential modes
spec8 = PotentialSpec.from_hz(2120e3, 720e3, 370e3)
c8 = eq.anneal(8, spec8, eq.AnnealSchedule(seed=1))
ms = MathieuSpec.from_potential(spec8, 0.1)
block, pred = modes.out_of_plane_block(c8, spec8)
_, vecs = np.linalg.eigh(block)
tr = rf.integrate(c8, ms, spec8.units(), duration=500e-6, initial_kick=rf.mode_kick(vecs, 0), record_every=10)
measured = rf.dominant_frequencies(rf.extract_frequencies_fft(tr, 0), f_max=ms.drive_freq / TWO_PI / 2)
err = rf.match_frequencies(measured, pred / TWO_PI)
print(f"8 ions, q = 0.1: worst deviation of FFT peaks from pseudopotential modes {100 * err.max():.2f}%")
