"""From ion positions to trap curvature, and from a wanted change to electrode voltages.

The first half reads the trap potential back out of a simulated crystal
image (the trap force on every ion balances its Coulomb force). The
second half asks the 12-electrode synthetic trap for the voltages that
undo a small rotation of the potential.
"""
import math

import numpy as np

from planarion import equilibrium as eq
from planarion import potfit as pf
from planarion import voltages as vt
from planarion.trapmath import PotentialSpec

spec = PotentialSpec.from_hz(2196e3, 680e3, 343e3).with_anisotropy(1 / 0.499)
crystal = eq.anneal(91, spec, eq.AnnealSchedule(seed=0))

# a camera sees the crystal slightly rotated and in pixels
phi = 0.02
rot = np.array([[math.cos(phi), math.sin(phi)], [-math.sin(phi), math.cos(phi)]])
px_per_um = 1 / 0.8
pix = crystal.positions[:, 1:] @ rot.T * spec.units().length_scale * 1e6 * px_per_um

scale = pf.calibrate_scale(pix, spec.omega_z, spec)
pos_m = pix * scale
fit = pf.fit_quadratic(pos_m, pf.coulomb_force_field(pos_m, length_scale=1.0))
res = pf.residuals(pos_m, pf.coulomb_force_field(pos_m, length_scale=1.0), fit)
print(f"scale {scale * 1e6:.4f} um/px (true {1 / px_per_um:.4f})")
print(f"xi_inv {fit.xi_inv:.4f} (true 0.499), rotation {fit.phi:.4f} rad (true {phi}), rms residual {res.rms:.1e} N")

basis = vt.build_basis()
print("basis singular values:", np.array2string(np.linalg.svd(basis.matrix, compute_uv=False), precision=3))

# undo the rotation: the energy cross term k_yz y z equals q U4 2yz, so remove it
k_yz = fit.matrix[0, 1]
target = vt.TargetAction.from_terms(U4=-k_yz / (2 * spec.charge))
sol = vt.solve_tikhonov(basis, target, compliance=10.0)
for name, v in zip(sol.names, sol.voltages):
    print(f"  {name:10s} {v:+.4f} V")
achieved, resid = vt.achieved_action(basis, sol, target)
print(f"achieved U4 {achieved.quadrupole[3]:.4g} V/m^2 for target {target.change.quadrupole[3]:.4g}, residual {resid:.2e}")
