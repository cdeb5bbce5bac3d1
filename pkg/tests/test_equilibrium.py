import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from planarion import equilibrium as eq
from planarion.trapmath import PotentialSpec, planarity_criterion, planarity_threshold

ISO = PotentialSpec(10.0, 1.0, 1.0)  # xi = 1, strongly planar
D2 = 2 ** (1 / 3)  # two-ion separation in l0


def two_ion_pair(sep=D2):
    return np.array([[0, 0, -sep / 2], [0, 0, sep / 2]])


def test_single_ion_energy_and_force():
    spec = PotentialSpec(3.0, 2.0, 1.0)
    assert eq.total_energy([[0, 0, 0]], spec) == 0.0
    np.testing.assert_allclose(eq.forces([[1, 0, 0]], spec), [[-9.0, 0, 0]])


def test_two_ion_minimum_energy():
    # E(d) = d**2/4 + 1/d is minimal at d = 2**(1/3), where E = 1.5 * 2**(-1/3)
    assert eq.total_energy(two_ion_pair(), ISO) == pytest.approx(1.1905507889761495, rel=1e-14)


def test_two_ion_force_balance():
    np.testing.assert_allclose(eq.forces(two_ion_pair(), ISO), 0.0, atol=1e-10)


def test_coincident_ions_rejected():
    with pytest.raises(eq.ConfigurationError, match="coincident"):
        eq.total_energy([[0, 0, 1.0], [0, 0, 1.0]], ISO)
    with pytest.raises(eq.ConfigurationError):
        eq.forces([[0, 0, 1.0], [0, 0, 1.0]], ISO)


def _fd_forces(pos, spec, h=1e-6):
    out = np.zeros_like(pos)
    for idx in np.ndindex(pos.shape):
        p, m = pos.copy(), pos.copy()
        p[idx] += h
        m[idx] -= h
        out[idx] = -(eq.total_energy(p, spec) - eq.total_energy(m, spec)) / (2 * h)
    return out


def test_forces_match_finite_differences(rng):
    spec = PotentialSpec(5.0, 1.4, 1.0)
    pos = rng.normal(scale=2.0, size=(10, 3))
    fd = _fd_forces(pos, spec)
    f = eq.forces(pos, spec)
    assert np.linalg.norm(f - fd) / np.linalg.norm(f) < 1e-6


def test_hessian_matches_finite_differences(rng):
    spec = PotentialSpec(5.0, 1.4, 1.0)
    pos = rng.normal(scale=2.0, size=(6, 3))
    h = 1e-6
    fd = np.zeros((18, 18))
    for k in range(18):
        p, m = pos.ravel().copy(), pos.ravel().copy()
        p[k] += h
        m[k] -= h
        fd[:, k] = -(eq.forces(p.reshape(6, 3), spec) - eq.forces(m.reshape(6, 3), spec)).ravel() / (2 * h)
    np.testing.assert_allclose(eq.energy_hessian(pos, spec), fd, rtol=1e-5, atol=1e-6)


def test_relax_two_ions_to_analytic_separation():
    start = np.array([[0.01, 0.02, -0.4], [-0.01, 0.0, 0.9]])
    spec = PotentialSpec(10.0, 3.0, 1.0)
    c = eq.relax(start, spec)
    d = c.positions[1] - c.positions[0]
    assert np.linalg.norm(d) == pytest.approx(D2, abs=1e-8)
    assert abs(abs(d[2]) - D2) < 1e-8


def test_relax_fixed_point():
    c = eq.relax(two_ion_pair(), ISO)
    np.testing.assert_allclose(c.positions, two_ion_pair(), atol=1e-10)


def test_relax_91_converges(crystal91, census_spec):
    assert np.abs(eq.forces(crystal91, census_spec)).max() < 1e-10


def test_relax_error_reports_gradient():
    with pytest.raises(eq.RelaxationError) as info:
        eq.relax(np.random.default_rng(0).normal(size=(30, 3)) * 3, PotentialSpec(5.0, 1.4, 1.0), tol=1e-30)
    assert info.value.grad_norm > 0


def test_anneal_two_ions_reaches_global_minimum():
    for seed in range(5):
        c = eq.anneal(2, ISO, eq.AnnealSchedule(sweeps=200, seed=seed))
        assert eq.total_energy(c, ISO) == pytest.approx(1.5 * 2 ** (-1 / 3), rel=1e-12)


def test_anneal_deterministic():
    spec = PotentialSpec.from_hz(2120e3, 720e3, 370e3)
    a = eq.anneal(20, spec, eq.AnnealSchedule(sweeps=300, seed=7))
    b = eq.anneal(20, spec, eq.AnnealSchedule(sweeps=300, seed=7))
    assert np.array_equal(a.positions, b.positions)


def test_anneal_warm_start_checks_count():
    with pytest.raises(ValueError):
        eq.anneal(3, ISO, initial=two_ion_pair())


def test_two_ions_single_class():
    classes = eq.enumerate_configurations(2, ISO, 4, eq.AnnealSchedule(sweeps=100))
    assert len(classes) == 1
    assert classes[0].occurrences == 4


def test_zigzag_mirror_pair_is_one_class():
    spec = PotentialSpec(10.0, 4.0, 1.0)
    classes = eq.enumerate_configurations(10, spec, 6, eq.AnnealSchedule(sweeps=500))
    assert len(classes) == 1
    assert classes[0].multiplicity == 2
    zz = classes[0].representative
    mirror = zz.flipped([1, -1, 1])
    assert eq.total_energy(mirror, spec) == pytest.approx(eq.total_energy(zz, spec), rel=1e-14)
    assert not eq._matches(mirror.positions, zz.positions, 1e-4)


def test_multiplicity_of_symmetric_and_asymmetric():
    square = np.array([[0, 1, 1], [0, -1, 1], [0, 1, -1], [0, -1, -1.0]])
    assert eq.symmetry_multiplicity(square) == 1
    skew = np.array([[0, 0.3, 1.1], [0, -1, 0.2], [0, 0.7, -0.9]])
    assert eq.symmetry_multiplicity(skew) == 4
    assert eq.related_by_flip(skew, skew * [1, -1, -1]).tolist() == [1, -1, -1]
    assert eq.related_by_flip(skew, skew + 0.5) is None


def test_census_classes_closed_under_flips(census_spec):
    spec = census_spec.with_anisotropy(1.915)
    cfg = eq.anneal(40, spec, eq.AnnealSchedule(sweeps=400, seed=3))
    census = eq.Census()
    for f in eq.IN_PLANE_FLIPS:
        census.add(cfg.flipped(f), eq.total_energy(cfg.flipped(f), spec))
    assert len(census.classes) == 1
    assert census.classes[0].occurrences == 4


def test_aspect_ratio_measured():
    square = np.array([[0, 1, 1], [0, -1, 1], [0, 1, -1], [0, -1, -1.0]])
    assert eq.aspect_ratio_measured(square) == pytest.approx(1.0)
    chain = np.array([[0, 0, z] for z in (-1.0, 0.0, 1.0, 2.0)])
    with pytest.raises(eq.ConfigurationError, match="collinear"):
        eq.aspect_ratio_measured(chain)


def test_aspect_ratio_theory_limits():
    assert eq.aspect_ratio_theory(1.0) == 1.0
    with pytest.raises(ValueError):
        eq.aspect_ratio_theory(0.0)
    with pytest.raises(ValueError):
        eq.aspect_ratio_theory(1.2)


def _eq2_residual(zeta, xi_inv):
    from scipy.special import ellipe, ellipk

    m = 1 - zeta**2
    k, e = ellipk(m), ellipe(m)
    return zeta**2 * (k - e) / (e - zeta**2 * k) - xi_inv**2


@settings(max_examples=40, deadline=None)
@given(xi_inv=st.floats(0.05, 0.999))
def test_aspect_ratio_theory_solves_fluid_relation(xi_inv):
    zeta = eq.aspect_ratio_theory(xi_inv)
    assert 0 < zeta < 1
    assert abs(_eq2_residual(zeta, xi_inv)) < 1e-8
    # the fluid ellipse is never rounder than the trap
    assert zeta <= xi_inv + 0.02


@settings(max_examples=20, deadline=None)
@given(a=st.floats(0.05, 0.95), b=st.floats(0.05, 0.95))
def test_aspect_ratio_theory_monotone(a, b):
    lo, hi = sorted((a, b))
    assert eq.aspect_ratio_theory(lo) <= eq.aspect_ratio_theory(hi) + 1e-12


def test_is_planar():
    flat = np.array([[0, 0.0, 1.0], [0, 1.0, 0.0], [0, -1.0, -1.0]])
    assert eq.is_planar(flat) == (True, 0.0)
    ok, exc = eq.is_planar(flat + [[1e-3, 0, 0], [0, 0, 0], [0, 0, 0]])
    assert not ok and exc == pytest.approx(1e-3)


def test_relaxed_91_planar(crystal91, census_spec):
    assert planarity_criterion(census_spec, 91).planar
    assert eq.is_planar(crystal91)[0]


def test_buckling_below_threshold(crystal91, census_spec):
    # 2% below the planarity threshold the crystal buckles at its centre
    wx = 0.98 * planarity_threshold(91) * math.sqrt(census_spec.omega_y * census_spec.omega_z)
    soft = PotentialSpec(wx, census_spec.omega_y, census_spec.omega_z)
    assert planarity_criterion(soft, 91).margin < 0
    pos = crystal91.positions.copy()
    pos[:, 0] += 1e-4 * np.random.default_rng(0).normal(size=91)
    buckled = eq.relax(pos, soft)
    ok, exc = eq.is_planar(buckled)
    assert not ok and exc > 1e-2
    x = np.abs(buckled.positions[:, 0])
    radius = np.hypot(buckled.positions[:, 1] * census_spec.anisotropy, buckled.positions[:, 2])
    out = x > 1e-3
    assert radius[out].mean() < 0.7 * radius.mean()
    assert np.sum(radius < radius[np.argmax(x)]) < 10


def test_fluid_semi_axes_match_crystal_moments(crystal91, census_spec):
    a_z, a_y = eq.fluid_semi_axes(91, census_spec)
    assert a_y / a_z == pytest.approx(eq.aspect_ratio_theory(1 / census_spec.anisotropy))
    # the projected fluid ellipsoid has <z**2> = a_z**2 / 5
    widths = np.sqrt(5 * crystal91.positions[:, 1:].var(axis=0))
    np.testing.assert_allclose(widths, [a_y, a_z], rtol=0.1)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-3, 3)))
def test_energy_invariant_under_flips(pos):
    if eq.pdist(pos).min() < 1e-3:
        return
    spec = PotentialSpec(4.0, 1.5, 1.0)
    e = eq.total_energy(pos, spec)
    for f in ([-1, 1, 1], [1, -1, 1], [1, 1, -1], [-1, -1, -1]):
        assert eq.total_energy(pos * f, spec) == pytest.approx(e, rel=1e-13)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-3, 3)))
def test_coulomb_forces_sum_to_zero(pos):
    if eq.pdist(pos).min() < 1e-2:
        return
    f = eq.coulomb_forces(pos)
    assert np.abs(f.sum(axis=0)).max() < 1e-9 * max(1.0, np.abs(f).max())


def test_configuration_roundtrip(tmp_path, crystal8, small_spec):
    path = tmp_path / "c.csv"
    eq.save_configuration(path, crystal8, small_spec, seed=1)
    back = eq.load_configuration(path)
    assert np.array_equal(back.positions, crystal8.positions)
    assert (tmp_path / "c.csv.json").exists()


@pytest.mark.slow
def test_symmetric_ground_state_at_peak_gap(sweep):
    curve, _ = sweep
    i = list(curve.anisotropies).index(1.987)
    assert curve.classes[i][0].multiplicity == 1
