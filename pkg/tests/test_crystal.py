import numpy as np
import pytest
from scipy import constants as sc

import ionlattice as il
from ionlattice.crystal import (
    CoincidentIonsError,
    potential_gradient,
    potential_hessian,
    total_potential,
)
from conftest import STRING8, make_trap, solve_preset

U2 = 0.25 ** (1 / 3)          # two-ion half separation, u^3 = 1/4
U3 = 1.25 ** (1 / 3)          # three-ion outer position, u^3 = 5/4


def test_length_scale_ca40():
    # direct formula evaluation with CODATA constants
    ell = il.length_scale(il.IonSpecies(), 2 * np.pi * 71e3)
    expected = (sc.e**2 / (4 * np.pi * sc.epsilon_0 * 40 * sc.atomic_mass
                           * (2 * np.pi * 71e3) ** 2)) ** (1 / 3)
    assert ell == pytest.approx(expected, rel=1e-12)
    assert ell == pytest.approx(25.94e-6, rel=1e-3)


def test_length_scale_scaling():
    species = il.IonSpecies()
    ell = il.length_scale(species, 2 * np.pi * 71e3)
    assert il.length_scale(species, 8 * 2 * np.pi * 71e3) == pytest.approx(ell / 4, rel=1e-12)


def test_string_spacing_of_order_20um(string8):
    # "of the order of ~20 um": the 8-ion string central gap lands at
    # ~16.5 um and the mean gap a little higher
    trap, cfg = string8
    ell = il.length_scale(il.IonSpecies(), trap.omega_z)
    z = np.sort(cfg.positions[:, 2]) * ell
    gaps = np.diff(z)
    assert 13e-6 < gaps[3] < 27e-6
    assert 13e-6 < gaps.mean() < 27e-6


def test_total_potential_single_ion_zero():
    assert total_potential(np.zeros((1, 3)), 5.0, 5.0) == 0.0


def test_total_potential_two_ion_analytic():
    pos = np.array([[0, 0, U2], [0, 0, -U2]])
    expected = U2**2 + 1 / (2 * U2)
    assert total_potential(pos, 10.0, 10.0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(1.1905507889761495, rel=1e-12)


def test_total_potential_relabeling_invariant():
    rng = np.random.default_rng(0)
    pos = rng.normal(0, 1, (5, 3))
    v1 = total_potential(pos, 2.0, 3.0)
    v2 = total_potential(pos[::-1], 2.0, 3.0)
    assert v1 == pytest.approx(v2, rel=1e-14)


def test_coincident_ions_rejected():
    pos = np.array([[0, 0, 0.5], [0, 0, 0.5]])
    with pytest.raises(CoincidentIonsError):
        total_potential(pos, 1.0, 1.0)
    with pytest.raises(CoincidentIonsError):
        potential_gradient(pos, 1.0, 1.0)


def test_gradient_zero_at_equilibrium():
    cfg = il.solve_equilibrium(5, 9.0, 11.0, seed=2)
    g = potential_gradient(cfg.positions, cfg.alpha, cfg.beta)
    assert np.linalg.norm(g) < 1e-10


def test_gradient_symmetric_stretch_two_ions():
    # d/du of V(u) = u^2 + 1/(2u) at u = 0.5 is -1
    pos = np.array([[0, 0, 0.5], [0, 0, -0.5]])
    g = potential_gradient(pos, 1e6, 1e6)  # effectively 1D
    stretch_derivative = g[0, 2] - g[1, 2]
    assert stretch_derivative == pytest.approx(-1.0, rel=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    pos = rng.normal(0, 1.0, (3, 3))
    alpha, beta = 2.0, 3.0
    g = potential_gradient(pos, alpha, beta)
    step = 1e-6
    for i in range(3):
        for a in range(3):
            dp, dm = pos.copy(), pos.copy()
            dp[i, a] += step
            dm[i, a] -= step
            fd = (total_potential(dp, alpha, beta) - total_potential(dm, alpha, beta)) / (2 * step)
            assert g[i, a] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_solve_two_and_three_ions_analytic():
    cfg2 = il.solve_equilibrium(2, 10.0, 10.0, seed=1)
    assert np.sort(cfg2.positions[:, 2]) == pytest.approx([-U2, U2], abs=1e-9)
    cfg3 = il.solve_equilibrium(3, 10.0, 10.0, seed=1)
    assert np.sort(cfg3.positions[:, 2]) == pytest.approx([-U3, 0.0, U3], abs=1e-9)


def test_solve_deterministic_given_seed():
    a = il.solve_equilibrium(5, 6.0, 7.0, seed=42)
    b = il.solve_equilibrium(5, 6.0, 7.0, seed=42)
    assert np.array_equal(a.positions, b.positions)
    assert a.energy == b.energy


def test_solve_centers_charge_and_is_stable():
    cfg = il.solve_equilibrium(6, 4.0, 3.6, seed=3)
    assert np.abs(cfg.positions.mean(axis=0)).max() < 1e-12
    eigs = np.linalg.eigvalsh(potential_hessian(cfg.positions, cfg.alpha, cfg.beta))
    assert eigs.min() > -1e-10


def test_solve_input_validation():
    with pytest.raises(ValueError):
        il.solve_equilibrium(0, 1.0, 1.0)
    with pytest.raises(ValueError):
        il.solve_equilibrium(2, -1.0, 1.0)


def test_classify_single_ion_linear():
    cfg = il.solve_equilibrium(1, 2.0, 2.0)
    assert cfg.structure is il.Structure.LINEAR


def test_classify_reference_structures(string8, zigzag4, octa6):
    assert string8[1].structure is il.Structure.LINEAR
    assert zigzag4[1].structure is il.Structure.PLANAR_ZIGZAG
    assert octa6[1].structure is il.Structure.THREE_DIMENSIONAL


def test_s4_symmetry_of_degenerate_octahedron():
    alpha = (192.0 / 105.0) ** 2
    cfg = il.solve_equilibrium(6, alpha, alpha, seed=0)
    assert cfg.structure is il.Structure.THREE_DIMENSIONAL
    assert il.s4_mismatch(cfg) < 1e-6


def test_positions_scale_exactly_with_length_scale():
    species = il.IonSpecies()
    cfg = il.solve_equilibrium(3, 10.0, 10.0, seed=0)
    for omega_z in (2 * np.pi * 71e3, 2 * np.pi * 105e3):
        phys = cfg.positions * il.length_scale(species, omega_z)
        ratio = phys / cfg.positions
        assert np.allclose(ratio[np.isfinite(ratio)], il.length_scale(species, omega_z))


def test_trap_parameters_validation():
    wz = 2 * np.pi * 71e3
    with pytest.raises(ValueError):
        il.TrapParameters(omega_z=-wz, omega_x=wz, omega_y=wz)
    with pytest.raises(ValueError):
        il.TrapParameters(omega_z=wz, omega_x=wz, omega_y=wz, q_rad=0.95)
    with pytest.raises(ValueError):
        il.TrapParameters(omega_z=wz, omega_x=wz, omega_y=wz,
                          omega_rf=wz)  # secular above omega_rf/2
    trap = make_trap(STRING8)
    assert 0 < trap.q_rad < 0.9


class TestRefineTrapFrequencies:
    def test_self_consistency(self, species):
        trap, cfg = solve_preset((4, 87.0, 185.0, 0.05))
        ell = il.length_scale(species, trap.omega_z)
        fit = il.refine_trap_frequencies(cfg.positions * ell, trap, species)
        assert fit.trap.omega_z == pytest.approx(trap.omega_z, rel=1e-6)
        assert fit.residual < 1e-9
        assert not fit.radial_ambiguous

    def test_recovers_perturbed_guess(self, species):
        trap, cfg = solve_preset((4, 87.0, 185.0, 0.05))
        ell = il.length_scale(species, trap.omega_z)
        guess = il.TrapParameters(omega_z=trap.omega_z * 1.2,
                                  omega_x=trap.omega_x * 1.2,
                                  omega_y=trap.omega_y * 1.2)
        fit = il.refine_trap_frequencies(cfg.positions * ell, guess, species)
        assert fit.trap.omega_z == pytest.approx(trap.omega_z, rel=1e-3)
        assert fit.trap.omega_y == pytest.approx(trap.omega_y, rel=1e-3)

    def test_linear_string_flags_radial_ambiguous(self, species, string8):
        trap, cfg = string8
        ell = il.length_scale(species, trap.omega_z)
        guess = il.TrapParameters(omega_z=trap.omega_z * 1.1,
                                  omega_x=trap.omega_x * 1.1,
                                  omega_y=trap.omega_y * 1.1)
        fit = il.refine_trap_frequencies(cfg.positions * ell, guess, species)
        assert fit.radial_ambiguous
        assert fit.trap.omega_x == guess.omega_x  # returned as the guess
        assert fit.trap.omega_z == pytest.approx(trap.omega_z, rel=1e-3)
