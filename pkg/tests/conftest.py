import numpy as np
import pytest

import ionlattice as il

# the three crystal configurations of the reference experiment:
# (n, axial kHz, nominal radial kHz, soft-axis split)
STRING8 = (8, 71.0, 350.0, 0.0)
ZIGZAG4 = (4, 87.0, 185.0, 0.05)
OCTA6 = (6, 105.0, 192.0, 0.05)


def make_trap(n_wz_wr_split):
    _, wz_khz, wr_khz, split = n_wz_wr_split
    wz = 2 * np.pi * wz_khz * 1e3
    wx = 2 * np.pi * wr_khz * 1e3
    return il.TrapParameters(omega_z=wz, omega_x=wx, omega_y=wx * (1 - split))


def solve_preset(preset, seed=0):
    trap = make_trap(preset)
    cfg = il.solve_equilibrium(preset[0], trap.alpha, trap.beta, seed=seed)
    return trap, cfg


@pytest.fixture(scope="session")
def species():
    return il.IonSpecies()


@pytest.fixture(scope="session")
def string8():
    return solve_preset(STRING8)


@pytest.fixture(scope="session")
def zigzag4():
    return solve_preset(ZIGZAG4)


@pytest.fixture(scope="session")
def octa6():
    return solve_preset(OCTA6)
