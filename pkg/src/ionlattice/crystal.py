"""Equilibrium structures of small ion Coulomb crystals.

Ions in a linear rf trap are described in the pseudopotential
approximation by the dimensionless potential

    V = sum_m (alpha*x_m^2 + beta*y_m^2 + z_m^2)/2 + sum_{m<n} 1/|r_m - r_n|

with lengths in units of the Coulomb length scale ``ell`` and energies in
units of ``e^2/(4 pi eps0 ell)``.  ``alpha = (omega_x/omega_z)^2`` and
``beta = (omega_y/omega_z)^2`` set the radial anisotropy.  This module
finds and classifies the minima of V and fits trap frequencies to
measured ion positions.
"""

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy import constants as sc
from scipy.optimize import least_squares, minimize

CA40_MASS = 40.0 * sc.atomic_mass

GRAD_TOL = 1e-10          # dimensionless gradient norm at convergence
SADDLE_EIG_TOL = -1e-10   # eigenvalues above this count as stable


class NonConvergenceError(RuntimeError):
    """Minimization failed to reach the required gradient norm."""


class CoincidentIonsError(ValueError):
    """Two ions share a position; the Coulomb energy diverges."""


class Structure(enum.Enum):
    LINEAR = "linear"
    PLANAR_ZIGZAG = "planar_zigzag"
    THREE_DIMENSIONAL = "three_dimensional"


@dataclass
class TrapParameters:
    """Pseudopotential and rf-drive description of a linear trap.

    Angular frequencies in rad/s.  ``q_rad`` defaults to the pure-rf
    pseudopotential relation q = 2*sqrt(2)*omega_rad/omega_rf; ``q_z``
    defaults to the measured axial bound 5e-4 of the reference setup.
    """

    omega_z: float
    omega_x: float
    omega_y: float
    omega_rf: float = 2 * np.pi * 3.98e6
    q_rad: float = None
    q_z: float = 5e-4

    def __post_init__(self):
        if self.q_rad is None:
            self.q_rad = 2 * np.sqrt(2) * max(self.omega_x, self.omega_y) / self.omega_rf
        for name in ("omega_z", "omega_x", "omega_y", "omega_rf"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("q_rad", "q_z"):
            q = getattr(self, name)
            if not 0 <= q < 0.9:
                raise ValueError(f"{name}={q} outside [0, 0.9)")
        for name in ("omega_x", "omega_y", "omega_z"):
            if getattr(self, name) >= self.omega_rf / 2:
                raise ValueError(f"{name} must be below omega_rf/2")

    @property
    def alpha(self):
        return (self.omega_x / self.omega_z) ** 2

    @property
    def beta(self):
        return (self.omega_y / self.omega_z) ** 2


@dataclass
class IonSpecies:
    """Atomic parameters of the trapped ion (defaults: 40Ca+).

    ``p12_p32_splitting`` is the fine-structure interval between the two
    P states; ``p12_linewidth`` the total decay rate of the P1/2 level.
    ``relative_p32_line_strength`` scales the P3/2 contribution to the
    dipole potential and scattering rate; the true coefficient is not
    pinned down here, only its sign effect is relied upon.
    """

    mass: float = CA40_MASS
    lattice_wavelength: float = 866e-9
    detection_wavelength: float = 397e-9
    p12_p32_splitting: float = 2 * np.pi * 6.7e12
    p12_linewidth: float = 2 * np.pi * 22.4e6
    branch_to_S: float = 0.94
    branch_leave_pinned_state: float = 0.97
    pump_efficiency: float = 0.98
    detector_efficiency: float = 1.7e-4
    relative_p32_line_strength: float = 0.5

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be > 0")
        for name in ("branch_to_S", "branch_leave_pinned_state",
                     "pump_efficiency", "detector_efficiency"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name}={p} outside [0, 1]")


@dataclass
class CrystalConfiguration:
    """An equilibrium arrangement of N ions in dimensionless units."""

    n_ions: int
    positions: np.ndarray          # (N, 3), units of the length scale ell
    alpha: float
    beta: float
    energy: float
    structure: Structure
    grad_norm: float = 0.0

    def to_dict(self):
        return {
            "n_ions": self.n_ions,
            "alpha": self.alpha,
            "beta": self.beta,
            "positions": self.positions.tolist(),
            "energy": self.energy,
            "structure": self.structure.value,
            "grad_norm": self.grad_norm,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            n_ions=int(d["n_ions"]),
            positions=np.asarray(d["positions"], dtype=float),
            alpha=float(d["alpha"]),
            beta=float(d["beta"]),
            energy=float(d["energy"]),
            structure=Structure(d["structure"]),
            grad_norm=float(d.get("grad_norm", 0.0)),
        )


def length_scale(species, omega_z):
    """Coulomb length scale ell = (e^2 / (4 pi eps0 M omega_z^2))^(1/3) in m."""
    if omega_z <= 0:
        raise ValueError("omega_z must be > 0")
    return (sc.e**2 / (4 * np.pi * sc.epsilon_0 * species.mass * omega_z**2)) ** (1 / 3)


def _pair_separations(positions):
    pos = np.atleast_2d(positions)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    return diff, dist


def total_potential(positions, alpha, beta):
    """Dimensionless potential energy of a configuration (N, 3)."""
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    n = pos.shape[0]
    trap = 0.5 * (alpha * pos[:, 0]**2 + beta * pos[:, 1]**2 + pos[:, 2]**2).sum()
    if n == 1:
        return trap
    _, dist = _pair_separations(pos)
    iu = np.triu_indices(n, k=1)
    if np.any(dist[iu] == 0.0):
        raise CoincidentIonsError("coincident ions in configuration")
    return trap + (1.0 / dist[iu]).sum()


def potential_gradient(positions, alpha, beta):
    """Analytic gradient of `total_potential`, shape (N, 3)."""
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    n = pos.shape[0]
    grad = pos * np.array([alpha, beta, 1.0])
    if n == 1:
        return grad
    diff, dist = _pair_separations(pos)
    np.fill_diagonal(dist, np.inf)
    if np.any(dist == 0.0):
        raise CoincidentIonsError("coincident ions in configuration")
    inv3 = dist**-3
    grad -= (diff * inv3[:, :, None]).sum(axis=1)
    return grad


def potential_hessian(positions, alpha, beta):
    """Hessian of the potential in block layout [x(1..N), y(1..N), z(1..N)].

    Returns a symmetric (3N, 3N) array; valid at any configuration, not
    only equilibria.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    n = pos.shape[0]
    diff, dist = _pair_separations(pos)
    np.fill_diagonal(dist, np.inf)
    inv3 = dist**-3
    inv5 = dist**-5
    # pair tensor k_{mn,ab} = d2 V_C / dr_m,a dr_n,b  for m != n
    pair = np.eye(3)[None, None] * inv3[:, :, None, None] \
        - 3.0 * diff[:, :, :, None] * diff[:, :, None, :] * inv5[:, :, None, None]
    pair[np.arange(n), np.arange(n)] = 0.0
    hess = np.zeros((n, 3, n, 3))
    hess += np.transpose(pair, (0, 2, 1, 3))
    hess[np.arange(n), :, np.arange(n), :] = -pair.sum(axis=1)
    hess[np.arange(n), 0, np.arange(n), 0] += alpha
    hess[np.arange(n), 1, np.arange(n), 1] += beta
    hess[np.arange(n), 2, np.arange(n), 2] += 1.0
    # reorder (ion, axis) -> axis-major blocks
    h = hess.transpose(1, 0, 3, 2).reshape(3 * n, 3 * n)
    return 0.5 * (h + h.T)


def _string_guess(n):
    # equally spaced axial lattice; spacing follows the ~2.02 N^-0.56
    # scaling of the central inter-ion distance in a harmonic string
    spacing = 2.018 / n**0.559 if n > 1 else 1.0
    z = (np.arange(n) - (n - 1) / 2) * spacing
    guess = np.zeros((n, 3))
    guess[:, 2] = z
    return guess


def _descend(x0, alpha, beta):
    """Quasi-Newton descent to a stationary point, then Newton polish."""
    n = x0.shape[0]

    def fun(x):
        return total_potential(x.reshape(n, 3), alpha, beta)

    def jac(x):
        return potential_gradient(x.reshape(n, 3), alpha, beta).ravel()

    res = minimize(fun, x0.ravel(), jac=jac, method="BFGS",
                   options={"gtol": 1e-8, "maxiter": 2000})
    x = res.x
    for _ in range(40):
        g = jac(x)
        if np.linalg.norm(g) < GRAD_TOL:
            break
        h = potential_hessian(x.reshape(n, 3), alpha, beta)
        # block layout differs from x layout: permute gradient accordingly
        perm = np.arange(3 * n).reshape(n, 3).T.ravel()
        step = np.zeros(3 * n)
        sol, *_ = np.linalg.lstsq(h, -g[perm], rcond=1e-12)
        step[perm] = sol
        # backtracking on the potential value
        f0 = fun(x)
        scale = 1.0
        for _ in range(30):
            xn = x + scale * step
            if fun(xn) <= f0 + 1e-15 * abs(f0):
                break
            scale *= 0.5
        x = xn
    pos = x.reshape(n, 3)
    return pos, np.linalg.norm(jac(x))


def solve_equilibrium(n, alpha, beta, seed=0, restarts=16, jitter=0.05):
    """Find the lowest equilibrium of ``n`` ions at anisotropy (alpha, beta).

    Runs ``restarts`` seeded descents from Gaussian-perturbed axial
    lattice guesses and keeps the lowest-energy stable minimum.
    Deterministic for a given seed.

    Returns
    -------
    CrystalConfiguration
        Positions recentred on the origin, gradient norm < 1e-10 and all
        Hessian eigenvalues >= -1e-10.
    """
    if n < 1:
        raise ValueError("need at least one ion")
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be > 0")
    if n == 1:
        pos = np.zeros((1, 3))
        return CrystalConfiguration(1, pos, alpha, beta, 0.0, Structure.LINEAR)

    base = _string_guess(n)
    streams = np.random.SeedSequence(seed).spawn(restarts)
    best = None
    for k in range(restarts):
        rng = np.random.default_rng(streams[k])
        x0 = base + jitter * rng.standard_normal((n, 3))
        try:
            pos, gnorm = _descend(x0, alpha, beta)
        except (CoincidentIonsError, np.linalg.LinAlgError):
            continue
        if gnorm >= GRAD_TOL:
            continue
        eigs = np.linalg.eigvalsh(potential_hessian(pos, alpha, beta))
        if eigs.min() < SADDLE_EIG_TOL:
            continue  # saddle: discard this restart
        energy = total_potential(pos, alpha, beta)
        if best is None or energy < best[0] - 1e-12:
            best = (energy, pos, gnorm)
    if best is None:
        raise NonConvergenceError(
            f"no stable equilibrium found for n={n} after {restarts} restarts")
    energy, pos, gnorm = best
    pos = pos - pos.mean(axis=0)  # exact center-of-charge at origin
    config = CrystalConfiguration(n, pos, alpha, beta, energy, Structure.LINEAR, gnorm)
    config.structure = classify_structure(config)
    return config


def refine_equilibrium(config, alpha, beta):
    """Re-converge an existing configuration at slightly different (alpha, beta)."""
    pos, gnorm = _descend(config.positions.copy(), alpha, beta)
    if gnorm >= GRAD_TOL:
        raise NonConvergenceError("warm-start refinement did not converge")
    pos = pos - pos.mean(axis=0)
    out = CrystalConfiguration(config.n_ions, pos, alpha, beta,
                               total_potential(pos, alpha, beta),
                               Structure.LINEAR, gnorm)
    out.structure = classify_structure(out)
    return out


def classify_structure(config, rel_tol=1e-6):
    """Classify a configuration as linear, planar zigzag or 3D.

    Linear: every radial excursion below ``rel_tol`` times the axial
    extent.  Planar: smallest principal-axis spread below ``rel_tol``
    times the largest (rotation-invariant).  Otherwise 3D.
    """
    pos = config.positions
    if config.n_ions == 1:
        return Structure.LINEAR
    axial_extent = pos[:, 2].max() - pos[:, 2].min()
    scale = max(axial_extent, 1.0)
    radial = np.sqrt(pos[:, 0]**2 + pos[:, 1]**2)
    if radial.max() < rel_tol * scale:
        return Structure.LINEAR
    centered = pos - pos.mean(axis=0)
    spreads = np.sqrt(np.maximum(np.linalg.eigvalsh(centered.T @ centered / config.n_ions), 0.0))
    if spreads[0] < rel_tol * spreads[-1]:
        return Structure.PLANAR_ZIGZAG
    return Structure.THREE_DIMENSIONAL


def s4_mismatch(config):
    """Distance (per ion, max) between the crystal and its S4 image.

    The S4 operation is a 90-degree rotation about the trap axis combined
    with reflection through the central transverse plane: (x, y, z) ->
    (y, -x, -z).  Ions are matched by nearest assignment.
    """
    from scipy.optimize import linear_sum_assignment

    pos = config.positions
    image = np.column_stack([pos[:, 1], -pos[:, 0], -pos[:, 2]])
    d2 = ((pos[:, None, :] - image[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(d2)
    return float(np.sqrt(d2[rows, cols].max()))


@dataclass
class TrapFit:
    trap: TrapParameters
    residual: float
    radial_ambiguous: bool = False


def refine_trap_frequencies(measured_positions, guess, species, seed=0):
    """Fit trap frequencies so calculated positions match measured ones.

    Parameters
    ----------
    measured_positions : array
        (N, 3) positions in metres, or (N, 2) image-plane positions
        (z, (x+y)/sqrt(2)) as seen by a camera at 45 degrees from the
        radial axes.
    guess : TrapParameters
        Starting frequencies, assumed within ~30% of the truth.
    species : IonSpecies

    Returns
    -------
    TrapFit
        Refined trap, rms position residual in metres, and a flag set
        when the crystal is linear and the radial frequencies carry no
        positional signal (they are then returned as the guess).
    """
    meas = np.asarray(measured_positions, dtype=float)
    n = meas.shape[0]
    image_plane = meas.shape[1] == 2
    from scipy.optimize import linear_sum_assignment

    base = solve_equilibrium(n, guess.alpha, guess.beta, seed=seed)
    linear = base.structure is Structure.LINEAR
    state = {"config": base}

    # parametrize the radial pair as (soft frequency, stiff/soft ratio):
    # the ratio is what survives an overall miscalibration of the guess,
    # and its >= 1 bound keeps the anisotropy plane from flipping
    x_is_stiff = guess.omega_x >= guess.omega_y
    w_soft0 = min(guess.omega_x, guess.omega_y)
    ratio0 = max(guess.omega_x, guess.omega_y) / w_soft0

    def unpack(params):
        if linear:
            return guess.omega_x, guess.omega_y, float(np.exp(params[0]))
        wz = float(np.exp(params[0]))
        w_soft = float(np.exp(params[1]))
        w_stiff = w_soft * float(np.exp(params[2]))
        return (w_stiff, w_soft, wz) if x_is_stiff else (w_soft, w_stiff, wz)

    def model_positions(omega_x, omega_y, omega_z):
        alpha = (omega_x / omega_z) ** 2
        beta = (omega_y / omega_z) ** 2
        cfg = refine_equilibrium(state["config"], alpha, beta)
        state["config"] = cfg
        phys = cfg.positions * length_scale(species, omega_z)
        if image_plane:
            return np.column_stack([phys[:, 2], (phys[:, 0] + phys[:, 1]) / np.sqrt(2)])
        return phys

    if linear:
        x0 = np.array([np.log(guess.omega_z)])
        lo, hi = x0 - np.log(1.5), x0 + np.log(1.5)
    else:
        x0 = np.array([np.log(guess.omega_z), np.log(w_soft0), np.log(ratio0)])
        lo = np.array([x0[0] - np.log(1.5), x0[1] - np.log(1.5),
                       max(0.0, x0[2] - np.log(1.3))])
        hi = np.array([x0[0] + np.log(1.5), x0[1] + np.log(1.5), x0[2] + np.log(1.3)])
    # weak pull toward the guess pins parameters the projected positions
    # do not constrain (e.g. the out-of-plane radial frequency of a
    # zigzag) without biasing well-constrained ones
    reg_scale = 1e-7  # metres of pseudo-residual per unit log-frequency

    def residuals(params):
        wx, wy, wz = unpack(params)
        model = model_positions(wx, wy, wz)
        d2 = ((model[:, None, :] - meas[None, :, :]) ** 2).sum(axis=2)
        rows, cols = linear_sum_assignment(d2)
        fit_res = (model[rows] - meas[cols]).ravel()
        return np.concatenate([fit_res, reg_scale * (params - x0)])

    sol = least_squares(residuals, x0, bounds=(lo, hi),
                        xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not sol.success:
        raise NonConvergenceError("trap frequency refinement failed: " + sol.message)
    wx, wy, wz = unpack(sol.x)
    rms = float(np.sqrt(np.mean(sol.fun[:-x0.size] ** 2)))
    trap = replace(guess, omega_x=wx, omega_y=wy, omega_z=wz)
    return TrapFit(trap=trap, residual=rms, radial_ambiguous=linear)
