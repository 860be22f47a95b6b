"""Normal modes of an ion crystal and the projection factors for thermometry.

The 3N modes diagonalize the Hessian of the dimensionless crystal
potential; eigenvalues ``lambda_p`` give mode frequencies ``omega_p =
omega_z * sqrt(lambda_p)``.  The per-ion gamma factors

    gamma_{m,u}^2 = sum_p (b_{m_u+m}^p)^2 / lambda_p

relate an ion's thermal position variance along direction u to the
temperature via <du_m^2> = (kB T / M omega_z^2) * gamma_{m,u}^2, with
the camera's 45-degree radial projection handled by gamma_rad.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import constants as sc

from .crystal import potential_gradient, potential_hessian

ZERO_MODE_TOL = 1e-8       # eigenvalues below this count as zero modes
UNSTABLE_TOL = -1e-10


class UnstableModesError(ValueError):
    """One or more mode eigenvalues are negative."""

    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"unstable modes at indices {self.indices}")


@dataclass
class ModeSpectrum:
    """Eigenvalues/eigenvectors of the dimensionless Hessian.

    Eigenvector columns are ordered by ascending eigenvalue and use the
    block index convention [x: 0..N-1, y: N..2N-1, z: 2N..3N-1].
    """

    eigenvalues: np.ndarray        # (3N,), ascending
    eigenvectors: np.ndarray       # (3N, 3N), orthonormal columns
    omega_z_ref: float = float("nan")

    @property
    def n_ions(self):
        return self.eigenvalues.size // 3

    def zero_mode_indices(self):
        return [int(i) for i in np.flatnonzero(self.eigenvalues < ZERO_MODE_TOL)]

    def to_dict(self):
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenvectors": self.eigenvectors.ravel().tolist(),
            "omega_z_ref": self.omega_z_ref,
            "zero_modes": self.zero_mode_indices(),
        }


@dataclass
class GammaFactors:
    """Per-ion position-variance projection constants."""

    gamma_x: np.ndarray
    gamma_y: np.ndarray
    gamma_z: np.ndarray
    gamma_rad: np.ndarray          # camera plane at 45 deg from x and y
    excluded_modes: list = field(default_factory=list)


def build_hessian(config, grad_tol=1e-8):
    """Hessian of the crystal potential at an equilibrium configuration.

    Rejects non-equilibrium input (gradient norm >= ``grad_tol``).
    """
    gnorm = np.linalg.norm(potential_gradient(config.positions, config.alpha, config.beta))
    if gnorm >= grad_tol:
        raise ValueError(f"configuration is not an equilibrium (|grad| = {gnorm:.2e})")
    return potential_hessian(config.positions, config.alpha, config.beta)


def _jacobi_eigh(matrix, off_tol=1e-12, max_sweeps=60):
    """Cyclic Jacobi diagonalization of a dense symmetric matrix.

    Deterministic and dependency-free; adequate for the 3N x 3N
    (N <= ~20) matrices handled here.
    """
    a = np.array(matrix, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < off_tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < off_tol / (n * n):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    else:
        raise RuntimeError("Jacobi diagonalization did not converge")
    return np.diag(a).copy(), v


def eigenmodes(hessian, omega_z_ref=float("nan")):
    """Diagonalize a symmetric Hessian into a ModeSpectrum.

    Modes are sorted by ascending eigenvalue; ties are broken by
    lexicographic eigenvector comparison and each eigenvector's
    largest-magnitude component is made positive, so the output is
    reproducible bit-for-bit.
    """
    h = np.asarray(hessian, dtype=float)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError("hessian must be square")
    scale = max(1.0, np.abs(h).max())
    if np.abs(h - h.T).max() > 1e-10 * scale:
        raise ValueError("hessian must be symmetric")
    vals, vecs = _jacobi_eigh(h)
    # canonical sign: largest-|component| entry positive
    for j in range(vecs.shape[1]):
        i = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[i, j] < 0:
            vecs[:, j] = -vecs[:, j]
    order = sorted(range(vals.size),
                   key=lambda j: (round(vals[j] / 1e-10), tuple(vecs[:, j])))
    order = np.array(order)
    return ModeSpectrum(eigenvalues=vals[order], eigenvectors=vecs[:, order],
                        omega_z_ref=omega_z_ref)


def crystal_spectrum(config, omega_z=float("nan")):
    """Convenience: Hessian + eigenmodes of an equilibrium configuration."""
    return eigenmodes(build_hessian(config), omega_z_ref=omega_z)


def mode_frequencies(spectrum, omega_z):
    """Mode angular frequencies omega_p = omega_z*sqrt(lambda_p) in rad/s.

    Eigenvalues in [-1e-10, 0) are treated as zero (free-rotation
    vestige); anything more negative raises UnstableModesError.
    """
    lam = spectrum.eigenvalues
    bad = np.flatnonzero(lam < UNSTABLE_TOL)
    if bad.size:
        raise UnstableModesError(bad)
    return omega_z * np.sqrt(np.maximum(lam, 0.0))


def gamma_factors(spectrum):
    """Per-ion gamma factors in x, y, z and the 45-degree radial projection.

    Zero modes (lambda < 1e-8) are excluded from the sums and recorded in
    ``excluded_modes``; a warning is emitted since the exclusion removes
    real low-frequency spatial extension from the estimate.
    """
    lam = spectrum.eigenvalues
    bad = np.flatnonzero(lam < UNSTABLE_TOL)
    if bad.size:
        raise UnstableModesError(bad)
    n = spectrum.n_ions
    keep = lam >= ZERO_MODE_TOL
    excluded = [int(i) for i in np.flatnonzero(~keep)]
    if excluded:
        warnings.warn(f"excluding zero modes {excluded} from gamma sums",
                      stacklevel=2)
    b = spectrum.eigenvectors[:, keep]
    inv_lam = 1.0 / lam[keep]
    bx, by, bz = b[:n, :], b[n:2 * n, :], b[2 * n:, :]
    gx = np.sqrt((bx**2 * inv_lam).sum(axis=1))
    gy = np.sqrt((by**2 * inv_lam).sum(axis=1))
    gz = np.sqrt((bz**2 * inv_lam).sum(axis=1))
    grad = np.sqrt((((bx + by) ** 2) / 2.0 * inv_lam).sum(axis=1))
    return GammaFactors(gamma_x=gx, gamma_y=gy, gamma_z=gz, gamma_rad=grad,
                        excluded_modes=excluded)


def position_variances(temperature, gammas, omega_z, species):
    """Thermal position variance per ion and direction, in m^2.

    <du^2> = (kB T / M omega_z^2) * gamma^2 for u in x, y, z and the
    projected radial direction.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    scale = sc.k * temperature / (species.mass * omega_z**2)
    return {
        "x": scale * gammas.gamma_x**2,
        "y": scale * gammas.gamma_y**2,
        "z": scale * gammas.gamma_z**2,
        "rad": scale * gammas.gamma_rad**2,
    }


def project_mode_temperatures(spectrum, mode_temps):
    """Per-ion directional temperatures from per-mode temperatures.

    T_{m,u} = sum_p (b_{m_u+m}^p)^2 T_p.  Returns an (N, 3) array with
    columns x, y, z.
    """
    temps = np.asarray(mode_temps, dtype=float)
    if temps.shape != spectrum.eigenvalues.shape:
        raise ValueError("need one temperature per mode")
    if np.any(temps < 0):
        raise ValueError("mode temperatures must be >= 0")
    n = spectrum.n_ions
    b2 = spectrum.eigenvectors**2
    out = np.empty((n, 3))
    out[:, 0] = b2[:n, :] @ temps
    out[:, 1] = b2[n:2 * n, :] @ temps
    out[:, 2] = b2[2 * n:, :] @ temps
    return out
