"""Photon-counting statistics for an N-ion crystal with scattering probability p.

Each experimental sequence is modeled as N independent Bernoulli trials
(binomial statistics), which links the per-ion excitation probability to
crystal-level photon signals: the full count distribution, the expected
detected counts, and the fraction of signal contributed by second and
later photons,

    f = 1 - (1 - (1-p)^N) / (N p).
"""

from dataclasses import dataclass
from math import comb

import numpy as np

SMALL_P = 1e-8  # below this, evaluate f by its series to avoid 0/0


@dataclass
class ScatterStats:
    n_ions: int
    p: float
    distribution: np.ndarray       # P(N_p = k), k = 0..N
    secondary_fraction: float
    p_at_least_one: float

    def to_dict(self):
        return {
            "n_ions": self.n_ions,
            "p": self.p,
            "distribution": self.distribution.tolist(),
            "secondary_fraction": self.secondary_fraction,
            "p_at_least_one": self.p_at_least_one,
        }


def photon_count_distribution(n, p):
    """Binomial pmf over 0..n photons per sequence."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    k = np.arange(n + 1)
    pmf = np.array([comb(n, int(i)) for i in k], dtype=float)
    pmf *= p**k * (1.0 - p) ** (n - k)
    return pmf


def secondary_fraction(n, p):
    """Fraction of the photon signal due to second and later photons.

    f = 1 - (1-(1-p)^n)/(n p); the p -> 0 limit (n-1)p/2 is taken by a
    series expansion below p = 1e-8.
    """
    if n < 1:
        raise ValueError("need at least one ion")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if n == 1:
        return 0.0  # a single ion has no secondary photons
    if p < SMALL_P:
        return (n - 1) * p / 2.0 - (n - 1) * (n - 2) * p**2 / 6.0
    return 1.0 - (1.0 - (1.0 - p) ** n) / (n * p)


def scatter_stats(n, p):
    """Bundle distribution, secondary fraction and P(>=1 photon)."""
    pmf = photon_count_distribution(n, p)
    return ScatterStats(
        n_ions=n, p=p, distribution=pmf,
        secondary_fraction=secondary_fraction(n, p),
        p_at_least_one=float(1.0 - pmf[0]),
    )


def detection_yield(p_excite, species):
    """Expected detected photons per sequence per ion.

    Chains the excitation probability with the branching fraction to the
    ground state and the camera detection efficiency; the optical-pumping
    preparation efficiency multiplies in front.
    """
    if not 0.0 <= p_excite <= 1.0:
        raise ValueError("p_excite must be in [0, 1]")
    return (species.pump_efficiency * p_excite * species.branch_to_S
            * species.detector_efficiency)


def monte_carlo_oracle(n, p, trials, seed=0):
    """Empirical photon-count distribution and secondary fraction.

    Simulates ``trials`` sequences of n Bernoulli scatters; used as an
    independent check of the closed forms.  Deterministic given seed.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    rng = np.random.default_rng(seed)
    counts = rng.binomial(n, p, size=trials)
    hist = np.bincount(counts, minlength=n + 1).astype(float) / trials
    total_photons = counts.sum()
    first_photons = np.count_nonzero(counts)
    frac = 0.0 if total_photons == 0 else 1.0 - first_photons / total_photons
    return hist, float(frac)
