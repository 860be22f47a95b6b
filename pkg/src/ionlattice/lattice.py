"""Standing-wave dipole potential, adiabatic ramp simulation and scattering.

The lattice potential along the trap axis is U(z, t) = ramp(t) * U0 *
sin^2(kz), with U0 > 0 for blue detuning (wells at intensity nodes) and
U0 < 0 for red detuning (wells at antinodes).  A thermal phase-space
ensemble is propagated through the published pulse sequence (linear ramp
to full depth, then a hold) with a velocity-Verlet integrator; the final
energies give the pinning probability and the time-averaged local
intensity gives the photon-scattering probability per ion.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import constants as sc
from scipy.optimize import least_squares

from .photonstats import secondary_fraction

REF_DETUNING = 2 * np.pi * 1e12   # intensity_scale = 1 puts the P1/2 shift
                                  # at kB*1K for a 1 THz detuning
MIN_DETUNING_LINEWIDTHS = 100.0


@dataclass
class LatticeSpec:
    """Standing-wave field description and pulse sequence."""

    wavelength: float = 866e-9
    detuning_p12: float = 2 * np.pi * 0.76e12    # signed; > 0 is blue
    depth: float = 25e-3                         # K, |U0|/kB
    waist: float = 37e-6
    ramp_time: float = 2e-6
    hold_time: float = 1e-6
    ramp_shape: str = "linear"                   # or "sine"

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.ramp_time < 0 or self.hold_time < 0:
            raise ValueError("ramp_time and hold_time must be >= 0")
        if self.detuning_p12 == 0:
            raise ValueError("detuning must be nonzero")
        if self.ramp_shape not in ("linear", "sine"):
            raise ValueError(f"unknown ramp shape {self.ramp_shape!r}")

    @property
    def wavevector(self):
        return 2 * np.pi / self.wavelength


@dataclass
class PhaseSpaceEnsemble:
    """Sampled (z, v) ensemble used as Monte Carlo carrier for the ramp."""

    z: np.ndarray                  # m
    v: np.ndarray                  # m/s
    radial_offset: np.ndarray      # m
    weights: np.ndarray            # sum to 1
    temperature: float
    seed: int

    @property
    def n_samples(self):
        return self.z.size


@dataclass
class RampResult:
    """Final ensemble state plus per-sample energy and hold-phase intensity."""

    z: np.ndarray
    v: np.ndarray
    radial_offset: np.ndarray
    weights: np.ndarray
    energy: np.ndarray             # J, from the local well bottom
    hold_sin2: np.ndarray          # time-averaged sin^2(kz) during hold
    dt: float
    n_steps: int
    mean_energy_series: np.ndarray = None   # ensemble-mean E(t) during hold
    hold_times: np.ndarray = None


@dataclass
class ScatteringPrediction:
    depth: float                   # K
    p_red: float
    p_blue: float
    pinning_red: float
    pinning_blue: float
    secondary_fraction_red: float
    secondary_fraction_blue: float
    p_red_delocalized: float = float("nan")
    p_blue_delocalized: float = float("nan")


def lattice_frequency(depth, species, wavelength=866e-9):
    """Vibrational frequency (Hz) at the bottom of a lattice well.

    nu = (k/2pi) * sqrt(2 kB T_latt / M) for a well of depth T_latt.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    return np.sqrt(2.0 * sc.k * depth / species.mass) / wavelength


def beam_intensity_factor(radial_offset, waist):
    """Relative intensity exp(-2 r^2 / w^2) seen at radius r of a Gaussian beam."""
    if waist <= 0:
        raise ValueError("waist must be > 0")
    r = np.asarray(radial_offset, dtype=float)
    return np.exp(-2.0 * r**2 / waist**2)


def dipole_response(intensity_scale, spec, species):
    """Light shift and photon-scattering rate of the standing-wave field.

    Sums the two-level responses of the P1/2 state (detuning delta) and
    the P3/2 state (detuning delta - Delta_fs, relative line strength
    ``relative_p32_line_strength``):

        U_i      = intensity_scale * kB * (1 K) * REF_DETUNING / delta_i
        gamma_sc = Gamma * sum_i U_i / (hbar * delta_i)

    Returns (U0 in K, signed; peak scattering rate in 1/s).  Red detuning
    (delta < 0) gives an attractive potential.
    """
    delta = spec.detuning_p12
    splitting = species.p12_p32_splitting
    gamma = species.p12_linewidth
    if abs(delta) < MIN_DETUNING_LINEWIDTHS * gamma:
        raise ValueError("detuning must be far outside the natural linewidth")
    delta32 = delta - splitting
    if abs(delta32) < MIN_DETUNING_LINEWIDTHS * gamma:
        raise ValueError("detuning resonant with the P3/2 state")
    r = species.relative_p32_line_strength
    u12 = intensity_scale * sc.k * REF_DETUNING / delta
    u32 = intensity_scale * sc.k * REF_DETUNING * r / delta32
    u0 = (u12 + u32) / sc.k
    gamma_sc = gamma * (u12 / (sc.hbar * delta) + u32 / (sc.hbar * delta32))
    return u0, gamma_sc


def calibrate_intensity(spec, species):
    """Intensity scale at which |U0| equals spec.depth (exact; U0 is linear)."""
    u0_unit, _ = dipole_response(1.0, spec, species)
    if u0_unit == 0.0:
        raise ValueError("degenerate response: zero shift at this detuning")
    return spec.depth / abs(u0_unit)


def peak_scattering_rate(spec, species):
    """Peak (antinode, on-axis) scattering rate at the calibrated depth."""
    s = calibrate_intensity(spec, species)
    _, gamma_sc = dipole_response(s, spec, species)
    return gamma_sc


def sample_initial_ensemble(temperature, n_samples, omega_z, span=8.0, seed=0,
                            species=None, wavelength=866e-9):
    """Thermal ensemble before the ramp: z uniform over ``span`` lattice
    periods (the background trap is locally flat there), v Maxwellian.

    ``omega_z`` is carried along for provenance only.  Deterministic and
    bitwise reproducible for a given seed.
    """
    from .crystal import IonSpecies

    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if span < 4:
        raise ValueError("span must cover at least 4 lattice periods")
    species = species or IonSpecies()
    rng = np.random.default_rng(seed)
    period = wavelength / 2.0
    z = rng.uniform(-0.5 * span * period, 0.5 * span * period, size=n_samples)
    v = rng.normal(0.0, 1.0, size=n_samples) * np.sqrt(sc.k * temperature / species.mass)
    return PhaseSpaceEnsemble(
        z=z, v=v,
        radial_offset=np.zeros(n_samples),
        weights=np.full(n_samples, 1.0 / n_samples),
        temperature=temperature, seed=seed,
    )


def _ramp_fraction(t, spec):
    if spec.ramp_time == 0.0:
        return 1.0
    x = min(t / spec.ramp_time, 1.0)
    if spec.ramp_shape == "sine":
        return math.sin(0.5 * math.pi * x) ** 2
    return x


def ramp_integral(spec):
    """Integral of the ramp profile over the ramp, used as effective exposure."""
    if spec.ramp_shape in ("linear", "sine"):
        return 0.5 * spec.ramp_time
    raise ValueError(f"unknown ramp shape {spec.ramp_shape!r}")


def default_timestep(spec, species):
    nu = lattice_frequency(spec.depth, species, spec.wavelength)
    total = spec.ramp_time + spec.hold_time
    if nu == 0.0:
        return total / 500.0
    return min(1.0 / (100.0 * nu), total / 200.0)


def simulate_ramp_hold(ensemble, spec, species, dt=None, energy_series=False):
    """Velocity-Verlet propagation through the ramp and hold phases.

    The potential is ramp(t) * U0 * sin^2(kz) scaled per sample by the
    Gaussian beam factor of its radial offset.  Records the final total
    energy per sample (kinetic + lattice potential measured from the
    local well bottom, at full depth) and the hold-phase time average of
    sin^2(kz).

    ``dt`` defaults to a hundredth of the full-depth lattice period and
    must not exceed a fiftieth of it.
    """
    u0 = math.copysign(sc.k * spec.depth, spec.detuning_p12)  # J, signed
    k = spec.wavevector
    mass = species.mass
    nu_full = lattice_frequency(spec.depth, species, spec.wavelength)
    if dt is None:
        dt = default_timestep(spec, species)
    if nu_full > 0 and dt > 1.0 / (50.0 * nu_full):
        raise ValueError(
            f"dt={dt:.3e} s exceeds 1/(50 nu_latt) = {1/(50*nu_full):.3e} s")

    factors = beam_intensity_factor(ensemble.radial_offset, spec.waist)
    amp = u0 * factors                 # per-sample peak potential, J
    z = ensemble.z.copy()
    v = ensemble.v.copy()

    n_ramp = int(round(spec.ramp_time / dt)) if spec.ramp_time > 0 else 0
    n_hold = max(int(round(spec.hold_time / dt)), 1) if spec.hold_time > 0 else 0
    n_steps = n_ramp + n_hold

    force_scale = -amp * k / mass      # acceleration prefactor
    sin2_sum = np.zeros_like(z)
    series = [] if energy_series else None
    hold_times = [] if energy_series else None

    def accel(zz, lam):
        return force_scale * lam * np.sin(2.0 * k * zz)

    lam_prev = _ramp_fraction(0.0, spec)
    acc = accel(z, lam_prev)
    for step in range(n_steps):
        t_next = (step + 1) * dt
        v_half = v + 0.5 * dt * acc
        z = z + dt * v_half
        lam = _ramp_fraction(t_next, spec) if step + 1 < n_ramp else 1.0
        acc = accel(z, lam)
        v = v_half + 0.5 * dt * acc
        if step >= n_ramp:
            s2 = np.sin(k * z) ** 2
            sin2_sum += s2
            if energy_series:
                energy_t = 0.5 * mass * v**2 + amp * s2 - np.minimum(amp, 0.0)
                series.append(float(np.sum(ensemble.weights * energy_t)))
                hold_times.append(t_next)

    sin2 = np.sin(k * z) ** 2
    energy = 0.5 * mass * v**2 + amp * sin2 - np.minimum(amp, 0.0)
    hold_sin2 = sin2_sum / n_hold if n_hold else sin2
    return RampResult(
        z=z, v=v, radial_offset=ensemble.radial_offset.copy(),
        weights=ensemble.weights.copy(), energy=energy, hold_sin2=hold_sin2,
        dt=dt, n_steps=n_steps,
        mean_energy_series=np.asarray(series) if energy_series else None,
        hold_times=np.asarray(hold_times) if energy_series else None,
    )


def pinning_probability(result, depth):
    """Weighted fraction of samples with total energy below kB*depth."""
    frac = float(np.sum(result.weights[result.energy < sc.k * depth]))
    return min(max(frac, 0.0), 1.0)


def energy_drift_metrics(result):
    """Secular drift and bounded oscillation of the hold-phase energy.

    Returns (drift per microsecond, oscillation amplitude), both relative
    to the initial mean energy.  The drift compares the mean energy over
    the first and second halves of the hold, which cancels the bounded
    integrator oscillation; the oscillation amplitude is the peak-to-peak
    excursion, which scales as dt^2 for velocity Verlet.  Requires a
    simulation run with ``energy_series=True``.
    """
    series = result.mean_energy_series
    if series is None or series.size < 4:
        raise ValueError("needs a simulation recorded with energy_series=True")
    e0 = series[0]
    half = series.size // 2
    dt_centers = (result.hold_times[half:].mean() - result.hold_times[:half].mean())
    drift = abs(series[half:].mean() - series[:half].mean()) / e0
    drift_per_us = drift / (dt_centers / 1e-6)
    oscillation = (series.max() - series.min()) / e0
    return drift_per_us, oscillation


def scattering_probability(result, spec, species, radial_offset=None):
    """Excitation probability per ion after the pulse sequence.

    p = pump * <1 - exp(-Gamma_peak * I(r) * <sin^2(kz)> * t_eff)> with
    t_eff the hold time plus the ramp-profile integral.  Returns
    (p_excite, expected detected photons per sequence); the detected
    number folds in the ground-state branching and camera efficiency.
    """
    gamma_peak = peak_scattering_rate(spec, species)
    if radial_offset is None:
        factors = beam_intensity_factor(result.radial_offset, spec.waist)
    else:
        factors = beam_intensity_factor(radial_offset, spec.waist)
    t_eff = spec.hold_time + ramp_integral(spec)
    exposure = gamma_peak * factors * result.hold_sin2 * t_eff
    p_samples = species.pump_efficiency * (1.0 - np.exp(-exposure))
    p = float(np.sum(result.weights * p_samples))
    detected = p * species.branch_to_S * species.detector_efficiency
    return p, detected


def delocalized_probability(spec, species, radial_offset=0.0):
    """Scattering probability for ions spread uniformly over the lattice
    (<sin^2> = 1/2); the dashed-reference construction."""
    gamma_peak = peak_scattering_rate(spec, species)
    factors = beam_intensity_factor(radial_offset, spec.waist)
    t_eff = spec.hold_time + ramp_integral(spec)
    p = species.pump_efficiency * (1.0 - np.exp(-gamma_peak * factors * 0.5 * t_eff))
    return float(np.mean(p))


def _group_offsets(radial_offsets):
    offsets = np.sort(np.asarray(radial_offsets, dtype=float))
    groups = []
    for r in offsets:
        if groups and abs(r - groups[-1][0]) < 1e-9:
            groups[-1][1] += 1
        else:
            groups.append([r, 1])
    return [(r, cnt) for r, cnt in groups]


def predict_scattering_curve(temperature, depths, spec_red, spec_blue,
                             radial_offsets=(0.0,), n_samples=20000, seed=0,
                             span=8.0, species=None, omega_z=2 * np.pi * 71e3):
    """Per-depth red/blue scattering and pinning predictions for a crystal.

    Ions are grouped by radial offset; each group is simulated with its
    local beam factor and the results are averaged with multiplicity.
    Deterministic (bitwise) for a given seed.
    """
    from .crystal import IonSpecies

    species = species or IonSpecies()
    depths = np.asarray(depths, dtype=float)
    if np.any(np.diff(depths) < 0):
        raise ValueError("depths must be ascending")
    if spec_red.detuning_p12 >= 0 or spec_blue.detuning_p12 <= 0:
        raise ValueError("spec_red must be red-detuned and spec_blue blue-detuned")
    n_ions = len(radial_offsets)
    groups = _group_offsets(radial_offsets)
    root = np.random.SeedSequence(seed)
    child_seeds = root.spawn(depths.size * len(groups))

    predictions = []
    for i, depth in enumerate(depths):
        acc = {"red": [0.0, 0.0, 0.0], "blue": [0.0, 0.0, 0.0]}
        for g, (r0, count) in enumerate(groups):
            ens = sample_initial_ensemble(
                temperature, n_samples, omega_z, span=span,
                seed=child_seeds[i * len(groups) + g], species=species,
                wavelength=spec_red.wavelength)
            ens.radial_offset[:] = r0
            for color, spec in (("red", spec_red), ("blue", spec_blue)):
                dspec = replace(spec, depth=float(depth))
                if depth == 0.0:
                    p, pin, pdl = 0.0, 0.0, 0.0
                else:
                    sim = simulate_ramp_hold(ens, dspec, species)
                    p, _ = scattering_probability(sim, dspec, species)
                    pin = pinning_probability(sim, depth)
                    pdl = delocalized_probability(dspec, species, r0)
                acc[color][0] += count * p
                acc[color][1] += count * pin
                acc[color][2] += count * pdl
        p_red, pin_red, dl_red = (x / n_ions for x in acc["red"])
        p_blue, pin_blue, dl_blue = (x / n_ions for x in acc["blue"])
        predictions.append(ScatteringPrediction(
            depth=float(depth), p_red=p_red, p_blue=p_blue,
            pinning_red=pin_red, pinning_blue=pin_blue,
            secondary_fraction_red=secondary_fraction(n_ions, min(p_red, 1.0)),
            secondary_fraction_blue=secondary_fraction(n_ions, min(p_blue, 1.0)),
            p_red_delocalized=dl_red, p_blue_delocalized=dl_blue,
        ))
    return predictions


@dataclass
class TemperatureFitResult:
    temperature: float             # K
    stderr: float                  # K
    flat: bool = False             # objective carried no temperature signal
    n_points: int = 0


def fit_temperature_from_scattering(depths, p_red_measured, p_blue_measured,
                                    spec_red, spec_blue, radial_offsets=(0.0,),
                                    n_samples=20000, seed=0, species=None,
                                    t0=3e-3, t_bounds=(2e-4, 0.2),
                                    omega_z=2 * np.pi * 71e3):
    """Least-squares initial temperature from measured scattering curves.

    The model is `predict_scattering_curve` with a fixed seed, so the
    objective is smooth in T (common random numbers).  The standard
    error comes from the linearized curvature at the optimum; fits that
    run into the temperature bounds or show no curvature are flagged
    flat (a delocalized dataset drives T upward without bound).
    """
    depths = np.asarray(depths, dtype=float)
    p_red_measured = np.asarray(p_red_measured, dtype=float)
    p_blue_measured = np.asarray(p_blue_measured, dtype=float)
    if depths.size < 3:
        raise ValueError("need at least 3 depth points")

    def residuals(x):
        temp = float(np.exp(x[0]))
        preds = predict_scattering_curve(
            temp, depths, spec_red, spec_blue, radial_offsets,
            n_samples=n_samples, seed=seed, species=species, omega_z=omega_z)
        model_r = np.array([p.p_red for p in preds])
        model_b = np.array([p.p_blue for p in preds])
        return np.concatenate([model_r - p_red_measured, model_b - p_blue_measured])

    lo, hi = np.log(t_bounds[0]), np.log(t_bounds[1])
    sol = least_squares(residuals, x0=[np.log(t0)], bounds=([lo], [hi]),
                        diff_step=[0.05], xtol=1e-10, ftol=1e-12)
    if not sol.success:
        raise RuntimeError("temperature fit did not converge: " + sol.message)
    temp = float(np.exp(sol.x[0]))
    jtj = float(np.sum(sol.jac**2))
    m = sol.fun.size
    # anything within 2% (in log T) of a bound counts as driven there
    at_bound = (sol.x[0] >= hi - 0.02) or (sol.x[0] <= lo + 0.02)
    if jtj <= 0 or not np.isfinite(jtj) or at_bound:
        return TemperatureFitResult(temperature=temp, stderr=float("inf"),
                                    flat=True, n_points=int(depths.size))
    sigma2 = 2.0 * sol.cost / max(m - 1, 1)
    stderr_log = float(np.sqrt(sigma2 / jtj))
    # a standard error of order the value itself means the data carried
    # no temperature signal (e.g. delocalized input)
    flat = stderr_log >= 1.0
    return TemperatureFitResult(temperature=temp, stderr=float(temp * stderr_log),
                                flat=flat, n_points=int(depths.size))
