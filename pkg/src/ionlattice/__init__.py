"""Ion Coulomb crystals in optical standing-wave potentials.

Simulation and analysis toolkit covering crystal equilibrium structures,
normal-mode spectra, fluorescence-image thermometry, micromotion energy
budgets and the prediction of per-ion photon-scattering probabilities in
adiabatically ramped red- or blue-detuned optical lattices.
"""

from .crystal import (
    CA40_MASS,
    CrystalConfiguration,
    IonSpecies,
    Structure,
    TrapParameters,
    classify_structure,
    length_scale,
    potential_gradient,
    potential_hessian,
    refine_trap_frequencies,
    s4_mismatch,
    solve_equilibrium,
    total_potential,
)
from .imaging import (
    FluorescenceImage,
    ImageGeometry,
    SpotFit,
    TemperatureEstimate,
    fit_gaussian_profile,
    infer_temperature,
    integrate_profile,
    synthesize_image,
    thermometry_pipeline,
)
from .lattice import (
    LatticeSpec,
    PhaseSpaceEnsemble,
    ScatteringPrediction,
    beam_intensity_factor,
    calibrate_intensity,
    delocalized_probability,
    dipole_response,
    energy_drift_metrics,
    fit_temperature_from_scattering,
    lattice_frequency,
    peak_scattering_rate,
    pinning_probability,
    predict_scattering_curve,
    sample_initial_ensemble,
    scattering_probability,
    simulate_ramp_hold,
)
from .micromotion import (
    MicromotionReport,
    effective_axial_q,
    excess_amplitude,
    kinetic_energy_budget,
    micromotion_kinetic_temperature,
    systematic_error_report,
    variance_correction_factor,
)
from .modes import (
    GammaFactors,
    ModeSpectrum,
    build_hessian,
    crystal_spectrum,
    eigenmodes,
    gamma_factors,
    mode_frequencies,
    position_variances,
    project_mode_temperatures,
)
from .photonstats import (
    ScatterStats,
    detection_yield,
    monte_carlo_oracle,
    photon_count_distribution,
    scatter_stats,
    secondary_fraction,
)
from .pgm import read_image, write_image

__version__ = "0.1.0"
