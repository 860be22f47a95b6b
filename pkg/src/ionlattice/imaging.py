"""Synthetic fluorescence images and image-based crystal thermometry.

A thermal ion renders as a Gaussian spot whose variance is the thermal
position variance (set by the temperature and the ion's gamma factor)
plus the imaging-system PSF variance.  Fitting the integrated axial
profile of each spot and inverting

    sigma_m^2 = (kB T / M omega_z^2) gamma_{m,z}^2 + sigma_res^2

gives a per-ion temperature; the combined estimate is the
inverse-variance weighted mean.  Only the axial direction is used: the
axial gamma factors are insensitive to the radial-degeneracy split,
while the radial ones are not.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import constants as sc
from scipy.optimize import least_squares
from scipy.special import erf
from scipy.stats import t as student_t

from . import modes as modes_mod
from .crystal import length_scale

SIGMA_LOWER_PX = 0.1    # fit bound on sigma, in pixels


class FitNonConvergenceError(RuntimeError):
    """Profile fit failed (flat input or optimizer failure)."""


class BelowResolutionError(RuntimeError):
    """Every fitted spot is narrower than the imaging resolution."""


class PipelineError(RuntimeError):
    """A thermometry pipeline stage failed; carries the stage name."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"stage '{stage}': {message}")


@dataclass
class ImageGeometry:
    """Pixel pitch and PSF of the imaging system."""

    pixel_pitch: float = 0.92e-6
    psf_sigma_ax: float = 2.23e-6
    psf_sigma_rad: float = 2.09e-6
    shape: tuple = None            # (height, width); None -> auto
    margin_sigmas: float = 6.0


@dataclass
class FluorescenceImage:
    intensities: np.ndarray        # (height, width), counts, >= 0
    pixel_pitch: float = 0.92e-6
    psf_sigma_ax: float = 2.23e-6
    psf_sigma_rad: float = 2.09e-6
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities)
        if self.pixel_pitch <= 0:
            raise ValueError("pixel pitch must be > 0")
        if np.any(self.intensities < 0):
            raise ValueError("intensities must be >= 0")

    @property
    def height(self):
        return self.intensities.shape[0]

    @property
    def width(self):
        return self.intensities.shape[1]


@dataclass
class SpotFit:
    center: float                  # m, within the ROI frame
    sigma: float                   # m
    amplitude: float               # counts
    offset: float                  # counts
    ci95: np.ndarray               # half-widths for (center, sigma, amplitude, offset)
    stderr: np.ndarray
    at_bounds: bool = False


@dataclass
class TemperatureEstimate:
    value: float                   # K
    stderr: float                  # K
    per_ion_sigmas: np.ndarray     # m, fitted axial widths
    gammas_used: np.ndarray
    n_ions_used: int
    below_resolution: list = field(default_factory=list)
    per_ion_temperatures: np.ndarray = None


def _image_plane_positions(config, species, omega_z):
    """Physical (z, r) spot centres; r is the 45-degree camera projection."""
    ell = length_scale(species, omega_z)
    pos = config.positions * ell
    return pos[:, 2], (pos[:, 0] + pos[:, 1]) / np.sqrt(2.0)


def synthesize_image(config, temperature, spectrum, species, geometry=None,
                     photons_per_ion=100000, noise_seed=0):
    """Render a thermal crystal as a fluorescence image.

    Each ion contributes a pixel-integrated 2D Gaussian of
    ``photons_per_ion`` expected counts with axial variance
    thermal(gamma_z) + PSF_ax^2 and radial variance thermal(gamma_rad) +
    PSF_rad^2.  Counts are Poisson-sampled from the given seed
    (``noise_seed=None`` returns the noiseless expectation).  Ion pairs
    closer than 2 px in the image plane are rendered normally but listed
    in ``metadata['overlapped_pairs']``.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    geometry = geometry or ImageGeometry()
    omega_z = spectrum.omega_z_ref
    if not np.isfinite(omega_z) or omega_z <= 0:
        raise ValueError("spectrum needs a positive omega_z_ref")
    gammas = modes_mod.gamma_factors(spectrum)
    variances = modes_mod.position_variances(temperature, gammas, omega_z, species)
    sig_ax = np.sqrt(variances["z"] + geometry.psf_sigma_ax**2)
    sig_rad = np.sqrt(variances["rad"] + geometry.psf_sigma_rad**2)
    z_pos, r_pos = _image_plane_positions(config, species, omega_z)

    pitch = geometry.pixel_pitch
    if geometry.shape is None:
        pad = geometry.margin_sigmas * max(sig_ax.max(), sig_rad.max())
        width = int(np.ceil((z_pos.max() - z_pos.min() + 2 * pad) / pitch)) + 1
        height = int(np.ceil((r_pos.max() - r_pos.min() + 2 * pad) / pitch)) + 1
    else:
        height, width = geometry.shape

    # pixel-centre origin such that the crystal centroid sits mid-image
    z0 = (z_pos.max() + z_pos.min()) / 2 - width / 2 * pitch
    r0 = (r_pos.max() + r_pos.min()) / 2 - height / 2 * pitch
    col_edges = z0 + np.arange(width + 1) * pitch
    row_edges = r0 + np.arange(height + 1) * pitch

    expected = np.zeros((height, width))
    for m in range(config.n_ions):
        cz = 0.5 * (1 + erf((col_edges - z_pos[m]) / (np.sqrt(2) * sig_ax[m])))
        cr = 0.5 * (1 + erf((row_edges - r_pos[m]) / (np.sqrt(2) * sig_rad[m])))
        expected += photons_per_ion * np.outer(np.diff(cr), np.diff(cz))

    overlapped = []
    for m in range(config.n_ions):
        for n in range(m + 1, config.n_ions):
            dist = np.hypot(z_pos[m] - z_pos[n], r_pos[m] - r_pos[n])
            if dist < 2 * pitch:
                overlapped.append((m, n))

    if noise_seed is None:
        counts = expected
    else:
        counts = np.random.default_rng(noise_seed).poisson(expected).astype(float)
    meta = {
        "overlapped_pairs": overlapped,
        "origin_m": (r0, z0),
        "temperature_K": temperature,
        "photons_per_ion": photons_per_ion,
        "noise_seed": noise_seed,
    }
    return FluorescenceImage(intensities=counts, pixel_pitch=pitch,
                             psf_sigma_ax=geometry.psf_sigma_ax,
                             psf_sigma_rad=geometry.psf_sigma_rad,
                             metadata=meta)


def integrate_profile(image, axis, roi=None):
    """Sum the ROI along the direction orthogonal to ``axis``.

    ``roi`` is (row0, row1, col0, col1), half-open pixel bounds; the
    whole image by default.  An "axial" profile runs along columns.
    """
    if roi is None:
        roi = (0, image.height, 0, image.width)
    r0, r1, c0, c1 = (int(v) for v in roi)
    if not (0 <= r0 < r1 <= image.height and 0 <= c0 < c1 <= image.width):
        raise ValueError(f"empty or out-of-range ROI {roi}")
    block = image.intensities[r0:r1, c0:c1]
    if axis == "axial":
        return block.sum(axis=0)
    if axis == "radial":
        return block.sum(axis=1)
    raise ValueError("axis must be 'axial' or 'radial'")


def fit_gaussian_profile(profile, pitch):
    """Least-squares Gaussian + constant offset fit of a 1D profile.

    Parameters are (center, sigma, amplitude, offset), with ``center``
    measured from the first sample of the profile.  The 95% confidence
    half-widths come from the linearized covariance at the optimum
    (Student-t quantile).  Fits whose sigma lands on the bounds
    (0.1 px, profile extent) are flagged ``at_bounds``.
    """
    y = np.asarray(profile, dtype=float)
    npts = y.size
    if npts < 8:
        raise ValueError("need at least 8 samples to fit a profile")
    span = y.max() - y.min()
    if span <= 0:
        raise FitNonConvergenceError("flat profile has no peak to fit")
    x = (np.arange(npts) + 0.5) * pitch

    offset0 = y.min()
    amp0 = span
    c0 = x[int(np.argmax(y))]
    w = np.clip(y - offset0, 0, None)
    sigma0 = np.sqrt(np.sum(w * (x - c0) ** 2) / max(np.sum(w), 1e-30))
    sigma0 = np.clip(sigma0, 0.5 * pitch, x[-1])

    lo = [x[0] - 2 * pitch, SIGMA_LOWER_PX * pitch, 0.0, -np.inf]
    hi = [x[-1] + 2 * pitch, npts * pitch, np.inf, np.inf]

    def resid(params):
        c, s, a, b = params
        return a * np.exp(-((x - c) ** 2) / (2 * s * s)) + b - y

    sol = least_squares(resid, x0=[c0, sigma0, amp0, offset0], bounds=(lo, hi),
                        x_scale=[pitch * npts / 4, pitch * npts / 8, max(amp0, 1.0),
                                 max(abs(offset0), 1.0)],
                        xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not sol.success:
        raise FitNonConvergenceError("profile fit failed: " + sol.message)
    c, s, a, b = sol.x
    dof = max(npts - 4, 1)
    sigma2 = 2.0 * sol.cost / dof
    jtj = sol.jac.T @ sol.jac
    try:
        cov = sigma2 * np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        raise FitNonConvergenceError("singular fit covariance") from None
    stderr = np.sqrt(np.maximum(np.diag(cov), 0.0))
    ci95 = student_t.ppf(0.975, dof) * stderr
    at_bounds = bool(s <= lo[1] * (1 + 1e-9) or s >= hi[1] * (1 - 1e-9))
    return SpotFit(center=float(c), sigma=float(s), amplitude=float(a),
                   offset=float(b), ci95=ci95, stderr=stderr, at_bounds=at_bounds)


def infer_temperature(fits, gammas_z, sigma_res, omega_z, species):
    """Combine per-spot axial widths into a temperature estimate.

    T_m = M omega_z^2 (sigma_m^2 - sigma_res^2) / (kB gamma_m^2) per
    spot, then an inverse-variance weighted mean.  Spots at or below the
    resolution are excluded and listed; if none survive, raises
    BelowResolutionError.
    """
    fits = list(fits)
    gam = np.asarray(gammas_z, dtype=float)
    if len(fits) == 0:
        raise ValueError("need at least one fit")
    if gam.size != len(fits):
        raise ValueError("need one gamma per fit")
    prefac = species.mass * omega_z**2 / sc.k
    values, variances, sigmas = [], [], []
    excluded = []
    for i, fit in enumerate(fits):
        sigmas.append(fit.sigma)
        if fit.sigma <= sigma_res:
            excluded.append(i)
            values.append(np.nan)
            variances.append(np.nan)
            continue
        t_i = prefac * (fit.sigma**2 - sigma_res**2) / gam[i] ** 2
        se_sigma = fit.stderr[1]
        se_t = prefac * 2 * fit.sigma * se_sigma / gam[i] ** 2
        values.append(t_i)
        variances.append(max(se_t, 1e-30) ** 2)
    values = np.asarray(values)
    variances = np.asarray(variances)
    good = ~np.isnan(values)
    if not np.any(good):
        raise BelowResolutionError(
            "all spots are at or below the imaging resolution")
    wts = 1.0 / variances[good]
    value = float(np.sum(wts * values[good]) / np.sum(wts))
    stderr = float(1.0 / np.sqrt(np.sum(wts)))
    return TemperatureEstimate(
        value=value, stderr=stderr,
        per_ion_sigmas=np.asarray(sigmas), gammas_used=gam,
        n_ions_used=int(np.sum(good)), below_resolution=excluded,
        per_ion_temperatures=values,
    )


def detect_spots(image, min_separation_px=4):
    """Locate fluorescence spots as local maxima of the smoothed image.

    Returns an (n_spots, 2) array of (row, col) pixel coordinates sorted
    by column.
    """
    from scipy import ndimage

    img = image.intensities.astype(float)
    smooth_px = max(image.psf_sigma_ax / image.pixel_pitch / 2.0, 1.0)
    sm = ndimage.gaussian_filter(img, sigma=smooth_px)
    base = float(np.median(sm))
    peak = float(sm.max())
    if peak <= base:
        raise ValueError("image has no features above background")
    thr = base + 0.25 * (peak - base)
    size = 2 * min_separation_px + 1
    local_max = (sm == ndimage.maximum_filter(sm, size=size)) & (sm > thr)
    coords = np.argwhere(local_max)
    if coords.shape[0] == 0:
        raise ValueError("no spots detected above threshold")
    # plateau maxima can report twice; merge anything closer than the window
    merged = []
    for rc in coords[np.argsort(coords[:, 1])]:
        if merged and np.hypot(*(rc - merged[-1])) < min_separation_px:
            continue
        merged.append(rc)
    return np.asarray(merged)


@dataclass
class ThermometryResult:
    estimate: TemperatureEstimate
    trap_fit: object
    provenance: dict


def thermometry_pipeline(image, trap_guess, species=None, n_ions=None,
                         seed=0, t_reference=5e-3):
    """Image to temperature: detect, refine trap, compute modes, fit, invert.

    ``image`` is a FluorescenceImage or a path to a 16-bit PGM file.
    ``t_reference`` only sizes the +-4 sigma fit windows.  Radial fits
    are carried in the provenance record but do not enter the estimate.
    """
    from .crystal import IonSpecies, solve_equilibrium

    species = species or IonSpecies()
    provenance = {"stages": []}

    def run_stage(name, fn):
        provenance["stages"].append(name)
        try:
            return fn()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, str(exc)) from exc

    def _read():
        if isinstance(image, FluorescenceImage):
            return image
        from .pgm import read_image
        return read_image(image)

    img = run_stage("read_image", _read)
    pitch = img.pixel_pitch

    spots = run_stage("detect_spots", lambda: detect_spots(img))
    count = int(n_ions) if n_ions is not None else spots.shape[0]

    # fit window half-widths from the PSF plus a reference thermal width
    sig_th = np.sqrt(sc.k * t_reference / (species.mass * trap_guess.omega_z**2))
    half_ax = int(np.ceil(4 * np.hypot(img.psf_sigma_ax, sig_th) / pitch))
    half_rad = int(np.ceil(4 * np.hypot(img.psf_sigma_rad, sig_th) / pitch))

    def _windows(rc):
        r, c = int(rc[0]), int(rc[1])
        return (max(r - half_rad, 0), min(r + half_rad + 1, img.height),
                max(c - half_ax, 0), min(c + half_ax + 1, img.width))

    def _initial_fits():
        out = []
        for rc in spots:
            roi = _windows(rc)
            ax = fit_gaussian_profile(integrate_profile(img, "axial", roi), pitch)
            rad = fit_gaussian_profile(integrate_profile(img, "radial", roi), pitch)
            z_abs = ax.center + roi[2] * pitch
            r_abs = rad.center + roi[0] * pitch
            out.append({"roi": roi, "axial": ax, "radial": rad,
                        "z_m": z_abs, "r_m": r_abs})
        return out

    spot_fits = run_stage("spot_fits", _initial_fits)
    spot_zr = np.array([[s["z_m"], s["r_m"]] for s in spot_fits])

    def _refine():
        from .crystal import refine_trap_frequencies

        model = solve_equilibrium(count, trap_guess.alpha, trap_guess.beta, seed=seed)
        mz, mr = _image_plane_positions(model, species, trap_guess.omega_z)
        proj = np.column_stack([mz, mr])
        centered_spots = spot_zr - spot_zr.mean(axis=0)
        # assign each model ion to its nearest detected spot
        d2 = ((proj[:, None, :] - centered_spots[None, :, :]) ** 2).sum(axis=2)
        assigned = np.argmin(d2, axis=1)
        measured = spot_zr[assigned]
        measured = measured - measured.mean(axis=0)
        fit = refine_trap_frequencies(measured, trap_guess, species, seed=seed)
        return fit, assigned

    trap_fit, assigned = run_stage("refine_trap", _refine)
    trap = trap_fit.trap

    def _modes():
        cfg = solve_equilibrium(count, trap.alpha, trap.beta, seed=seed)
        spectrum = modes_mod.crystal_spectrum(cfg, omega_z=trap.omega_z)
        return cfg, modes_mod.gamma_factors(spectrum)

    cfg, gammas = run_stage("modes", _modes)

    def _axial_groups():
        # spots sharing a column within 2 px merge into one axial ROI
        order = np.argsort(spot_zr[:, 0])
        groups = []
        for idx in order:
            z = spot_zr[idx, 0]
            if groups and abs(z - np.mean([spot_zr[j, 0] for j in groups[-1]])) < 2 * pitch:
                groups[-1].append(idx)
            else:
                groups.append([idx])
        out = []
        for members in groups:
            rois = [spot_fits[j]["roi"] for j in members]
            r0 = min(roi[0] for roi in rois)
            r1 = max(roi[1] for roi in rois)
            c0 = min(roi[2] for roi in rois)
            c1 = max(roi[3] for roi in rois)
            profile = integrate_profile(img, "axial", (r0, r1, c0, c1))
            fit = fit_gaussian_profile(profile, pitch)
            ions = [i for i in range(count) if assigned[i] in members]
            gamma = float(np.mean(gammas.gamma_z[ions])) if ions else float("nan")
            out.append({"spots": members, "ions": ions, "fit": fit, "gamma": gamma,
                        "roi": (r0, r1, c0, c1)})
        return [g for g in out if g["ions"]]

    groups = run_stage("axial_groups", _axial_groups)

    def _infer():
        fits = [g["fit"] for g in groups]
        gam = [g["gamma"] for g in groups]
        return infer_temperature(fits, gam, img.psf_sigma_ax, trap.omega_z, species)

    estimate = run_stage("infer_temperature", _infer)

    provenance.update({
        "pixel_pitch_um": pitch * 1e6,
        "psf_ax_um": img.psf_sigma_ax * 1e6,
        "psf_rad_um": img.psf_sigma_rad * 1e6,
        "n_spots": int(spots.shape[0]),
        "n_ions": count,
        "spots_px": spots.tolist(),
        "spot_positions_m": spot_zr.tolist(),
        "radial_fits": [{"sigma_m": s["radial"].sigma, "center_m": s["r_m"],
                         "ci95_sigma_m": float(s["radial"].ci95[1])}
                        for s in spot_fits],
        "axial_group_fits": [{"sigma_m": g["fit"].sigma, "gamma": g["gamma"],
                              "ions": g["ions"]} for g in groups],
        "refined_trap_hz": {
            "omega_z": trap.omega_z / (2 * np.pi),
            "omega_x": trap.omega_x / (2 * np.pi),
            "omega_y": trap.omega_y / (2 * np.pi),
        },
        "refine_residual_m": trap_fit.residual,
        "radial_ambiguous": trap_fit.radial_ambiguous,
        "structure": cfg.structure.value,
        "seed": seed,
        "versions": {"numpy": np.__version__},
    })
    return ThermometryResult(estimate=estimate, trap_fit=trap_fit,
                             provenance=provenance)
