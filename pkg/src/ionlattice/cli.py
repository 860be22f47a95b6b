"""Command-line front end: config files, dispatch, and file I/O.

Config files use "[section]" headers with "key = value" lines; any CLI
flag overrides the file value.  Every command writes its artifacts plus
a provenance sidecar (resolved config echo, seed, versions) into the
output directory, atomically; a run is exactly reproducible from its
sidecar.  Exit status: 0 success, 1 validation error, 2 numerical
failure.
"""

import argparse
import json
import os
import sys
import tempfile

import numpy as np
import scipy

from . import __version__, crystal, imaging, lattice, micromotion, modes, pgm, photonstats


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


# section -> key -> (type, default)
SCHEMA = {
    "trap": {
        "omega_z_khz": (float, 71.0),
        "omega_rad_khz": (float, 350.0),
        "radial_split": (float, 0.05),
        "omega_rf_mhz": (float, 3.98),
        "q_z": (float, 5e-4),
    },
    "species": {
        "mass_amu": (float, 40.0),
        "lattice_wavelength_nm": (float, 866.0),
        "detection_wavelength_nm": (float, 397.0),
        "p12_p32_splitting_thz": (float, 6.7),
        "p12_linewidth_mhz": (float, 22.4),
        "branch_to_s": (float, 0.94),
        "branch_leave_pinned_state": (float, 0.97),
        "pump_efficiency": (float, 0.98),
        "detector_efficiency": (float, 1.7e-4),
        "relative_p32_line_strength": (float, 0.5),
    },
    "lattice": {
        "detuning_thz": (float, 0.76),
        "depth_mk": (float, 25.0),
        "waist_um": (float, 37.0),
        "ramp_us": (float, 2.0),
        "hold_us": (float, 1.0),
        "ramp_shape": (str, "linear"),
    },
    "image": {
        "pitch_um": (float, 0.92),
        "psf_ax_um": (float, 2.23),
        "psf_rad_um": (float, 2.09),
    },
    "run": {
        "n_ions": (int, 8),
        "temperature_mk": (float, 3.6),
        "seed": (int, 1),
        "samples": (int, 20000),
        "span_periods": (float, 8.0),
        "photons_per_ion": (int, 100000),
        "depths_mk": (str, "0,2.5,5,10,15,20,25"),
        "p": (float, 0.1),
        "crystal": (str, "string8"),
        "image_path": (str, ""),
    },
}

# value checks run before dispatch; each names the offending key
_POSITIVE = [("trap", "omega_z_khz"), ("trap", "omega_rad_khz"),
             ("trap", "omega_rf_mhz"), ("species", "mass_amu"),
             ("species", "lattice_wavelength_nm"), ("lattice", "detuning_thz"),
             ("lattice", "waist_um"), ("run", "temperature_mk")]
_NONNEG = [("trap", "radial_split"), ("trap", "q_z"), ("lattice", "depth_mk"),
           ("lattice", "ramp_us"), ("lattice", "hold_us")]
_PROB = [("species", "branch_to_s"), ("species", "branch_leave_pinned_state"),
         ("species", "pump_efficiency"), ("species", "detector_efficiency"),
         ("run", "p")]


def parse_config(text):
    """Parse and validate "[section] / key = value" config text.

    Returns the fully-defaulted nested dict; raises ConfigError with the
    offending line number on the first problem.
    """
    values = {sec: dict() for sec in SCHEMA}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigError("key outside any [section]", lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key '{key}' in [{section}]", lineno)
        typ, _ = SCHEMA[section][key]
        try:
            values[section][key] = typ(value)
        except ValueError:
            raise ConfigError(
                f"key '{key}' expects {typ.__name__}, got {value!r}", lineno) from None
    return _fill_defaults(values)


def _fill_defaults(values):
    out = {}
    for sec, keys in SCHEMA.items():
        out[sec] = {}
        for key, (_, default) in keys.items():
            out[sec][key] = values.get(sec, {}).get(key, default)
    return out


def validate_values(cfg):
    for sec, key in _POSITIVE:
        if cfg[sec][key] <= 0:
            raise ConfigError(f"key '{key}' must be > 0, got {cfg[sec][key]}")
    for sec, key in _NONNEG:
        if cfg[sec][key] < 0:
            raise ConfigError(f"key '{key}' must be >= 0, got {cfg[sec][key]}")
    for sec, key in _PROB:
        if not 0 <= cfg[sec][key] <= 1:
            raise ConfigError(f"key '{key}' must be in [0, 1], got {cfg[sec][key]}")
    if cfg["run"]["n_ions"] < 0:
        raise ConfigError("key 'n_ions' must be >= 1 (0 means detect from image)")
    if cfg["run"]["samples"] < 1:
        raise ConfigError("key 'samples' must be >= 1")
    if cfg["lattice"]["ramp_shape"] not in ("linear", "sine"):
        raise ConfigError("key 'ramp_shape' must be 'linear' or 'sine'")
    if cfg["run"]["crystal"] not in CRYSTAL_PRESETS:
        raise ConfigError(f"key 'crystal' must be one of {sorted(CRYSTAL_PRESETS)}")
    return cfg


def render_config(cfg):
    """Config dict back to file text (used in provenance sidecars)."""
    lines = []
    for sec in SCHEMA:
        lines.append(f"[{sec}]")
        for key in SCHEMA[sec]:
            lines.append(f"{key} = {cfg[sec][key]}")
        lines.append("")
    return "\n".join(lines)


def _species(cfg):
    s = cfg["species"]
    return crystal.IonSpecies(
        mass=s["mass_amu"] * 1.66053906660e-27,
        lattice_wavelength=s["lattice_wavelength_nm"] * 1e-9,
        detection_wavelength=s["detection_wavelength_nm"] * 1e-9,
        p12_p32_splitting=2 * np.pi * s["p12_p32_splitting_thz"] * 1e12,
        p12_linewidth=2 * np.pi * s["p12_linewidth_mhz"] * 1e6,
        branch_to_S=s["branch_to_s"],
        branch_leave_pinned_state=s["branch_leave_pinned_state"],
        pump_efficiency=s["pump_efficiency"],
        detector_efficiency=s["detector_efficiency"],
        relative_p32_line_strength=s["relative_p32_line_strength"],
    )


def _trap(cfg):
    t = cfg["trap"]
    wz = 2 * np.pi * t["omega_z_khz"] * 1e3
    wx = 2 * np.pi * t["omega_rad_khz"] * 1e3
    wy = wx * (1.0 - t["radial_split"])
    return crystal.TrapParameters(
        omega_z=wz, omega_x=wx, omega_y=wy,
        omega_rf=2 * np.pi * t["omega_rf_mhz"] * 1e6, q_z=t["q_z"])


def _lattice_specs(cfg):
    lat = cfg["lattice"]
    kwargs = dict(
        wavelength=cfg["species"]["lattice_wavelength_nm"] * 1e-9,
        depth=lat["depth_mk"] * 1e-3,
        waist=lat["waist_um"] * 1e-6,
        ramp_time=lat["ramp_us"] * 1e-6,
        hold_time=lat["hold_us"] * 1e-6,
        ramp_shape=lat["ramp_shape"],
    )
    detuning = 2 * np.pi * lat["detuning_thz"] * 1e12
    red = lattice.LatticeSpec(detuning_p12=-detuning, **kwargs)
    blue = lattice.LatticeSpec(detuning_p12=+detuning, **kwargs)
    return red, blue


def _depths(cfg):
    try:
        vals = [float(v) * 1e-3 for v in cfg["run"]["depths_mk"].split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"key 'depths_mk' expects comma-separated numbers, "
                          f"got {cfg['run']['depths_mk']!r}") from None
    if not vals:
        raise ConfigError("key 'depths_mk' is empty")
    return sorted(vals)


CRYSTAL_PRESETS = {
    # n, axial kHz, radial kHz, split, temperature mK (reference values
    # of the three reference crystal structures)
    "string8": (8, 71.0, 350.0, 0.0, 3.6),
    "zigzag4": (4, 87.0, 185.0, 0.05, 3.5),
    "octa6": (6, 105.0, 192.0, 0.05, 3.1),
}


class _Writer:
    """Collects artifacts and writes them atomically; removes all of a
    run's outputs if any stage fails."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.written = []

    def _emit(self, name, data):
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, name)
        fd, tmp = tempfile.mkstemp(dir=self.out_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(path)
        return path

    def json(self, name, obj):
        text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
        return self._emit(name, text.encode("utf-8"))

    def csv(self, name, header, rows):
        lines = [",".join(header)]
        lines += [",".join(repr(float(v)) for v in row) for row in rows]
        return self._emit(name, ("\n".join(lines) + "\n").encode("utf-8"))

    def pgm(self, name, image):
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, name)
        pgm.write_image(image, path)
        self.written.append(path)
        return path

    def rollback(self):
        for path in self.written:
            if os.path.exists(path):
                os.unlink(path)
        self.written = []


def _provenance(cfg, command):
    return {
        "command": command,
        "config": render_config(cfg),
        "seed": cfg["run"]["seed"],
        "versions": {
            "ionlattice": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
    }


def _solve_preset_or_trap(cfg):
    trap = _trap(cfg)
    n = cfg["run"]["n_ions"]
    seed = cfg["run"]["seed"]
    return trap, crystal.solve_equilibrium(n, trap.alpha, trap.beta, seed=seed)


def _cmd_equilibrium(cfg, writer):
    trap, config = _solve_preset_or_trap(cfg)
    species = _species(cfg)
    ell = crystal.length_scale(species, trap.omega_z)
    out = config.to_dict()
    out["length_scale_m"] = ell
    out["positions_m"] = (config.positions * ell).tolist()
    out["s4_mismatch"] = crystal.s4_mismatch(config)
    writer.json("equilibrium.json", out)


def _cmd_modes(cfg, writer):
    trap, config = _solve_preset_or_trap(cfg)
    spectrum = modes.crystal_spectrum(config, omega_z=trap.omega_z)
    gam = modes.gamma_factors(spectrum)
    freqs = modes.mode_frequencies(spectrum, trap.omega_z)
    out = spectrum.to_dict()
    out["frequencies_hz"] = (freqs / (2 * np.pi)).tolist()
    out["gamma_x"] = gam.gamma_x.tolist()
    out["gamma_y"] = gam.gamma_y.tolist()
    out["gamma_z"] = gam.gamma_z.tolist()
    out["gamma_rad"] = gam.gamma_rad.tolist()
    out["excluded_modes"] = gam.excluded_modes
    out["structure"] = config.structure.value
    writer.json("modes.json", out)


def _cmd_synth_image(cfg, writer):
    trap, config = _solve_preset_or_trap(cfg)
    species = _species(cfg)
    spectrum = modes.crystal_spectrum(config, omega_z=trap.omega_z)
    geo = imaging.ImageGeometry(
        pixel_pitch=cfg["image"]["pitch_um"] * 1e-6,
        psf_sigma_ax=cfg["image"]["psf_ax_um"] * 1e-6,
        psf_sigma_rad=cfg["image"]["psf_rad_um"] * 1e-6)
    img = imaging.synthesize_image(
        config, cfg["run"]["temperature_mk"] * 1e-3, spectrum, species,
        geometry=geo, photons_per_ion=cfg["run"]["photons_per_ion"],
        noise_seed=cfg["run"]["seed"])
    writer.pgm("synthetic.pgm", img)
    writer.json("synthetic.json", {
        "width": img.width, "height": img.height,
        "total_counts": float(img.intensities.sum()),
        "overlapped_pairs": img.metadata.get("overlapped_pairs", []),
        "structure": config.structure.value,
    })


def _cmd_thermometry(cfg, writer):
    path = cfg["run"]["image_path"]
    if not path:
        raise ConfigError("thermometry needs an image: set --image or key 'image_path'")
    trap = _trap(cfg)
    species = _species(cfg)
    n_ions = cfg["run"]["n_ions"] if cfg["run"]["n_ions"] > 0 else None
    result = imaging.thermometry_pipeline(path, trap, species, n_ions=n_ions,
                                          seed=cfg["run"]["seed"])
    est = result.estimate
    writer.json("thermometry.json", {
        "temperature_mk": est.value * 1e3,
        "stderr_mk": est.stderr * 1e3,
        "n_ions_used": est.n_ions_used,
        "below_resolution": est.below_resolution,
        "per_spot_sigma_um": (est.per_ion_sigmas * 1e6).tolist(),
        "gammas": est.gammas_used.tolist(),
        "provenance": result.provenance,
    })


def _curve_rows(cfg, n, trap, temperature):
    species = _species(cfg)
    red, blue = _lattice_specs(cfg)
    config = crystal.solve_equilibrium(n, trap.alpha, trap.beta,
                                       seed=cfg["run"]["seed"])
    ell = crystal.length_scale(species, trap.omega_z)
    offsets = np.sqrt(config.positions[:, 0]**2 + config.positions[:, 1]**2) * ell
    preds = lattice.predict_scattering_curve(
        temperature, _depths(cfg), red, blue, radial_offsets=offsets,
        n_samples=cfg["run"]["samples"], seed=cfg["run"]["seed"],
        span=cfg["run"]["span_periods"], species=species, omega_z=trap.omega_z)
    rows = [(p.depth * 1e3, p.p_red, p.p_blue, p.pinning_red, p.pinning_blue,
             p.secondary_fraction_red, p.secondary_fraction_blue) for p in preds]
    return rows


HEADER = ["depth_mK", "p_red", "p_blue", "pinning_red", "pinning_blue",
          "sec_frac_red", "sec_frac_blue"]


def _cmd_lattice_predict(cfg, writer):
    trap = _trap(cfg)
    rows = _curve_rows(cfg, cfg["run"]["n_ions"], trap,
                       cfg["run"]["temperature_mk"] * 1e-3)
    writer.csv("scattering_curve.csv", HEADER, rows)


def _cmd_reproduce_fig2(cfg, writer):
    name = cfg["run"]["crystal"]
    n, wz_khz, wr_khz, split, temp_mk = CRYSTAL_PRESETS[name]
    cfg = {sec: dict(vals) for sec, vals in cfg.items()}
    cfg["trap"].update({"omega_z_khz": wz_khz, "omega_rad_khz": wr_khz,
                        "radial_split": split})
    rows = _curve_rows(cfg, n, _trap(cfg), temp_mk * 1e-3)
    writer.csv(f"fig2_{name}.csv", HEADER, rows)


def _cmd_micromotion(cfg, writer):
    trap, config = _solve_preset_or_trap(cfg)
    species = _species(cfg)
    spectrum = modes.crystal_spectrum(config, omega_z=trap.omega_z)
    report = micromotion.systematic_error_report(trap, config, spectrum, species)
    out = report.to_dict()
    out["structure"] = config.structure.value
    writer.json("micromotion.json", out)


def _cmd_stats(cfg, writer):
    species = _species(cfg)
    stats = photonstats.scatter_stats(cfg["run"]["n_ions"], cfg["run"]["p"])
    out = stats.to_dict()
    out["detection_yield_per_ion"] = photonstats.detection_yield(
        cfg["run"]["p"], species)
    writer.json("stats.json", out)


COMMANDS = {
    "equilibrium": _cmd_equilibrium,
    "modes": _cmd_modes,
    "thermometry": _cmd_thermometry,
    "synth-image": _cmd_synth_image,
    "lattice-predict": _cmd_lattice_predict,
    "micromotion": _cmd_micromotion,
    "stats": _cmd_stats,
    "reproduce-fig2": _cmd_reproduce_fig2,
}

NUMERICAL_ERRORS = (crystal.NonConvergenceError, modes.UnstableModesError,
                    imaging.FitNonConvergenceError, imaging.BelowResolutionError,
                    imaging.PipelineError, np.linalg.LinAlgError, RuntimeError)


def run_command(command, cfg, out_dir):
    """Execute one subcommand; returns the process exit status."""
    writer = _Writer(out_dir)
    try:
        validate_values(cfg)
        COMMANDS[command](cfg, writer)
        writer.json(f"{command.replace('-', '_')}_provenance.json",
                    _provenance(cfg, command))
    except (ConfigError, ValueError) as exc:
        writer.rollback()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        writer.rollback()
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


# CLI flag -> (section, key); flag values override the config file
FLAG_MAP = {
    "seed": ("run", "seed"),
    "n": ("run", "n_ions"),
    "p": ("run", "p"),
    "temperature_mk": ("run", "temperature_mk"),
    "samples": ("run", "samples"),
    "photons": ("run", "photons_per_ion"),
    "depths_mk": ("run", "depths_mk"),
    "crystal": ("run", "crystal"),
    "image": ("run", "image_path"),
    "depth_mk": ("lattice", "depth_mk"),
    "detuning_thz": ("lattice", "detuning_thz"),
    "omega_z_khz": ("trap", "omega_z_khz"),
    "omega_rad_khz": ("trap", "omega_rad_khz"),
    "radial_split": ("trap", "radial_split"),
}


def build_parser():
    # SUPPRESS keeps subparser defaults from clobbering flags given
    # before the subcommand name
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="config file path")
    common.add_argument("--out", help="output directory (default: "
                        "$IONLATTICE_OUT or current directory)")
    common.add_argument("--seed", type=int, help="top-level random seed")
    parser = argparse.ArgumentParser(
        prog="ionlattice",
        description="Ion Coulomb crystals in optical standing-wave potentials",
        parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, *flags):
        p = sub.add_parser(name, parents=[common])
        for flag, kwargs in flags:
            p.add_argument(flag, **kwargs)
        return p

    num = {"type": float}
    add("equilibrium", ("--n", {"type": int}), ("--omega-z-khz", num),
        ("--omega-rad-khz", num), ("--radial-split", num))
    add("modes", ("--n", {"type": int}), ("--omega-z-khz", num),
        ("--omega-rad-khz", num), ("--radial-split", num))
    add("thermometry", ("--image", {}), ("--n", {"type": int}),
        ("--omega-z-khz", num), ("--omega-rad-khz", num), ("--radial-split", num))
    add("synth-image", ("--n", {"type": int}), ("--temperature-mk", num),
        ("--photons", {"type": int}), ("--omega-z-khz", num),
        ("--omega-rad-khz", num), ("--radial-split", num))
    add("lattice-predict", ("--n", {"type": int}), ("--temperature-mk", num),
        ("--samples", {"type": int}), ("--depths-mk", {}), ("--depth-mk", num),
        ("--detuning-thz", num), ("--omega-z-khz", num), ("--omega-rad-khz", num),
        ("--radial-split", num))
    add("micromotion", ("--n", {"type": int}), ("--omega-z-khz", num),
        ("--omega-rad-khz", num), ("--radial-split", num))
    add("stats", ("--n", {"type": int}), ("--p", num))
    add("reproduce-fig2", ("--crystal", {"choices": sorted(CRYSTAL_PRESETS)}),
        ("--samples", {"type": int}), ("--depths-mk", {}))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    config_path = getattr(args, "config", None)
    try:
        if config_path:
            with open(config_path, encoding="utf-8") as fh:
                cfg = parse_config(fh.read())
        else:
            cfg = _fill_defaults({})
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for flag, (sec, key) in FLAG_MAP.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[sec][key] = SCHEMA[sec][key][0](value)
    out_dir = getattr(args, "out", None) or os.environ.get("IONLATTICE_OUT", ".")
    return run_command(args.command, cfg, out_dir)


if __name__ == "__main__":
    sys.exit(main())
