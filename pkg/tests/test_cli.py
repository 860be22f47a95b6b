import json

import pytest

from ionlattice.cli import ConfigError, main, parse_config, render_config


def test_parse_minimal_fills_defaults():
    cfg = parse_config("[run]\nn_ions = 4\n")
    assert cfg["run"]["n_ions"] == 4
    assert cfg["species"]["lattice_wavelength_nm"] == 866.0
    assert cfg["species"]["mass_amu"] == 40.0
    assert cfg["lattice"]["ramp_us"] == 2.0


def test_parse_unknown_key_with_line_number():
    with pytest.raises(ConfigError, match="line 3.*nonsense"):
        parse_config("[trap]\nomega_z_khz = 71\nnonsense = 1\n")


def test_parse_unknown_section():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("[warp]\nfactor = 9\n")


def test_parse_type_mismatch():
    with pytest.raises(ConfigError, match="line 2.*expects float"):
        parse_config("[lattice]\ndepth_mk = abc\n")


def test_negative_frequency_names_key(tmp_path, capsys):
    config = tmp_path / "bad.ini"
    config.write_text("[trap]\nomega_z_khz = -5\n")
    status = main(["--config", str(config), "--out", str(tmp_path / "o"),
                   "equilibrium"])
    assert status == 1
    assert "omega_z_khz" in capsys.readouterr().err


def test_flag_overrides_file(tmp_path):
    config = tmp_path / "cfg.ini"
    config.write_text("[lattice]\ndepth_mk = 10\n")
    out = tmp_path / "out"
    status = main(["--config", str(config), "--out", str(out),
                   "lattice-predict", "--n", "1", "--samples", "200",
                   "--depths-mk", "0,24", "--depth-mk", "24"])
    assert status == 0
    sidecar = json.loads((out / "lattice_predict_provenance.json").read_text())
    assert "depth_mk = 24.0" in sidecar["config"]


def test_equilibrium_command_structure(tmp_path):
    out = tmp_path / "eq"
    status = main(["--out", str(out), "--seed", "2", "equilibrium", "--n", "6",
                   "--omega-z-khz", "105", "--omega-rad-khz", "192",
                   "--radial-split", "0.05"])
    assert status == 0
    data = json.loads((out / "equilibrium.json").read_text())
    assert data["structure"] == "three_dimensional"
    assert len(data["positions"]) == 6


def test_stats_command(tmp_path):
    out = tmp_path / "st"
    assert main(["--out", str(out), "stats", "--n", "8", "--p", "0.1"]) == 0
    data = json.loads((out / "stats.json").read_text())
    assert data["secondary_fraction"] == pytest.approx(0.288, abs=5e-4)


def test_modes_command(tmp_path):
    out = tmp_path / "md"
    assert main(["--out", str(out), "modes", "--n", "2", "--omega-z-khz", "71",
                 "--omega-rad-khz", "350", "--radial-split", "0"]) == 0
    data = json.loads((out / "modes.json").read_text())
    assert data["eigenvalues"][0] == pytest.approx(1.0, abs=1e-9)
    assert data["frequencies_hz"][0] == pytest.approx(71e3, rel=1e-9)


def test_reproduce_fig2_csv(tmp_path):
    out = tmp_path / "fig2"
    status = main(["--out", str(out), "reproduce-fig2", "--crystal", "string8",
                   "--samples", "500", "--depths-mk", "0,12,24"])
    assert status == 0
    lines = (out / "fig2_string8.csv").read_text().splitlines()
    assert lines[0] == ("depth_mK,p_red,p_blue,pinning_red,pinning_blue,"
                        "sec_frac_red,sec_frac_blue")
    assert len(lines) == 4
    last = [float(v) for v in lines[-1].split(",")]
    assert last[0] == 24.0 and last[1] >= last[2]


def test_rerun_from_provenance_is_bitwise_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["--out", str(out1), "--seed", "5", "equilibrium", "--n", "4",
                 "--omega-z-khz", "87", "--omega-rad-khz", "185",
                 "--radial-split", "0.05"]) == 0
    sidecar = json.loads((out1 / "equilibrium_provenance.json").read_text())
    config = tmp_path / "echo.ini"
    config.write_text(sidecar["config"])
    assert main(["--config", str(config), "--out", str(out2), "equilibrium"]) == 0
    assert (out1 / "equilibrium.json").read_bytes() == \
        (out2 / "equilibrium.json").read_bytes()


def test_synth_then_thermometry(tmp_path):
    out = tmp_path / "pipe"
    assert main(["--out", str(out), "synth-image", "--n", "4",
                 "--omega-z-khz", "87", "--omega-rad-khz", "185",
                 "--radial-split", "0.05", "--temperature-mk", "3.5",
                 "--seed", "9"]) == 0
    assert main(["--out", str(out), "thermometry",
                 "--image", str(out / "synthetic.pgm"), "--n", "4",
                 "--omega-z-khz", "87", "--omega-rad-khz", "185",
                 "--radial-split", "0.05"]) == 0
    data = json.loads((out / "thermometry.json").read_text())
    assert data["temperature_mk"] == pytest.approx(3.5, rel=0.2)


def test_numerical_failure_cleans_outputs(tmp_path, capsys):
    out = tmp_path / "fail"
    status = main(["--out", str(out), "thermometry",
                   "--image", str(tmp_path / "missing.pgm")])
    assert status == 2
    assert not out.exists() or not list(out.iterdir())


def test_render_config_round_trip():
    cfg = parse_config("[run]\nseed = 9\n[lattice]\ndepth_mk = 7.5\n")
    again = parse_config(render_config(cfg))
    assert again == cfg
