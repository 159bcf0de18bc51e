import json

import pytest

from pdtransport import cli, config, io

SMALL_MAXWELL = """
[scenario]
name = "small-maxwell"

[domain]
kind = "disk"
radius = 1.0

[measure]
preset = "lebesgue-annulus"
rho_min = 0.05
rho_max = 4.0

[boundary]
alpha = 0.0
kernel = "maxwell"

[grids]
boundary_cells = 32
angle_cells = 16
speed_cells = 8
condition_boundary_cells = 16
condition_angle_cells = 8

[run]
particles = 2000
t_end = 4.0
sample_dt = 1.0
seed = 5
l1_to_invariant = true
"""


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL_MAXWELL)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_presets_load():
    names = config.preset_names()
    assert {"maxwell-disk", "sweeping-heavy", "bounce-back", "two-patch-maxwell"} <= set(names)
    for name in names:
        cfg = config.load(f"preset:{name}")
        cfg.domain(), cfg.boundary_operator(cfg.measure())


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text(SMALL_MAXWELL.replace("radius = 1.0", "radius = 1.0\nradiuss = 2.0"))
    with pytest.raises(config.ConfigError) as err:
        config.load(p)
    assert err.value.key == "domain.radiuss"
    assert run("validate", "--config", p, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "domain.radiuss" in capsys.readouterr().err


@pytest.mark.parametrize("edit", [("[run]", "[runn]"), ("seed = 5", ""), ("radius = 1.0", "radius = \"one\"")])
def test_malformed_configs(tmp_path, edit):
    p = tmp_path / "bad.toml"
    p.write_text(SMALL_MAXWELL.replace(*edit))
    assert run("validate", "--config", p, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_config_hash_tracks_content():
    cfg = config.load("preset:maxwell-disk")
    assert cfg.config_hash() == config.load("preset:maxwell-disk").config_hash()
    assert cfg.with_overrides(run={"seed": 1}).config_hash() != cfg.config_hash()


def test_validate_passes_and_reports_oscillation(tmp_path):
    assert run("validate", "--config", "preset:two-patch-maxwell", "--out", tmp_path) == cli.EXIT_OK
    report = json.loads((tmp_path / "validate.json").read_text())
    assert report["passed"]
    assert report["oscillation"]["predicate"] is False


def manifest_ok(out):
    m = json.loads((out / io.MANIFEST).read_text(encoding="utf-8"))
    listed = set(m["files"])
    present = {p.name for p in out.iterdir() if p.is_file() and p.name != io.MANIFEST}
    assert listed == present
    for name, info in m["files"].items():
        assert info["sha256"] == io.sha256(out / name)
    for key in ("tol_graze", "tol_boundary", "omega_gradient_sign"):
        assert key in m["tolerances"]
    return m


def test_spectral_then_simulate(tmp_path, scenario):
    out = tmp_path / "run"
    assert run("spectral", "--config", scenario, "--out", out) == cli.EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["lambda_max"] == pytest.approx(1.0, abs=1e-10)
    assert summary["condition_verdict"] == "finite"
    assert (out / "psi.csv").exists() and (out / "operator_M0.csv").exists()
    manifest_ok(out)
    assert run("simulate", "--config", scenario, "--out", out) == cli.EXIT_OK
    m = manifest_ok(out)
    assert m["results"]["particles"] == 2000
    header, rows = io.read_csv(out / "series.csv")
    assert header[1] == "l1_to_invariant" and len(rows) == 5
    assert all(r[1] != "" for r in rows)
    # same seed, other thread count: byte-identical tables
    out2 = tmp_path / "again"
    out2.mkdir()
    (out2 / "psi.csv").write_bytes((out / "psi.csv").read_bytes())
    assert run("simulate", "--config", scenario, "--out", out2, "--threads", 3) == cli.EXIT_OK
    for name in ("series.csv", "final_density.csv"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()
    assert b"\r\n" not in (out / "series.csv").read_bytes()
    # a different seed changes the sample
    out3 = tmp_path / "other"
    out3.mkdir()
    (out3 / "psi.csv").write_bytes((out / "psi.csv").read_bytes())
    assert run("simulate", "--config", scenario, "--out", out3, "--seed", 6) == cli.EXIT_OK
    assert (out / "series.csv").read_bytes() != (out3 / "series.csv").read_bytes()


def test_simulate_needs_psi(tmp_path, scenario):
    assert run("simulate", "--config", scenario, "--out", tmp_path / "x") == cli.EXIT_CONFIG


def test_bounce_back_spectral_reports_non_convergence(tmp_path):
    assert run("spectral", "--config", "preset:bounce-back", "--out", tmp_path) == cli.EXIT_NUMERIC
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "no-convergence"
    assert summary["oscillation_diagnostic"]["tail_ratio"] == pytest.approx(1.0, abs=1e-6)
    assert not (tmp_path / "psi.csv").exists()


def test_sweeping_spectral_has_no_certificate(tmp_path):
    cfg = config.load("preset:sweeping-heavy")
    p = tmp_path / "sweep.toml"
    text = config.preset_text("sweeping-heavy")
    p.write_text(text.replace("boundary_cells = 64", "boundary_cells = 32"))
    assert run("spectral", "--config", p, "--out", tmp_path / "o") == cli.EXIT_OK
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["condition_verdict"] == "divergent"
    assert "no invariant density certificate" in summary["notes"]
    assert not (tmp_path / "o" / "psi.csv").exists()
    assert cfg.name == "sweeping-heavy"


def test_p_study_matches_oracle(tmp_path):
    assert run("sweep-study", "--config", "preset:sweeping-heavy", "--out", tmp_path, "--axis", "p") == cli.EXIT_OK
    header, rows = io.read_csv(tmp_path / "study.csv")
    probe = header.index("probe_verdict")
    oracle = header.index("oracle_verdict")
    probed = [r for r in rows if r[probe] != "non-normalisable"]
    assert len(probed) == 4
    assert all(r[probe] == r[oracle] for r in probed)
    assert rows[-1][0] == "3.5" and rows[-1][probe] == "non-normalisable"
