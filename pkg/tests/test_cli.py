import filecmp
import json

import numpy as np
import pytest

from endorsim import config
from endorsim.cli import main
from endorsim.fileio import read_map, read_spectrum, read_table, write_spectrum
from endorsim.lineshapes import FanoParams, Spectrum, fano
from endorsim.spinmodel import nmr_lines, ti47_field, ti47_system


@pytest.fixture(autouse=True)
def _no_env_config(monkeypatch):
    monkeypatch.delenv(config.CONFIG_ENV, raising=False)


def run(*argv):
    return main([str(a) for a in argv])


# -- predict / sweep ---------------------------------------------------------

def test_predict_nmr_matches_library(tmp_path):
    out = tmp_path / "n.csv"
    assert run("predict", "--out", out) == 0
    rows = {r["label"]: float(r["frequency_MHz"]) for r in read_table(out)}
    lib = {k: ln.frequency for k, ln in nmr_lines(ti47_system(), ti47_field()).items()}
    assert set(rows) == set(lib)
    for lab in lib:
        assert rows[lab] == pytest.approx(lib[lab], abs=1e-9)
    assert 45 < rows["I"] < 52 and 80 < rows["II"] < 88


def test_predict_weight_floor_can_empty_the_table(tmp_path, capsys):
    out = tmp_path / "n.csv"
    assert run("predict", "--weight-floor", 1e9, "--out", out) == 0
    assert read_table(out) == []
    assert "0 line(s)" in capsys.readouterr().out


def test_predict_esr_without_nuclear_spin(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("spin_system: {i_nuclear: 0, kappa_mhz: 0.0}\n")
    out = tmp_path / "e.csv"
    assert run("--config", cfg, "predict", "--channel", "esr", "--out", out) == 0
    assert len(read_table(out)) == 1


def test_invalid_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("spin_system: {a_z: 3}\n")
    assert run("--config", cfg, "predict", "--out", tmp_path / "n.csv") == 2
    assert "a_z" in capsys.readouterr().err
    assert not (tmp_path / "n.csv").exists()


def test_bad_arguments_exit_2(tmp_path):
    assert run("predict", "--channel", "xyz") == 2
    assert run("nonsense") == 2


def test_sweep_rejects_inverted_range(tmp_path):
    assert run("sweep", "--b-start", 1.0, "--b-end", 0.5, "--out", tmp_path / "s.csv") == 2


def test_sweep_endpoints_agree_with_predict(tmp_path):
    sw = tmp_path / "s.csv"
    assert run("sweep", "--b-start", 0.45, "--b-end", 0.6, "--steps", 2, "--out", sw) == 0
    rows = read_table(sw)
    assert len(rows) == 2
    for row in rows:
        b = float(row["b_z_T"])
        pr = tmp_path / f"p{b}.csv"
        assert run("predict", "--b-z", b, "--out", pr) == 0
        for p in read_table(pr):
            assert float(row[f"nmr_{p['label']}_MHz"]) == pytest.approx(float(p["frequency_MHz"]),
                                                                         abs=1e-9)


# -- simulate ----------------------------------------------------------------

def test_endor_without_nmr_drive_is_flat(tmp_path):
    out = tmp_path / "e.csv"
    assert run("simulate", "--mode", "endor", "--nmr-drive", 0, "--out", out) == 0
    spec = read_spectrum(out)
    assert np.ptp(spec.signal) <= 1e-12 * max(1.0, np.abs(spec.signal).max())


def test_endor_off_line_needs_flag(tmp_path):
    out = tmp_path / "e.csv"
    assert run("simulate", "--mode", "endor", "--f-esr", 100.0, "--out", out) == 2
    assert run("simulate", "--mode", "endor", "--f-esr", 100.0, "--off-resonant",
               "--out", out) == 0


def test_endor_map_writes_centered_variant(tmp_path):
    out = tmp_path / "map.csv"
    assert run("simulate", "--mode", "endor-map", "--grid", "40:90:1",
               "--f-esr-grid", "3700:3760:4", "--out", out) == 0
    rows, cols, m = read_map(out)
    _, _, c = read_map(tmp_path / "map_centered.csv")
    assert m.shape == (len(rows), len(cols)) == c.shape
    np.testing.assert_allclose(c.mean(axis=0), 0, atol=1e-12 * max(1, np.abs(m).max()))
    np.testing.assert_allclose(c, m - m.mean(axis=0), atol=1e-12)


def test_simulate_is_deterministic(tmp_path):
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    for path, seed in ((a, 4), (b, 4), (c, 5)):
        assert run("simulate", "--mode", "esr", "--noise-sigma", 0.01, "--seed", seed,
                   "--out", path) == 0
    assert filecmp.cmp(a, b, shallow=False)
    assert not filecmp.cmp(a, c, shallow=False)


def test_bad_grid_exits_2(tmp_path):
    assert run("simulate", "--mode", "esr", "--grid", "5:1:1", "--out", tmp_path / "x.csv") == 2
    assert run("simulate", "--mode", "esr", "--grid", "abc", "--out", tmp_path / "x.csv") == 2


# -- fit ---------------------------------------------------------------------

def test_fit_esr_round_trip(tmp_path):
    spec_path, rep = tmp_path / "esr.csv", tmp_path / "fit.json"
    assert run("simulate", "--mode", "esr", "--out", spec_path) == 0
    assert run("fit", "--kind", "esr", "--input", spec_path, "--mode", "free", "--out", rep) == 0
    report = json.loads(rep.read_text())
    found = sorted(p["center_MHz"] for p in report["peaks"])
    pred = sorted(float(r["frequency_MHz"]) for r in _esr_table(tmp_path))
    np.testing.assert_allclose(found, pred, atol=0.5)
    assert report["warnings"] == []


def test_fit_esr_comb_centre(tmp_path):
    # the comb ties the lines to equal spacing, so only its centre is compared
    spec_path, rep = tmp_path / "esr.csv", tmp_path / "fit.json"
    assert run("simulate", "--mode", "esr", "--out", spec_path) == 0
    assert run("fit", "--kind", "esr", "--input", spec_path, "--out", rep) == 0
    report = json.loads(rep.read_text())
    pred = [float(r["frequency_MHz"]) for r in _esr_table(tmp_path)]
    assert report["f0_MHz"] == pytest.approx(np.mean(pred), abs=0.5)
    assert report["spacing_MHz"] == pytest.approx(np.ptp(pred) / 5, abs=1.0)


def _esr_table(tmp_path):
    out = tmp_path / "pred.csv"
    assert run("predict", "--channel", "esr", "--out", out) == 0
    return read_table(out)


def test_fit_constant_spectrum_exits_3_with_report(tmp_path):
    path, rep = tmp_path / "const.csv", tmp_path / "fit.json"
    write_spectrum(path, Spectrum(np.arange(3400.0, 4700.0, 1.0), np.full(1300, 0.2),
                                  {"b_z": 0.45}))
    assert run("fit", "--kind", "esr", "--input", path, "--out", rep) == 3
    assert json.loads(rep.read_text())["converged"] is False


def test_fit_wrong_peak_count_warns(tmp_path, capsys):
    f = np.arange(3400.0, 4500.0, 1.0)
    centers = 3600.0 + 150.0 * np.arange(5)
    sig = sum(fano(f, FanoParams(c, 20.0, 1.0, 1.0)) for c in centers)
    noise = 0.002 * np.random.default_rng(0).standard_normal(f.size)
    path, rep = tmp_path / "five.csv", tmp_path / "fit.json"
    write_spectrum(path, Spectrum(f, sig + noise, {"b_z": 0.45}))
    assert run("fit", "--kind", "esr", "--input", path, "--n-peaks", 3, "--spacing-guess", 150,
               "--out", rep) == 0
    assert json.loads(rep.read_text())["warnings"]
    assert "peak count" in capsys.readouterr().err
    assert run("fit", "--kind", "esr", "--input", path, "--n-peaks", 5, "--spacing-guess", 150,
               "--out", rep) == 0
    assert json.loads(rep.read_text())["warnings"] == []


def test_fit_missing_file_exits_2(tmp_path):
    assert run("fit", "--kind", "nmr", "--input", tmp_path / "none.csv") == 2


# -- calibrate ---------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    assert main(["make-dataset", "--out-dir", str(d)]) == 0
    return d


def test_calibrate_end_to_end(cli_dataset, tmp_path):
    out = tmp_path / "cal"
    code = run("calibrate", "--esr", cli_dataset / "esr_*.csv", "--nmr", cli_dataset / "endor_*.csv",
               "--out-dir", out)
    assert code == 0
    rep = json.loads((out / "calibration.json").read_text())
    assert rep["converged"] is True
    for name in ("calibrated_config.yaml", "residuals_esr_peaks.csv", "residuals_f0_linear.csv"):
        assert (out / name).exists()
    cfg = config.load(str(out / "calibrated_config.yaml"))
    assert cfg.spin_system.a_hyperfine[2] == pytest.approx(ti47_system().a_hyperfine[2], rel=5e-3)

    again = tmp_path / "cal2"
    assert run("calibrate", "--esr", cli_dataset / "esr_*.csv", "--nmr",
               cli_dataset / "endor_*.csv", "--out-dir", again) == 0
    for name in ("calibration.json", "calibrated_config.yaml"):
        assert filecmp.cmp(out / name, again / name, shallow=False)


def test_calibrate_single_field_exits_3(cli_dataset, tmp_path):
    one = sorted(cli_dataset.glob("esr_*.csv"))[0]
    out = tmp_path / "cal"
    assert run("calibrate", "--esr", one, "--out-dir", out) == 3
    rep = json.loads((out / "calibration.json").read_text())
    assert rep["failed_stage"] == "f0_linear"


def test_calibrate_input_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    write_spectrum(bad, Spectrum(np.arange(10.0), np.zeros(10), {}))
    assert run("calibrate", "--esr", bad, "--out-dir", tmp_path) == 2
    assert "missing b_z" in capsys.readouterr().err
    assert run("calibrate", "--esr", tmp_path / "nothing_*.csv", "--out-dir", tmp_path) == 2


def test_make_dataset_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("make-dataset", "--out-dir", a, "--seed", 3) == 0
    assert run("make-dataset", "--out-dir", b, "--seed", 3) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names and names == sorted(p.name for p in b.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert mismatch == [] and errors == []
