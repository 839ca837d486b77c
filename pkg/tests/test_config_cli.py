import json

import numpy as np
import pytest
import yaml

from motcorr.atomic import TWO_LEVEL
from motcorr.cli import main
from motcorr.config import ConfigError, EnvelopeWarning, parse_config
from motcorr.detection import ClickStream
from motcorr.streamio import ReportRecord, read_stream, read_table, write_stream, write_table

TWO_LEVEL_CFG = {
    "seed": 11,
    "duration": 1.0e-3,
    "atom": {"preset": "two-level"},
    "field": {"intensity": 2.0, "detuning": 0.0, "uniform_field": [0, 0, 1]},
    "quadrupole": {"enabled": False},
    "detection": {"solid_angle_fraction": 0.5, "quantum_efficiency": 0.9, "resolution": 1e-9,
                  "dead_time": 0.0, "dark_rate": 0.0},
    "analyzer": {"kind": "none"},
}


def _write_cfg(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def two_level_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = _write_cfg(d / "run.yaml", TWO_LEVEL_CFG)
    assert main(["simulate", str(cfg)]) == 0
    return d


def test_simulate_click_count_matches_rate(two_level_run):
    rep = ReportRecord.load(two_level_run / "report.json")
    s = 2.0
    rate = TWO_LEVEL.gamma * (s / 2) / (1 + s)
    # pi dipole seen side-on through the 'none' analyzer
    expected = rate * 1e-3 * 1.5 * 0.5 * 0.9
    clicks = sum(rep.results["clicks"].values())
    assert abs(clicks - expected) < 5 * np.sqrt(expected)
    emitted = rep.results["emissions"]
    assert abs(emitted - rate * 1e-3) < 5 * np.sqrt(rate * 1e-3)


def test_simulate_byte_identical(two_level_run, tmp_path):
    cfg = _write_cfg(tmp_path / "run.yaml", TWO_LEVEL_CFG)
    assert main(["simulate", str(cfg)]) == 0
    for name in ("clicks.bin", "truth.bin"):
        assert (tmp_path / name).read_bytes() == (two_level_run / name).read_bytes()


def test_stream_carries_config_hash(two_level_run):
    f = read_stream(two_level_run / "clicks.bin")
    assert f.config_hash == parse_config(TWO_LEVEL_CFG).digest()


def test_two_level_rabi_end_to_end(two_level_run, tmp_path):
    out = tmp_path / "g"
    assert main(["correlate", str(two_level_run / "clicks.bin"), "--pair", "total", "total",
                 "--bin-width", "2e-9", "--max-lag", "300e-9", "--one-sided",
                 "--outdir", str(out), "--name", "g2"]) == 0
    header, data, _ = read_table(out / "g2.tsv")
    assert data[0, header.index("g2")] < 0.2
    assert main(["fit", str(out / "g2.tsv"), "--model", "rabi"]) == 0
    res = ReportRecord.load(out / "g2.rabi.json").results
    assert res["omega"] / TWO_LEVEL.gamma == pytest.approx(1.0, rel=0.15)


def test_invalid_type_names_field(tmp_path, capsys):
    bad = dict(TWO_LEVEL_CFG, field={"phi": "ninety"})
    cfg = _write_cfg(tmp_path / "bad.yaml", bad)
    assert main(["validate-config", str(cfg)]) == 3
    assert "field.phi" in capsys.readouterr().err


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config(dict(TWO_LEVEL_CFG, detection={"quantum_eff": 0.5}))
    assert any(loc == "detection.quantum_eff" for loc, _ in exc.value.errors)


def test_yaml_syntax_error(tmp_path):
    p = tmp_path / "x.yaml"
    p.write_text("seed: [1,\n")
    assert main(["validate-config", str(p)]) == 3


def test_validate_ok_and_envelope_warning(tmp_path, capsys):
    cfg = {"seed": 1, "duration": 1e-4, "field": {"intensity": 5.0}}
    p = _write_cfg(tmp_path / "w.yaml", cfg)
    assert main(["validate-config", str(p)]) == 0
    out = capsys.readouterr().out
    assert "envelope" in out and "ok:" in out
    with pytest.warns(EnvelopeWarning):
        parse_config(cfg)


def test_missing_file_is_io_error(tmp_path):
    assert main(["correlate", str(tmp_path / "nope.bin")]) == 4
    assert main(["simulate", str(tmp_path / "nope.yaml")]) == 4


def test_corrupt_stream_is_io_error(tmp_path):
    p = tmp_path / "c.bin"
    p.write_bytes(b"MOTCSTRM" + b"\0" * 60)
    assert main(["correlate", str(p)]) == 4


def test_unknown_channel_label(tmp_path):
    s = ClickStream([np.arange(10), np.arange(10)], ("a", "b"), 1e-6)
    write_stream(tmp_path / "s.bin", s)
    assert main(["correlate", str(tmp_path / "s.bin"), "--pair", "a", "zz"]) == 4


@pytest.fixture
def poisson_stream(tmp_path):
    rng = np.random.default_rng(4)
    T = 0.5
    times = [np.sort(rng.integers(0, int(T * 1e9), 20000)) for _ in range(2)]
    p = tmp_path / "poisson.bin"
    write_stream(p, ClickStream(times, ("a", "b"), T))
    return p


def test_correlate_poisson_flat(poisson_stream, tmp_path):
    assert main(["correlate", str(poisson_stream), "--pair", "a", "b", "--bin-width", "1e-6",
                 "--max-lag", "200e-6", "--outdir", str(tmp_path)]) == 0
    header, data, comments = read_table(tmp_path / "g2.tsv")
    g2 = data[:, header.index("g2")]
    assert abs(g2.mean() - 1) < 0.02
    assert not any("BIASED" in c for c in comments)
    rep = ReportRecord.load(tmp_path / "g2_report.json")
    assert not rep.results["biased"]


def test_correlate_single_stop_flagged(poisson_stream, tmp_path, capsys):
    assert main(["correlate", str(poisson_stream), "--single-stop", "--one-sided",
                 "--outdir", str(tmp_path), "--name", "ss"]) == 0
    assert "BIASED" in capsys.readouterr().out
    _, _, comments = read_table(tmp_path / "ss.tsv")
    assert any("BIASED" in c for c in comments)
    assert ReportRecord.load(tmp_path / "ss_report.json").results["biased"]


def test_correlate_pooled(poisson_stream, tmp_path):
    for mode in ("segment", "pooled"):
        assert main(["correlate", str(poisson_stream), str(poisson_stream), "--pair", "0", "1",
                     "--normalization", mode, "--outdir", str(tmp_path), "--name", mode]) == 0
    _, seg, _ = read_table(tmp_path / "segment.tsv")
    _, pooled, _ = read_table(tmp_path / "pooled.tsv")
    # identical streams: both modes agree
    np.testing.assert_allclose(seg, pooled, rtol=1e-12)
    assert main(["correlate", str(poisson_stream), str(poisson_stream), "--pair", "total", "total",
                 "--outdir", str(tmp_path)]) == 2


def test_fit_exp_end_to_end(tmp_path):
    lag = np.arange(0, 40e-6, 100e-9)
    g = 1 - 0.3 * np.exp(-(lag + 50e-9) / 5e-6)
    err = np.full_like(lag, 1e-3)
    write_table(tmp_path / "g.tsv", ["lag_s", "counts", "g2", "err"],
                np.column_stack([lag, np.ones_like(lag), g, err]))
    assert main(["fit", str(tmp_path / "g.tsv"), "--model", "exp", "--report", str(tmp_path / "f.json")]) == 0
    res = ReportRecord.load(tmp_path / "f.json").results
    assert res["tau_r"] == pytest.approx(5e-6, rel=1e-3)
    assert res["A"] == pytest.approx(-0.3, rel=1e-3)


def test_fit_powerlaw_end_to_end(tmp_path):
    lam = np.array([0.1, 0.2, 0.4, 0.8, 1.6])
    tau = 3e-6 * lam ** -0.5
    write_table(tmp_path / "p.tsv", ["Lambda", "tau_r_s", "tau_r_err"],
                np.column_stack([lam, tau, 0.02 * tau]))
    assert main(["fit", str(tmp_path / "p.tsv"), "--model", "powerlaw"]) == 0
    res = ReportRecord.load(tmp_path / "p.powerlaw.json").results
    assert res["alpha"] == pytest.approx(-0.5, abs=1e-6)


def test_fit_missing_column(tmp_path):
    write_table(tmp_path / "p.tsv", ["x"], np.ones((3, 1)))
    assert main(["fit", str(tmp_path / "p.tsv"), "--model", "powerlaw"]) == 4


def test_fit_impossible_is_numeric_error(tmp_path):
    write_table(tmp_path / "p.tsv", ["Lambda", "tau_r_s", "tau_r_err"], [[0.1, -1.0, 0.1], [0.2, 1.0, 0.1]])
    assert main(["fit", str(tmp_path / "p.tsv"), "--model", "powerlaw"]) == 5


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["fit"])
    assert exc.value.code == 2


def test_reproduce_survey(tmp_path, capsys):
    assert main(["reproduce", "antinode-survey", "--outdir", str(tmp_path), "--strict"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    rep = json.loads((tmp_path / "antinode-survey_report.json").read_text())
    assert rep["kind"] == "reproduce:antinode-survey"
