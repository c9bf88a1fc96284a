import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from dualspade.cli import main
from dualspade.optics import hg_intensity_fraction


@pytest.fixture()
def runner():
    return CliRunner()


def _invoke(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def _read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


@pytest.fixture()
def calib_csv(tmp_path, runner):
    _invoke(runner, ["--out-dir", str(tmp_path), "ideal-calib"])
    return tmp_path / "calibration.csv"


@pytest.fixture()
def model_json(tmp_path, runner, calib_csv):
    _invoke(runner, ["--out-dir", str(tmp_path), "fit", "--scans", str(calib_csv), "--alias"])
    return tmp_path / "model.json"


class TestIdealCalib:
    def test_first_row_values(self, tmp_path, runner, calib_csv):
        header, rows = _read_rows(calib_csv)
        assert header == ["source_id", "position_w0", "m1_hg00", "m1_hg10", "m1_hg20", "m1_hg30", "m2_hg10"]
        first = [float(v) for v in rows[0]]
        assert first[:2] == [1.0, -0.35]
        # dual layout, position -0.35: demux-1 entries are half the overlap
        # fractions, the shifted demux-2 HG10 entry sits at displacement -0.65
        for k, order in enumerate(range(4)):
            assert first[2 + k] == pytest.approx(0.5 * hg_intensity_fraction(order, -0.35), abs=1e-12)
        assert first[6] == pytest.approx(0.5 * hg_intensity_fraction(1, -0.65), abs=1e-12)

    def test_single_demux_has_four_mode_columns(self, tmp_path, runner):
        _invoke(runner, ["--out-dir", str(tmp_path), "ideal-calib", "--no-dual", "--out", "single.csv"])
        header, _ = _read_rows(tmp_path / "single.csv")
        assert header == ["source_id", "position_w0", "m1_hg00", "m1_hg10", "m1_hg20", "m1_hg30"]

    def test_identical_sources_by_default(self, calib_csv):
        _, rows = _read_rows(calib_csv)
        half = len(rows) // 2
        for r1, r2 in zip(rows[:half], rows[half:]):
            assert r1[1:] == r2[1:]

    def test_distinguishable_perturbs_source2(self, tmp_path, runner):
        _invoke(runner, ["--out-dir", str(tmp_path), "ideal-calib", "--distinguishable", "--out", "d.csv"])
        _, rows = _read_rows(tmp_path / "d.csv")
        half = len(rows) // 2
        assert any(r1[2:] != r2[2:] for r1, r2 in zip(rows[:half], rows[half:]))

    def test_manifest_written(self, tmp_path, calib_csv):
        doc = json.loads((tmp_path / "ideal_calib_manifest.json").read_text())
        assert doc["subcommand"] == "ideal_calib"
        assert doc["config"]["points"] == 61
        assert str(calib_csv) in doc["outputs"]


class TestFit:
    def test_model_round_trips(self, model_json):
        doc = json.loads(model_json.read_text())
        assert doc["degree"] == 12

    def test_manifest_records_input_digest(self, tmp_path, calib_csv, model_json):
        doc = json.loads((tmp_path / "fit_manifest.json").read_text())
        assert str(calib_csv) in doc["inputs"]
        assert len(doc["inputs"][str(calib_csv)]) == 64


class TestSimulate:
    def test_scene_observation_csv(self, tmp_path, runner, model_json):
        _invoke(runner, [
            "--out-dir", str(tmp_path), "--seed", "7", "simulate",
            "--model", str(model_json), "--d", "0.2", "--c", "0.0", "--p", "0.5",
            "--bins", "20", "--photons", "1e9",
        ])
        header, rows = _read_rows(tmp_path / "observations.csv")
        assert header[:4] == ["d_ref", "c_ref", "p_ref", "bin_index"]
        assert len(rows) == 20
        assert float(rows[0][0]) == 0.2

    def test_seeded_repeat_is_byte_identical(self, tmp_path, runner, model_json):
        args = [
            "--out-dir", str(tmp_path), "--seed", "7", "simulate",
            "--model", str(model_json), "--d", "0.2", "--c", "0.0", "--p", "0.5",
            "--bins", "20", "--photons", "1e9",
        ]
        _invoke(runner, args + ["--out", "a.csv"])
        _invoke(runner, args + ["--out", "b.csv"])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_single_position_timeseries(self, tmp_path, runner, model_json):
        _invoke(runner, [
            "--out-dir", str(tmp_path), "simulate", "--model", str(model_json),
            "--single-position", "-0.05", "--single-position", "0.05",
            "--noise", "gaussian", "--sigma", "1e-4", "--bins", "10",
            "--out", "ts.csv",
        ])
        header, rows = _read_rows(tmp_path / "ts.csv")
        assert header[:2] == ["position_w0", "bin_index"]
        assert len(rows) == 20
        assert {float(r[0]) for r in rows} == {-0.05, 0.05}

    def test_missing_scene_params_exit_2(self, tmp_path, runner, model_json):
        result = runner.invoke(main, [
            "--out-dir", str(tmp_path), "simulate", "--model", str(model_json),
        ])
        assert result.exit_code == 2

    def test_invalid_scene_exit_2(self, tmp_path, runner, model_json):
        result = runner.invoke(main, [
            "--out-dir", str(tmp_path), "simulate", "--model", str(model_json),
            "--d", "0.9", "--c", "0.0", "--p", "0.5",
        ])
        assert result.exit_code == 2


class TestEmulate:
    def test_happy_path(self, tmp_path, runner, model_json):
        _invoke(runner, [
            "--out-dir", str(tmp_path), "simulate", "--model", str(model_json),
            "--single-position", "-0.05", "--single-position", "0.05",
            "--noise", "gaussian", "--sigma", "1e-4", "--bins", "10",
            "--out", "ts.csv",
        ])
        _invoke(runner, [
            "--out-dir", str(tmp_path), "emulate", "--timeseries", str(tmp_path / "ts.csv"),
            "--x1", "-0.05", "--x2", "0.05", "--p", "0.4",
        ])
        header, rows = _read_rows(tmp_path / "emulated.csv")
        assert len(rows) == 10
        assert float(rows[0][0]) == pytest.approx(0.1)
        assert float(rows[0][2]) == pytest.approx(0.4)

    def test_unknown_position_exit_2(self, tmp_path, runner, model_json):
        _invoke(runner, [
            "--out-dir", str(tmp_path), "simulate", "--model", str(model_json),
            "--single-position", "-0.05", "--single-position", "0.05",
            "--bins", "5", "--out", "ts.csv",
        ])
        result = runner.invoke(main, [
            "--out-dir", str(tmp_path), "emulate", "--timeseries", str(tmp_path / "ts.csv"),
            "--x1", "-0.2", "--x2", "0.05", "--p", "0.4",
        ])
        assert result.exit_code == 2


class TestEstimate:
    def test_noiseless_observation_near_zero_bias(self, tmp_path, runner, model_json):
        _invoke(runner, [
            "--out-dir", str(tmp_path), "simulate", "--model", str(model_json),
            "--d", "0.15", "--c", "0.05", "--p", "0.4",
            "--noise", "gaussian", "--sigma", "0.0", "--bins", "10",
        ])
        _invoke(runner, [
            "--out-dir", str(tmp_path), "estimate", "--model", str(model_json),
            "--obs", str(tmp_path / "observations.csv"),
        ])
        header, rows = _read_rows(tmp_path / "estimates.csv")
        assert header[0] == "d_ref"
        row = dict(zip(header, rows[0]))
        assert float(row["d_ref"]) == 0.15
        assert abs(float(row["d_bias"])) < 1e-6

    def test_preset_truncated(self, tmp_path, runner, model_json):
        _invoke(runner, [
            "--out-dir", str(tmp_path), "estimate", "--model", str(model_json),
            "--preset", "fig4", "--bins", "5", "--photons", "1e9", "--limit-scenes", "2",
        ])
        _, rows = _read_rows(tmp_path / "estimates.csv")
        assert len(rows) == 2

    def test_obs_and_preset_mutually_exclusive(self, tmp_path, runner, model_json):
        result = runner.invoke(main, [
            "--out-dir", str(tmp_path), "estimate", "--model", str(model_json),
        ])
        assert result.exit_code == 2


class TestCrbSweep:
    def test_outputs_and_monotone_sigma_d(self, tmp_path, runner):
        _invoke(runner, [
            "--out-dir", str(tmp_path), "crb-sweep", "--sources", "distinguishable",
            "--config", "2mplc", "--n-d", "6", "--n-c", "2",
        ])
        doc = json.loads((tmp_path / "crb_sweep_summary.json").read_text())
        mean = doc["distinguishable_2mplc"]["d"]["mean"]
        assert len(mean) == 6
        assert all(np.diff(mean) < 0)
        header, rows = _read_rows(tmp_path / "crb_sweep_distinguishable_2mplc.csv")
        assert header[0] == "d_ref"
        assert len(rows) == 12

    def test_um_units_scale_lengths(self, tmp_path, runner):
        _invoke(runner, [
            "--out-dir", str(tmp_path), "--units", "um", "crb-sweep",
            "--sources", "distinguishable", "--config", "2mplc", "--n-d", "3", "--n-c", "2",
        ])
        header, rows = _read_rows(tmp_path / "crb_sweep_distinguishable_2mplc.csv")
        d_col = header.index("d_ref")
        assert float(rows[0][d_col]) == pytest.approx(0.01 * 320.0)
