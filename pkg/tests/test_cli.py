import csv
import json
import subprocess
import sys

import pytest

from csphase import cli
from csphase.consistency import evaluate_dH_du, evaluate_H
from csphase.model import ModelParams


def run(tmp_path, *args):
    return cli.main([*args, "--out", str(tmp_path)])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def manifest(tmp_path, command):
    return json.loads((tmp_path / f"{command}.json").read_text())


class TestCommands:
    def test_h_curve_rows_are_exact(self, tmp_path):
        assert run(tmp_path, "h-curve", "--d-list", "0.3,0.8", "--u-steps", "5", "--u-max", "1.2", "--gnuplot") == 0
        rows = read_csv(tmp_path / "h_curve.csv")
        assert len(rows) == 10
        for r in rows:
            u, D = float(r["u"]), float(r["D"])
            p = ModelParams(1, 2.0, D)
            assert float(r["H"]) == evaluate_H(p, u)
            assert float(r["dH_du"]) == evaluate_dH_du(p, u)
            if u == 0.0:
                assert float(r["H"]) == 0.0
        assert (tmp_path / "h_curve.gp").exists()
        m = manifest(tmp_path, "h-curve")
        assert m["command"] == "h-curve" and m["params"]["alpha"] == 2.0
        assert {o["path"] for o in m["outputs"]} == {"h_curve.csv", "h_curve.gp"}
        assert m["version"] and m["duration_s"] >= 0

    def test_bifurcation(self, tmp_path):
        assert run(tmp_path, "bifurcation", "--alpha-list", "2", "--d-max", "0.05") == 0
        rows = read_csv(tmp_path / "bifurcation.csv")
        assert rows and all(float(r["u"]) > 0.8 for r in rows)
        crit = manifest(tmp_path, "bifurcation")["critical_noise"][0]
        assert crit["slope_closed_form"] == pytest.approx(-0.3)
        assert crit["slope_at_zero"] == pytest.approx(-0.3, abs=0.05)

    def test_phase_diagram(self, tmp_path):
        assert run(tmp_path, "phase-diagram", "--alpha-min", "1", "--alpha-max", "3", "--alpha-steps", "2",
                   "--d-min", "0.2", "--d-max", "0.8", "--d-steps", "3") == 0
        grid = read_csv(tmp_path / "phase_diagram.csv")
        assert len(grid) == 6
        assert {r["n_states"] for r in grid} == {"1", "2"}
        assert len(read_csv(tmp_path / "phase_boundary.csv")) == 2

    def test_dc(self, tmp_path):
        assert run(tmp_path, "dc", "--alpha-list", "2 3") == 0
        rows = read_csv(tmp_path / "dc.csv")
        assert float(rows[0]["D_c"]) == pytest.approx(0.52900975310696703, abs=1e-8)
        assert float(rows[1]["D_c"]) == pytest.approx(0.58345425075204282, abs=1e-8)

    def test_simulate(self, tmp_path):
        assert run(tmp_path, "simulate", "--preset", "stability", "--noise-over-dc", "0.25", "--n-particles", "100",
                   "--n-runs", "2", "--t-end", "1", "--record-every", "10") == 0
        trace = read_csv(tmp_path / "trace.csv")
        assert len(trace) == 11 and set(trace[0]) == {"t", "mean_v", "free_energy"}
        hist = read_csv(tmp_path / "histogram.csv")
        assert sum(float(r["mass"]) for r in hist) == pytest.approx(1.0)
        m = manifest(tmp_path, "simulate")
        assert m["seed"] == m["sim_params"]["seed"]
        assert m["sim_params"]["noise"] == pytest.approx(0.25 * 0.58345425075204282, rel=1e-7)

    def test_simulate_2d_histogram(self, tmp_path):
        assert run(tmp_path, "simulate", "--dim", "2", "--noise", "0.2", "--n-particles", "50", "--n-runs", "1",
                   "--t-end", "0.2", "--record-every", "10") == 0
        hist = read_csv(tmp_path / "histogram.csv")
        assert set(hist[0]) == {"bin_lo_1", "bin_hi_1", "bin_lo_2", "bin_hi_2", "mass"}
        assert set(read_csv(tmp_path / "trace.csv")[0]) == {"t", "mean_v1", "mean_v2", "free_energy"}

    def test_laplace_check_passes(self, tmp_path):
        assert run(tmp_path, "laplace-check", "--alpha", "2") == 0
        rows = read_csv(tmp_path / "laplace_check.csv")
        assert all(r["status"] == "pass" for r in rows)
        assert {"dH_du(1,0)", "dH_dD(1,0)", "bifurcation_slope", "c0", "c1", "c2"} <= {r["name"] for r in rows}


class TestReproducibility:
    def test_digests_stable(self, tmp_path):
        args = ("simulate", "--noise", "0.3", "--n-particles", "80", "--n-runs", "3", "--t-end", "0.5",
                "--record-every", "10", "--seed", "11")
        assert run(tmp_path / "a", *args) == 0
        assert run(tmp_path / "b", *args, "--threads", "2") == 0
        da = manifest(tmp_path / "a", "simulate")["outputs"]
        db = manifest(tmp_path / "b", "simulate")["outputs"]
        assert da == db

    def test_config_precedence(self, tmp_path):
        conf = tmp_path / "run.ini"
        conf.write_text("alpha = 3.0\nd_list = 0.4\nu_steps = 3\n")
        assert run(tmp_path, "h-curve", "--config", str(conf), "--u-steps", "4") == 0
        m = manifest(tmp_path, "h-curve")["params"]
        assert (m["alpha"], m["d_list"], m["u_steps"], m["u_max"]) == (3.0, "0.4", 4, 2.0)
        assert len(read_csv(tmp_path / "h_curve.csv")) == 4


class TestExitCodes:
    def test_bad_value(self, tmp_path):
        assert run(tmp_path, "h-curve", "--alpha", "-1") == 2

    def test_unknown_config_key(self, tmp_path):
        conf = tmp_path / "bad.ini"
        conf.write_text("colour = red\n")
        assert run(tmp_path, "dc", "--config", str(conf)) == 2

    def test_missing_config(self, tmp_path):
        assert run(tmp_path, "dc", "--config", str(tmp_path / "absent.ini")) == 2

    def test_numerical_failure(self, tmp_path):
        code = run(tmp_path, "simulate", "--noise", "0.1", "--init-mean", "9", "--dt", "0.5", "--n-particles", "10",
                   "--n-runs", "2", "--t-end", "5")
        assert code == 3
        assert not (tmp_path / "simulate.json").exists()

    def test_tolerance_failure(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli.asymptotics, "k1_from_moments", lambda alpha, N: 0.0)
        assert run(tmp_path, "laplace-check") == 4
        rows = read_csv(tmp_path / "laplace_check.csv")
        assert [r["name"] for r in rows if r["status"] == "fail"] == ["k1(1)"]
        assert manifest(tmp_path, "laplace-check")["all_passed"] is False

    def test_entry_point(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "csphase", "dc", "--alpha-list", "2", "--out", str(tmp_path)],
                             capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        assert (tmp_path / "dc.json").exists()

    def test_usage_error(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["nonsense"])
        assert err.value.code == 2
