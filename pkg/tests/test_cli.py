import json
import subprocess
import sys

import numpy as np
import pytest

from immp.cli import ConfigError, load_config, main


def run_cli(args, cwd):
    return main([str(a) for a in args]) if False else subprocess.run(
        [sys.executable, "-m", "immp.cli", *map(str, args)],
        cwd=cwd,
        capture_output=True,
        text=True,
    )


class TestConfig:
    def test_defaults_and_overrides(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"model": "butane", "nu": 1.3, "steps": 5}))
        cfg = load_config(str(cfg_file), ["dt", "0.02", "metropolis", "false"])
        assert cfg.nu == 1.3
        assert cfg.dt == 0.02
        assert cfg.metropolis is False

    def test_unknown_key_rejected(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"modle": "butane"}))
        with pytest.raises(ConfigError):
            load_config(str(cfg_file), [])

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["not_a_key", "3"])

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["dt", "fast"])


class TestRunCommand:
    def test_reruns_byte_identical(self, tmp_path):
        args = ["run", "model", "butane", "integrator", "immp", "nu", "1.0",
                "dt", "0.01", "steps", "50", "seed", "7", "out", "a"]
        r1 = run_cli(args, tmp_path)
        assert r1.returncode == 0, r1.stderr
        csv1 = (tmp_path / "a.csv").read_bytes()
        json1 = (tmp_path / "a.json").read_bytes()
        args[-1] = "b"
        r2 = run_cli(args, tmp_path)
        assert r2.returncode == 0
        assert (tmp_path / "b.csv").read_bytes() == csv1
        json2 = json.loads((tmp_path / "b.json").read_text())
        json1 = json.loads(json1)
        json1["config"].pop("out")
        json2["config"].pop("out")
        assert json1 == json2

    def test_zero_steps_header_only(self, tmp_path):
        r = run_cli(["run", "steps", "0", "out", "empty"], tmp_path)
        assert r.returncode == 0, r.stderr
        lines = (tmp_path / "empty.csv").read_text().strip().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("step,time")

    def test_config_error_exit_code(self, tmp_path):
        r = run_cli(["run", "model", "nonsense"], tmp_path)
        assert r.returncode == 2
        assert "configuration error" in r.stderr

    def test_matches_library_run(self, tmp_path):
        from immp.integrators import IntegratorConfig
        from immp.models.alkane import butane_system
        from immp.sampling import ThermostatSpec, run_chain

        r = run_cli(
            ["run", "model", "butane", "integrator", "immp", "nu", "1.0",
             "dt", "0.015", "steps", "40", "seed", "3", "burn_in", "4", "out", "x"],
            tmp_path,
        )
        assert r.returncode == 0, r.stderr
        rows = (tmp_path / "x.csv").read_text().strip().splitlines()[1:]
        got = [float(line.split(",")[2]) for line in rows]

        system = butane_system(1.0)
        rec = run_chain(
            system,
            IntegratorConfig(dt=0.015, strict_geometry=False),
            ThermostatSpec(beta=1.0, gamma=1.0, gamma_z=1.0),
            n_steps=40,
            seed=3,
            q0=system.model.zigzag_positions(),
            observables={"end_to_end": system.model.end_to_end},
            burn_in=4,
        )
        np.testing.assert_allclose(got, rec.observables["end_to_end"], rtol=1e-15)

    def test_chain_model_runs(self, tmp_path):
        r = run_cli(
            ["run", "model", "chain", "n_atoms", "16", "nubar", "0.3",
             "dt", "0.01", "steps", "20", "out", "ch"],
            tmp_path,
        )
        assert r.returncode == 0, r.stderr
        assert (tmp_path / "ch.csv").exists()


class TestAnalysisCommands:
    def test_spectrum_and_autocorr_pipeline(self, tmp_path):
        dt = 0.05
        t = np.arange(3000) * dt
        series = np.sin(2.0 * t)
        lines = ["step,time,signal"] + [
            f"{i},{t[i]:.17g},{series[i]:.17g}" for i in range(t.size)
        ]
        (tmp_path / "traj.csv").write_text("\n".join(lines) + "\n")

        r = run_cli(
            ["spectrum", "--input", "traj.csv", "--column", "signal", "--out", "spec"], tmp_path
        )
        assert r.returncode == 0, r.stderr
        rows = (tmp_path / "spec.csv").read_text().strip().splitlines()[1:]
        omega, dens = np.array([[float(v) for v in row.split(",")[:2]] for row in rows]).T
        assert abs(omega[np.argmax(dens)] - 2.0) < 0.1

        r = run_cli(
            ["autocorr", "--input", "traj.csv", "--column", "signal", "--out", "ac"], tmp_path
        )
        assert r.returncode == 0, r.stderr
        payload = json.loads((tmp_path / "ac.json").read_text())
        assert payload["n_corr"] > 10  # strongly correlated sinusoid

    def test_autocorr_ar1(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 200_000
        x = np.zeros(n)
        for i in range(1, n):
            x[i] = 0.9 * x[i - 1] + rng.standard_normal()
        lines = ["step,val"] + [f"{i},{x[i]:.17g}" for i in range(n)]
        (tmp_path / "ar1.csv").write_text("\n".join(lines) + "\n")
        r = run_cli(["autocorr", "--input", "ar1.csv", "--column", "val", "--out", "ac"], tmp_path)
        assert r.returncode == 0, r.stderr
        payload = json.loads((tmp_path / "ac.json").read_text())
        assert abs(payload["n_corr"] - 2 / (1 - 0.81)) / (2 / (1 - 0.81)) < 0.1

    def test_chain_theory_values(self, tmp_path):
        r = run_cli(["chain-theory", "--n", "2", "--dt", "0.1", "--out", "th"], tmp_path)
        assert r.returncode == 0, r.stderr
        payload = json.loads((tmp_path / "th.json").read_text())
        np.testing.assert_allclose(payload["delta_k"], [0.0, 8.0], atol=1e-12)
        r = run_cli(
            ["chain-theory", "--n", "64", "--nubar", "0.5", "--dt", "0.1",
             "--mc", "20000", "--out", "th2"],
            tmp_path,
        )
        assert r.returncode == 0, r.stderr
        payload = json.loads((tmp_path / "th2.json").read_text())
        assert abs(payload["m_mc"] - payload["m_exact"]) < 4 * payload["m_mc_stderr"]

    def test_critdt_bracket_miss_exit_code(self, tmp_path):
        r = run_cli(
            ["critdt", "--mode", "dyn", "--level", "1e9", "--bracket", "0.001", "0.002",
             "--samples", "200", "model", "butane", "integrator", "verlet", "seed", "1"],
            tmp_path,
        )
        assert r.returncode == 3
        assert "numerical failure" in r.stderr

    def test_stiff_sweep_runs(self, tmp_path):
        r = run_cli(["stiff-sweep", "--eps", "0.1", "0.01", "--out", "sw"], tmp_path)
        assert r.returncode == 0, r.stderr
        payload = json.loads((tmp_path / "sw.json").read_text())
        assert not any(payload["blew_up"])
