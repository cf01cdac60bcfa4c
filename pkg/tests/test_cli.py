import json

import numpy as np
import pytest

from rnmpc.cli import main
from rnmpc.config import ConfigError, StaleCacheError, load_scenario, load_terminal, parse_scenario

SCALAR = """
model = "scalar_quadratic"
horizon = 10
episodes = 2
steps = 6
seed = 0
output = "out"
{extra}

[initial]
x0 = [0.0]
spread = [0.5]

[controller]
backend = "generic"
{controller}

[disturbance]
kind = "vertex"
"""


def _write(tmp_path, extra="", controller="", name="scenario.toml"):
    p = tmp_path / name
    p.write_text(SCALAR.format(extra=extra, controller=controller))
    return p


class TestConfig:
    def test_load_and_overrides(self, tmp_path):
        cfg = load_scenario(_write(tmp_path))
        assert cfg.model == "scalar_quadratic" and cfg.horizon == 10
        assert cfg.output_dir == tmp_path / "out"
        cfg2 = cfg.with_overrides(episodes=5, seed=3, mode="rti")
        assert cfg2.episodes == 5 and cfg2.seed == 3 and cfg2.scp_config().mode == "rti"
        x0s = cfg.initial_states(1)
        assert x0s.shape == (2, 1) and np.all(np.abs(x0s) <= 0.5)
        np.testing.assert_array_equal(x0s, load_scenario(_write(tmp_path)).initial_states(1))

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="horizn"):
            parse_scenario({"model": "scalar_quadratic", "horizn": 10})
        with pytest.raises(ConfigError):
            parse_scenario({"model": "scalar_quadratic", "controller": {"speed": 1}})

    def test_empty_episode_count_rejected(self):
        with pytest.raises(ConfigError, match="episodes"):
            parse_scenario({"model": "scalar_quadratic", "episodes": 0})

    def test_missing_model_rejected(self):
        with pytest.raises(ConfigError, match="missing required key 'model'"):
            parse_scenario({"horizon": 10})

    def test_unknown_model_rejected(self):
        with pytest.raises(ConfigError):
            parse_scenario({"model": "submarine"})

    def test_stale_cache_refused(self, tmp_path, scalar):
        bad = json.loads(scalar.ti.to_json())
        bad["model_hash"] = "0" * 16
        path = tmp_path / "ti.json"
        path.write_text(json.dumps(bad))
        with pytest.raises(StaleCacheError, match="synth-terminal"):
            load_terminal(path, scalar.m, scalar.err, scalar.C, scalar.cost)
        path.write_text(scalar.ti.to_json())
        assert load_terminal(path, scalar.m, scalar.err, scalar.C, scalar.cost).tau_f == scalar.ti.tau_f


class TestCommands:
    @pytest.fixture
    def cached(self, tmp_path, scalar):
        """Scenario whose terminal cache is pre-filled from the session fixture."""
        (tmp_path / "ti.json").write_text(scalar.ti.to_json())
        return _write(tmp_path, extra='terminal_cache = "ti.json"')

    def test_run_writes_logs_and_plot_data(self, cached, tmp_path, capsys):
        assert main(["run", str(cached)]) == 0
        out = tmp_path / "out"
        for name in ("episode_000.csv", "episode_001.json", "plot_tubes_episode_000.csv",
                     "plot_constraints.csv", "summary.json"):
            assert (out / name).exists(), name
        summary = json.loads((out / "summary.json").read_text())
        assert summary["schema"].startswith("rnmpc.summary/")
        assert summary["totals"]["violations"] == 0
        assert "violation" in capsys.readouterr().out

    def test_run_infeasible_start(self, tmp_path, scalar, capsys):
        (tmp_path / "ti.json").write_text(scalar.ti.to_json())
        p = tmp_path / "bad.toml"
        p.write_text(SCALAR.format(extra='terminal_cache = "ti.json"', controller="")
                     .replace("x0 = [0.0]", "x0 = [0.999]").replace("spread = [0.5]", "spread = [0.0]"))
        assert main(["run", "--config", str(p), "--episodes", "1"]) == 1
        assert "initial state not robustly feasible" in capsys.readouterr().err

    def test_verify_passes_on_validated_model(self, cached, tmp_path):
        assert main(["verify", str(cached), "--out", str(tmp_path / "v")]) == 0
        rep = json.loads((tmp_path / "v" / "verify_report.json").read_text())
        assert rep["passed"]
        assert {"terminal_ingredients", "tube_containment", "plan_invariants",
                "recursive_feasibility"} <= set(rep["checks"])

    def test_verify_fails_without_overbound(self, tmp_path):
        p = _write(tmp_path, controller="tau_bound = false")
        assert main(["verify", str(p), "--episodes", "1"]) == 1

    def test_verify_refuses_stale_cache(self, tmp_path, scalar, capsys):
        bad = json.loads(scalar.ti.to_json())
        bad["error_hash"] = "f" * 16
        (tmp_path / "ti.json").write_text(json.dumps(bad))
        p = _write(tmp_path, extra='terminal_cache = "ti.json"')
        assert main(["verify", str(p)]) == 2
        err = capsys.readouterr().err
        assert "stale" in err and "rnmpc synth-terminal" in err

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        p = tmp_path / "x.toml"
        p.write_text('horizon = 10\n')
        assert main(["compare", str(p)]) == 2
        assert "missing required key 'model'" in capsys.readouterr().err

    def test_missing_config_argument(self, capsys):
        assert main(["run"]) == 2

    def test_synth_terminal_then_run_uses_cache(self, tmp_path):
        p = _write(tmp_path)
        assert main(["synth-terminal", str(p)]) == 0
        files = list((tmp_path / "out" / "cache").glob("terminal-scalar_quadratic-*.json"))
        assert len(files) == 1
        assert main(["run", str(p), "--episodes", "1"]) == 0

    def test_compare_outputs(self, cached, tmp_path):
        assert main(["compare", str(cached), "--episodes", "1"]) == 0
        out = tmp_path / "out"
        assert (out / "compare.md").read_text().startswith("| controller |")
        assert (out / "robust_000.csv").exists() and (out / "soft_000.csv").exists()

    def test_bench_outputs(self, tmp_path):
        p = tmp_path / "bench.toml"
        p.write_text('model = "scalar_quadratic"\noutput = "b"\n[bench]\nmodels = ["double_integrator"]\n'
                     'horizons = [5, 10]\nreps = 2\n')
        assert main(["bench", str(p)]) == 0
        lines = (tmp_path / "b" / "bench.csv").read_text().splitlines()
        assert lines[0] == "Dynamics,N,Jac,Ricc,QP"
        assert len(lines) == 3
        assert "double_integrator" in json.loads((tmp_path / "b" / "bench.json").read_text())["ricc_exponent"]
