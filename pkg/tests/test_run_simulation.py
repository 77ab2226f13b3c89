import os

import pandas as pd
import pytest

from run_simulation import EXIT_CONFIG_ERROR, EXIT_OK, build_parser, run_cli
from scenarios import ReferenceConfig, RobotConfig, ScenarioConfig, ShapeConfig, WeightsConfig, save_scenario


@pytest.fixture
def scenario_file(tmp_path):
    robots = [
        RobotConfig(id=k, model="unicycle", shape=ShapeConfig(kind="box", h=1.0, w=1.0),
                    initial_state=[6.0 * k, 0.0, 0.0], reference=ReferenceConfig(goal=[6.0 * k + 1.0, 0.0, 0.0]),
                    weights=WeightsConfig(q_z=[1.0, 1.0, 0.0], q_u=[0.05, 0.05], q_du=[0.5, 0.5]))
        for k in range(2)
    ]
    config = ScenarioConfig(name="cli_pair", robots=robots, d_min=0.5, dt=0.05, horizon=5, steps=50)
    return str(save_scenario(config, tmp_path / "cli_pair.json"))


def test_parser_defaults():
    args = build_parser().parse_args(["--scenario", "platoon2"])
    assert args.mode is None and args.steps is None and not args.figures


def test_unknown_flag_is_a_config_error():
    assert run_cli(["--scenario", "platoon2", "--bogus"]) == EXIT_CONFIG_ERROR


def test_missing_scenario_flag_is_a_config_error():
    assert run_cli([]) == EXIT_CONFIG_ERROR


def test_unknown_scenario_is_a_config_error(tmp_path):
    assert run_cli(["--scenario", "no_such_scenario", "--out", str(tmp_path)]) == EXIT_CONFIG_ERROR


def test_invalid_override_is_a_config_error(scenario_file, tmp_path):
    assert run_cli(["--scenario", scenario_file, "--delay", "-1", "--out", str(tmp_path)]) == EXIT_CONFIG_ERROR


def test_short_run_exports(scenario_file, tmp_path, capsys):
    out = str(tmp_path / "out")
    code = run_cli(["--scenario", scenario_file, "--steps", "2", "--out", out, "--timing",
                    "--trace-error-bound"])
    assert code == EXIT_OK
    trajectories = pd.read_csv(os.path.join(out, "trajectories.csv"))
    assert len(trajectories) == 4
    assert "cli_pair" in capsys.readouterr().out


def test_centralized_override(scenario_file, tmp_path):
    out = str(tmp_path / "out")
    assert run_cli(["--scenario", scenario_file, "--steps", "1", "--mode", "centralized", "--out", out]) == EXIT_OK
    assert os.path.isfile(os.path.join(out, "timings.csv"))


def test_zero_steps_skips_export(scenario_file, tmp_path):
    out = tmp_path / "out"
    assert run_cli(["--scenario", scenario_file, "--steps", "0", "--out", str(out)]) == EXIT_OK
    assert not out.exists()
