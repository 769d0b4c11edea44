import json
from pathlib import Path

import pandas as pd
import pytest
from click.testing import CliRunner

from edgecast.cli import cli
from edgecast.config import RunConfig


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def config_file(tiny_config: RunConfig, tmp_path: Path) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config.resolved()))
    return path


def test_generate_writes_one_file_per_node(
    runner: CliRunner, config_file: Path, tmp_path: Path
) -> None:
    out = tmp_path / "dataset"
    result = runner.invoke(
        cli,
        [
            "generate", "-c", str(config_file), "-o", str(out),
            "-s", "data.scenario.n_nodes=5",
        ],
    )
    assert result.exit_code == 0, result.output
    assert len(list(out.glob("node-*.csv"))) == 5
    assert (out / "capacity.csv").exists()
    assert "samples train/validation/test" in result.output


def test_prepare_simulate_metrics(
    runner: CliRunner, config_file: Path, tmp_path: Path
) -> None:
    out = tmp_path / "run"
    args = ["-c", str(config_file), "-o", str(out)]
    prepared = runner.invoke(cli, ["prepare", *args])
    assert prepared.exit_code == 0, prepared.output
    assert (out / "bundle.json").exists() and (out / "models.json").exists()
    assert "replay AUROC" in prepared.output

    simulated = runner.invoke(cli, ["simulate", *args, "-s", "policy=STR"])
    assert simulated.exit_code == 0, simulated.output
    summary = json.loads((out / "summary.json").read_text())
    assert summary["policy"] == "STR"

    recomputed = runner.invoke(cli, ["metrics", str(out)])
    assert recomputed.exit_code == 0, recomputed.output
    metrics = json.loads((out / "metrics.json").read_text())
    for key, value in summary["metrics"].items():
        if isinstance(value, float):
            assert metrics[key] == pytest.approx(value)
        else:
            assert metrics[key] == value


def test_sweep_writes_one_row_per_run(
    runner: CliRunner, config_file: Path, tmp_path: Path
) -> None:
    out = tmp_path / "sweep"
    result = runner.invoke(
        cli,
        [
            "sweep", "-c", str(config_file), "-o", str(out),
            "-a", "V", "-v", "1,10", "--seeds", "0,1", "-t", "2",
        ],
    )
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "sweep.csv")
    assert len(table) == 4
    assert table["value"].tolist() == [1, 1, 10, 10]
    assert table["seed"].tolist() == [0, 1, 0, 1]


def test_configuration_failures_exit_with_2(
    runner: CliRunner, config_file: Path, tmp_path: Path
) -> None:
    missing = runner.invoke(cli, ["prepare", "-c", str(tmp_path / "nope.json")])
    assert missing.exit_code == 2

    unknown = runner.invoke(
        cli, ["prepare", "-c", str(config_file), "-s", "controller.bogus=1"]
    )
    assert unknown.exit_code == 2

    not_prepared = runner.invoke(
        cli, ["simulate", "-c", str(config_file), "-o", str(tmp_path / "empty")]
    )
    assert not_prepared.exit_code == 2
    assert "run prepare first" in not_prepared.output

    bad_values = runner.invoke(
        cli, ["sweep", "-c", str(config_file), "-a", "V", "-v", "1,x"]
    )
    assert bad_values.exit_code == 2


def test_runtime_failures_exit_with_1(runner: CliRunner, tmp_path: Path) -> None:
    empty = tmp_path / "no-trace"
    empty.mkdir()
    result = runner.invoke(cli, ["metrics", str(empty)])
    assert result.exit_code == 1
    assert "FileNotFoundError" in result.output
