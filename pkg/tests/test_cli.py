"""Integration tests for the CLI."""

import json
import sys
from pathlib import Path

import click
import pytest
from click.testing import CliRunner

from causalbench.__version__ import __version__
from causalbench.cli import cli, guarded, parse_settings
from causalbench.errors import ConfigError


@pytest.fixture
def cli_runner() -> CliRunner:
    """Create a Click CLI runner."""
    return CliRunner()


class TestCLIBasic:
    """Basic CLI invocation tests."""

    def test_cli_help(self, cli_runner: CliRunner) -> None:
        """Test CLI help lists the subcommands."""
        result = cli_runner.invoke(cli, ["--help"])
        assert result.exit_code == 0
        assert "Usage:" in result.output
        for command in ("gen", "balance", "estimate", "benchmark", "report"):
            assert command in result.output

    def test_cli_version(self, cli_runner: CliRunner) -> None:
        """Test ``--version`` prints the package version."""
        result = cli_runner.invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_parse_settings(self) -> None:
        """Test values are read as JSON when possible."""
        settings = parse_settings(("caliper=0.1", "algorithm=greedy", "bounds=[0.05,0.95]"))
        assert settings == {"caliper": 0.1, "algorithm": "greedy", "bounds": [0.05, 0.95]}

    def test_parse_settings_malformed(self) -> None:
        """Test a pair without ``=`` is refused."""
        with pytest.raises(ConfigError):
            parse_settings(("caliper",))


class TestEstimateCommand:
    """Tests for ``causalbench estimate``."""

    def test_ipw_writes_estimate(
        self, cli_runner: CliRunner, study_files: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test an IPW estimate with positivity summary and run metadata."""
        out = tmp_path / "est" / "ipw.json"
        result = cli_runner.invoke(
            cli,
            [
                "--quiet",
                "estimate",
                str(study_files["nrs"]),
                "--schema",
                str(study_files["schema"]),
                "--method",
                "ipw",
                "--outcome",
                "health",
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        assert payload["estimate"]["method_id"] == "ipw"
        assert payload["estimate"]["tau"] == pytest.approx(2.0, abs=0.8)
        assert payload["positivity"]["bounds"] == [0.01, 0.99]
        meta = json.loads((out.parent / "run_meta.json").read_text())
        assert meta["command"] == "estimate"
        assert set(meta["inputs"]) == {"data"}

    def test_matching_dumps_pairs(
        self, cli_runner: CliRunner, study_files: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test matched pairs and the balance audit are written."""
        pairs = tmp_path / "pairs.csv"
        out = tmp_path / "match.json"
        result = cli_runner.invoke(
            cli,
            [
                "estimate",
                str(study_files["nrs"]),
                "--schema",
                str(study_files["schema"]),
                "--method",
                "psmatch+ra",
                "--dump-pairs",
                str(pairs),
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        assert pairs.read_text().splitlines()[0] == "treated_id,control_id,distance"
        payload = json.loads(out.read_text())
        assert payload["estimate"]["estimand"] == "ATT"
        assert "max_abs_std_diff" in payload["audit"]

    def test_unknown_method(self, cli_runner: CliRunner, study_files: dict[str, Path]) -> None:
        """Test an unknown method exits with a configuration error."""
        result = cli_runner.invoke(
            cli, ["estimate", str(study_files["nrs"]), "--method", "magic"]
        )
        assert result.exit_code == 1
        assert "code:CONFIG_INVALID" in result.output

    def test_missing_data(self, cli_runner: CliRunner, tmp_path: Path) -> None:
        """Test a missing input file is reported by code."""
        result = cli_runner.invoke(
            cli, ["estimate", str(tmp_path / "none.csv"), "--method", "ipw"]
        )
        assert result.exit_code == 1
        assert "code:INPUT_NOT_FOUND" in result.output

    def test_pscores_need_a_treatment_model(
        self, cli_runner: CliRunner, study_files: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test regression adjustment cannot dump propensity scores."""
        result = cli_runner.invoke(
            cli,
            [
                "estimate",
                str(study_files["nrs"]),
                "--schema",
                str(study_files["schema"]),
                "--method",
                "regadj",
                "--bootstrap-reps",
                "20",
                "--dump-pscores",
                str(tmp_path / "e.csv"),
            ],
        )
        assert result.exit_code == 1
        assert "code:CONFIG_INVALID" in result.output


class TestBalanceCommand:
    """Tests for ``causalbench balance``."""

    def test_balance_csv(self, cli_runner: CliRunner, study_files: dict[str, Path]) -> None:
        """Test the CSV balance table has one line per design column."""
        result = cli_runner.invoke(
            cli,
            [
                "balance",
                str(study_files["nrs"]),
                "--schema",
                str(study_files["schema"]),
                "--format",
                "csv",
            ],
        )
        assert result.exit_code == 0, result.output
        lines = result.output.strip().splitlines()
        assert lines[0] == "covariate,treated_mean,control_mean,std_diff,p_value,policy"
        assert [line.split(",")[0] for line in lines[1:]] == ["age", "female"]

    def test_compare_arms(
        self, cli_runner: CliRunner, study_files: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test the RCT versus NRS comparison is written to a file."""
        out = tmp_path / "compare.md"
        result = cli_runner.invoke(
            cli,
            [
                "balance",
                str(study_files["rct"]),
                "--compare",
                str(study_files["nrs"]),
                "--schema",
                str(study_files["schema"]),
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "age" in out.read_text()
        assert (tmp_path / "run_meta.json").is_file()


class TestBenchmarkAndReport:
    """Tests for ``causalbench benchmark`` and ``causalbench report``."""

    def run_benchmark(
        self, cli_runner: CliRunner, study_files: dict[str, Path], out: Path
    ) -> None:
        """Benchmark IPW on the toy study with the minimum replicates."""
        result = cli_runner.invoke(
            cli,
            [
                "--quiet",
                "benchmark",
                "--rct",
                str(study_files["rct"]),
                "--nrs",
                str(study_files["nrs"]),
                "--schema",
                str(study_files["schema"]),
                "--method",
                "ipw",
                "--bootstrap-reps",
                "100",
                "--jobs",
                "1",
                "--seed",
                "3",
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output

    def test_benchmark_results(
        self, cli_runner: CliRunner, study_files: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test one row per outcome and seeds recorded in the metadata."""
        out = tmp_path / "run" / "results.json"
        self.run_benchmark(cli_runner, study_files, out)
        data = json.loads(out.read_text())
        assert [r["outcome"] for r in data["rows"]] == ["health", "quality"]
        assert all(r["verdict"] in ("ok", "BIASED") for r in data["rows"])
        assert data["meta"]["seed"] == 3
        meta = json.loads((out.parent / "run_meta.json").read_text())
        assert meta["seeds"] == {"seed": 3, "B": 100}
        assert set(meta["inputs"]) == {"rct", "nrs"}

    def test_rerun_is_byte_identical(
        self, cli_runner: CliRunner, study_files: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test the same seed writes the same results file."""
        first, second = tmp_path / "a" / "results.json", tmp_path / "b" / "results.json"
        self.run_benchmark(cli_runner, study_files, first)
        self.run_benchmark(cli_runner, study_files, second)
        assert first.read_bytes() == second.read_bytes()
        assert (first.parent / "run_meta.json").read_bytes() == (
            second.parent / "run_meta.json"
        ).read_bytes()

    def test_report_tables(
        self, cli_runner: CliRunner, study_files: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test the verdict table renders from a results file."""
        out = tmp_path / "results.json"
        self.run_benchmark(cli_runner, study_files, out)
        result = cli_runner.invoke(
            cli, ["report", "--in", str(out), "--table", "verdict", "--format", "csv"]
        )
        assert result.exit_code == 0, result.output
        lines = result.output.strip().splitlines()
        assert lines[0] == "approach,method_id,health,quality"
        assert lines[1].startswith("treatment model,ipw,")

    def test_missing_config(self, cli_runner: CliRunner, tmp_path: Path) -> None:
        """Test a missing configuration file exits with CONFIG_NOT_FOUND."""
        result = cli_runner.invoke(
            cli,
            ["benchmark", "--config", str(tmp_path / "run.json"), "--out", str(tmp_path / "r.json")],
        )
        assert result.exit_code == 1
        assert "code:CONFIG_NOT_FOUND" in result.output

    def test_too_few_replicates(
        self, cli_runner: CliRunner, study_files: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test B below 100 is refused before any work."""
        result = cli_runner.invoke(
            cli,
            [
                "benchmark",
                "--rct",
                str(study_files["rct"]),
                "--nrs",
                str(study_files["nrs"]),
                "--bootstrap-reps",
                "10",
                "--out",
                str(tmp_path / "r.json"),
            ],
        )
        assert result.exit_code == 1
        assert "code:CONFIG_INVALID" in result.output
        assert not (tmp_path / "r.json").exists()

    def test_malformed_results(self, cli_runner: CliRunner, tmp_path: Path) -> None:
        """Test a results file without rows is a parse error."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"meta": {}}))
        result = cli_runner.invoke(cli, ["report", "--in", str(path)])
        assert result.exit_code == 2
        assert "code:PARSE_ERROR" in result.output


class TestGenCommand:
    """Tests for ``causalbench gen``."""

    def test_gen_then_balance(self, cli_runner: CliRunner, tmp_path: Path) -> None:
        """Test generated files load back with the written schema."""
        rct, nrs, truth = tmp_path / "rct.csv", tmp_path / "nrs.csv", tmp_path / "truth.json"
        result = cli_runner.invoke(
            cli,
            [
                "gen",
                "--seed",
                "2",
                "--n-rct",
                "60",
                "--n-nrs",
                "80",
                "--calibration-n",
                "3000",
                "--out-rct",
                str(rct),
                "--out-nrs",
                str(nrs),
                "--truth",
                str(truth),
            ],
        )
        assert result.exit_code == 0, result.output
        assert len(rct.read_text().splitlines()) == 61
        assert json.loads(truth.read_text())["health_status"] == {"ate": 8.0, "att": 8.0}
        schema = tmp_path / "schema.json"
        assert schema.is_file()
        result = cli_runner.invoke(
            cli, ["balance", str(nrs), "--schema", str(schema), "--format", "csv"]
        )
        assert result.exit_code == 0, result.output
        assert "heartburn" in result.output

    def test_gen_rejects_tiny_arms(self, cli_runner: CliRunner, tmp_path: Path) -> None:
        """Test arm sizes below the minimum are a configuration error."""
        result = cli_runner.invoke(
            cli,
            [
                "gen",
                "--n-rct",
                "5",
                "--calibration-n",
                "1000",
                "--out-rct",
                str(tmp_path / "r.csv"),
                "--out-nrs",
                str(tmp_path / "n.csv"),
            ],
        )
        assert result.exit_code == 1
        assert "code:CONFIG_INVALID" in result.output


class TestFailureExitStatus:
    """Tests for exit status 2 on estimation failures."""

    def test_failed_row_exits_2(
        self, cli_runner: CliRunner, study_files: dict[str, Path], tmp_path: Path
    ) -> None:
        """Test a failing plugin row still writes results but exits 2."""
        config = tmp_path / "run.json"
        config.write_text(
            json.dumps(
                {
                    "methods": ["ipw", "plugin:broken"],
                    "plugins": {"broken": {"command": [sys.executable, "-c", "raise SystemExit(3)"]}},
                    "bootstrap": {"B": 100, "seed": 0},
                    "outcomes": ["health"],
                }
            )
        )
        out = tmp_path / "results.json"
        result = cli_runner.invoke(
            cli,
            [
                "--quiet",
                "benchmark",
                "--config",
                str(config),
                "--rct",
                str(study_files["rct"]),
                "--nrs",
                str(study_files["nrs"]),
                "--schema",
                str(study_files["schema"]),
                "--jobs",
                "1",
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 2
        assert "code:METHOD_FAILURE 1 of 2 rows failed: plugin:broken" in result.output
        rows = json.loads(out.read_text())["rows"]
        assert [r["error"] is None for r in rows] == [True, False]

    def test_stray_value_error_is_reported(self, cli_runner: CliRunner) -> None:
        """Test an unexpected ValueError becomes a coded failure, not a traceback."""

        @click.command()
        @guarded
        def explode() -> None:
            raise ValueError("weights must be finite")

        result = cli_runner.invoke(explode)
        assert result.exit_code == 2
        assert "code:METHOD_FAILURE weights must be finite" in result.output
        assert "Traceback" not in result.output
