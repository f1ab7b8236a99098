"""Tests for the command-line interface."""

from pathlib import Path

import pytest
import yaml

from premium_calibration.cli import build_parser
from premium_calibration.cli import load_config
from premium_calibration.cli import main
from premium_calibration.config import RunConfig


@pytest.fixture
def config_file(desk_config: RunConfig, temp_dir: Path) -> Path:
    path = temp_dir / "desk.yaml"
    path.write_text(yaml.safe_dump(desk_config.to_dict()))
    return path


@pytest.fixture
def portfolio_dir(config_file: Path, temp_dir: Path) -> Path:
    out = temp_dir / "portfolio"
    assert main(["gen-portfolio", "--config", str(config_file), "--out", str(out), "-q"]) == 0
    return out


class TestParser:
    """Tests for argument parsing and config overrides."""

    def test_flags_override_config(self, config_file: Path):
        args = build_parser().parse_args(
            ["fit-baseline", "--config", str(config_file), "--gender", "female", "--epochs-max", "9", "--out", "b.json"]
        )
        config = load_config(args)
        assert config.baseline.gender == "female"
        assert config.baseline.max_epochs == 9
        assert config.residual.max_epochs == 2

    def test_epochs_for_residual(self, config_file: Path):
        args = build_parser().parse_args(
            ["fit-residual", "--config", str(config_file), "--portfolio", "p", "--baseline", "b", "--out", "m",
             "--epochs-max", "4", "--lr", "0.01", "--seed", "8"]
        )
        config = load_config(args)
        assert config.residual.max_epochs == 4
        assert config.residual.lr == 0.01
        assert config.seed == 8

    def test_model_or_oracle_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["backtest", "--portfolio", "p", "--out", "o"])

    def test_verbose_and_quiet_exclusive(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["gen-table", "--out", "t.csv", "-v", "-q"])


class TestCommands:
    """Tests for subcommand exit codes and outputs."""

    def test_gen_table(self, temp_dir: Path):
        out = temp_dir / "table.csv"
        assert main(["gen-table", "--out", str(out), "-q"]) == 0
        assert out.read_text().splitlines()[0] == "age,q_male,q_female"

    def test_missing_table_is_input_error(self, temp_dir: Path, capsys):
        """Exit code 2 and the missing path on stderr."""
        missing = temp_dir / "missing.csv"
        code = main(["gen-portfolio", "--table", str(missing), "--n", "3", "--out", str(temp_dir / "p"), "-q"])
        assert code == 2
        assert str(missing) in capsys.readouterr().err

    def test_gen_portfolio_reproducible(self, config_file: Path, temp_dir: Path):
        """Same seed and size give byte-identical portfolio files."""
        for name in ("a", "b"):
            argv = ["gen-portfolio", "--config", str(config_file), "--n", "5", "--seed", "3"]
            assert main([*argv, "--out", str(temp_dir / name), "-q"]) == 0
        first = (temp_dir / "a" / "portfolio.csv").read_bytes()
        assert first == (temp_dir / "b" / "portfolio.csv").read_bytes()
        assert len(first.decode().splitlines()) == 6

    def test_oracle_backtest(self, portfolio_dir: Path, temp_dir: Path, capsys):
        out = temp_dir / "oracle"
        assert main(["backtest", "--portfolio", str(portfolio_dir), "--oracle", "--out", str(out), "-q"]) == 0
        printed = capsys.readouterr().out
        assert "Premium backtest (oracle)" in printed
        assert "Quantiles of relative errors [in %]" in printed

    def test_missing_model_checkpoint(self, portfolio_dir: Path, temp_dir: Path):
        argv = ["backtest", "--portfolio", str(portfolio_dir), "--model", str(temp_dir / "none.json")]
        assert main([*argv, "--out", str(temp_dir / "out"), "-q"]) == 2

    def test_train_and_backtest(self, config_file: Path, portfolio_dir: Path, temp_dir: Path):
        """Baseline, residual and backtest chain; a foreign portfolio is a consistency error."""
        common = ["--config", str(config_file), "-q"]
        baseline = temp_dir / "baseline.json"
        model = temp_dir / "model.json"
        assert main(["fit-baseline", *common, "--out", str(baseline)]) == 0
        assert (temp_dir / "baseline_log.csv").exists()
        argv = ["fit-residual", *common, "--portfolio", str(portfolio_dir), "--baseline", str(baseline)]
        assert main([*argv, "--out", str(model)]) == 0
        assert (temp_dir / "model_log.csv").exists()

        argv = ["backtest", *common, "--portfolio", str(portfolio_dir), "--model", str(model)]
        assert main([*argv, "--out", str(temp_dir / "bt")]) == 0

        other = temp_dir / "other"
        assert main(["gen-portfolio", *common, "--n", "30", "--seed", "12", "--out", str(other)]) == 0
        argv = ["backtest", *common, "--portfolio", str(other), "--model", str(model)]
        assert main([*argv, "--out", str(temp_dir / "bt2")]) == 4

    def test_run_needs_config_or_resume(self):
        assert main(["run", "-q"]) == 2

    def test_run(self, config_file: Path, temp_dir: Path, capsys):
        runs_dir = temp_dir / "runs"
        assert main(["run", "--config", str(config_file), "--runs-dir", str(runs_dir), "-q"]) == 0
        assert "completed" in capsys.readouterr().out
        assert len(list(runs_dir.iterdir())) == 1

    def test_invalid_config_value(self, temp_dir: Path):
        path = temp_dir / "bad.yaml"
        path.write_text("portfolio:\n  N: 0\n")
        assert main(["gen-portfolio", "--config", str(path), "--out", str(temp_dir / "p"), "-q"]) == 2
