"""Tests for the fvqsd command line."""

import csv

import pytest

from fleming_viot_qsd import __version__
from fleming_viot_qsd.cli import build_parser, main
from fleming_viot_qsd.history import RunHistory
from fleming_viot_qsd.persistence import read_density, read_manifest


@pytest.fixture(autouse=True)
def data_home(tmp_path, monkeypatch):
    """Keep the history database and kernel cache inside the test directory."""
    home = tmp_path / "home"
    monkeypatch.setenv("FVQSD_HOME", str(home))
    return home


class TestParser:
    """Test argument parsing."""

    def test_no_command_prints_help(self, capsys):
        """Without a command the help is shown and 1 returned."""
        assert main([]) == 1
        assert "usage" in capsys.readouterr().out

    def test_unknown_command_exits(self):
        """argparse rejects unknown subcommands."""
        with pytest.raises(SystemExit) as excinfo:
            main(["bogus"])

        assert excinfo.value.code == 2

    def test_version(self, capsys):
        """--version prints the package version."""
        with pytest.raises(SystemExit):
            main(["--version"])

        assert __version__ in capsys.readouterr().out

    def test_presets_are_exclusive(self):
        """--quick and --paper cannot be combined."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["qsd", "--quick", "--paper"])

    def test_run_flags(self):
        """Shared run flags parse onto the namespace."""
        args = build_parser().parse_args(["simulate", "--gamma", "0.1", "--particles", "50", "--paper"])

        assert args.gamma == 0.1
        assert args.particles == 50
        assert args.preset == "paper"


class TestGridCommands:
    """Test the oracle and qsd commands."""

    def test_qsd_is_byte_identical_across_runs(self, tmp_path):
        """Two runs of one configuration write identical bytes."""
        first, second = tmp_path / "a", tmp_path / "b"

        assert main(["qsd", "--gamma", "0.05", "--out", str(first)]) == 0
        assert main(["qsd", "--gamma", "0.05", "--out", str(second)]) == 0

        assert (first / "qsd.csv").read_bytes() == (second / "qsd.csv").read_bytes()
        assert read_density(first / "qsd.csv").n_cells == 512

    def test_oracle_writes_manifest(self, tmp_path):
        """The manifest records the command, the outputs and the seed."""
        out = tmp_path / "oracle"

        assert main(["oracle", "--gamma", "0.05", "--steps", "3", "--seed", "9", "--out", str(out)]) == 0

        manifest = read_manifest(out)
        assert manifest["command"] == "oracle"
        assert manifest["outputs"] == ["oracle.csv"]
        assert manifest["seeds"] == [9]
        assert manifest["config"]["steps"] == 3

    def test_runs_are_recorded(self, tmp_path, data_home):
        """Completed runs land in the history."""
        main(["qsd", "--gamma", "0.05", "--out", str(tmp_path / "q")])

        run = RunHistory(data_home / "history.db").recent(1)[0]
        assert run.command == "qsd"
        assert run.status == "complete"
        assert run.record_count == 512


class TestSimulate:
    """Test the simulate command."""

    def test_writes_trajectory_and_snapshot(self, tmp_path):
        """A short chain writes its observables and final positions."""
        out = tmp_path / "sim"

        code = main(["simulate", "--particles", "40", "--steps", "4", "--out", str(out)])

        assert code == 0
        with open(out / "trajectory.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        observables = {row["observable"] for row in rows}
        assert {"mean_kill_prob", "resurrections", "w1_oracle"} <= observables
        assert max(int(row["step"]) for row in rows) == 4
        with open(out / "snapshot.csv", newline="") as f:
            assert len(list(csv.reader(f))) == 41


class TestErrors:
    """Test error reporting."""

    def test_invalid_config_reports_error(self, tmp_path, capsys):
        """A configuration error prints 'Error:' and returns 1."""
        code = main(["qsd", "--gamma", "0.9", "--out", str(tmp_path / "bad")])

        assert code == 1
        assert "Error:" in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path, capsys):
        """A missing config file is reported."""
        code = main(["qsd", "--config", str(tmp_path / "nope.toml")])

        assert code == 1
        assert "config file not found" in capsys.readouterr().out

    def test_failed_run_is_recorded(self, tmp_path, data_home, capsys):
        """A run that fails after starting is marked failed and leaves no outputs."""
        config = tmp_path / "run.toml"
        config.write_text('initial = ["uniform"]\n')
        out = tmp_path / "kappa"

        code = main(["kappa", "--config", str(config), "--out", str(out)])

        assert code == 1
        assert not (out / "kappa.csv").exists()
        assert list(out.glob(".*.partial")) == []
        run = RunHistory(data_home / "history.db").recent(1)[0]
        assert run.status == "failed"


class TestValidateAndHistory:
    """Test the validate and history commands."""

    def test_validate_passes(self, capsys):
        """Every property check passes."""
        assert main(["validate"]) == 0
        out = capsys.readouterr().out
        assert "[FAIL]" not in out
        assert "0 failed" in out

    def test_history_empty(self, capsys):
        """An empty history says so."""
        assert main(["history"]) == 0
        assert "No runs yet." in capsys.readouterr().out

    def test_history_lists_runs(self, tmp_path, capsys):
        """History shows recent runs with their status."""
        main(["oracle", "--steps", "1", "--out", str(tmp_path / "o")])
        capsys.readouterr()

        assert main(["history", "-n", "5"]) == 0
        out = capsys.readouterr().out
        assert "oracle" in out
        assert "[complete" in out

    def test_history_show_one_run(self, tmp_path, data_home, capsys):
        """--show prints every field of one run."""
        main(["oracle", "--steps", "1", "--out", str(tmp_path / "o")])
        run = RunHistory(data_home / "history.db").recent(1)[0]
        capsys.readouterr()

        assert main(["history", "--show", str(run.id)]) == 0
        out = capsys.readouterr().out
        assert f"config_hash: {run.config_hash}" in out
        assert "record_count: 512" in out

    def test_history_show_unknown_run(self, capsys):
        """An unknown run id is reported with exit code 1."""
        assert main(["history", "--show", "42"]) == 1
        assert "No run #42." in capsys.readouterr().out

    def test_history_by_hash(self, tmp_path, data_home, capsys):
        """--hash lists the runs of one configuration."""
        main(["oracle", "--steps", "1", "--out", str(tmp_path / "o")])
        main(["qsd", "--gamma", "0.05", "--out", str(tmp_path / "q")])
        oracle = RunHistory(data_home / "history.db").recent(2)[1]
        capsys.readouterr()

        assert main(["history", "--hash", oracle.config_hash[:8]]) == 0
        out = capsys.readouterr().out
        assert "oracle" in out
        assert "qsd" not in out.split("\n", 2)[-1]

    def test_history_prune(self, tmp_path, capsys):
        """--prune keeps runs younger than the cutoff."""
        main(["oracle", "--steps", "1", "--out", str(tmp_path / "o")])
        capsys.readouterr()

        assert main(["history", "--prune", "30"]) == 0
        assert "Removed 0 run(s)" in capsys.readouterr().out
        assert main(["history"]) == 0
        assert "oracle" in capsys.readouterr().out


class TestCache:
    """Test the cache command."""

    def test_list_then_clear(self, tmp_path, data_home, capsys):
        """A grid run fills the cache; clear empties it."""
        main(["oracle", "--steps", "1", "--out", str(tmp_path / "o")])
        capsys.readouterr()

        assert main(["cache", "list"]) == 0
        assert "1 cached kernel(s)" in capsys.readouterr().out
        assert main(["cache", "clear"]) == 0
        assert "Removed 1 cached kernel(s)" in capsys.readouterr().out
        assert main(["cache", "list"]) == 0
        assert "0 cached kernel(s)" in capsys.readouterr().out

    def test_unknown_action(self):
        """Only list and clear are accepted."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["cache", "purge"])


class TestKappa:
    """Test the kappa sweep command."""

    def test_sweep_reports_perturbation_and_trend(self, tmp_path):
        """Rows carry the perturbation term and the summary flags the epsilon trend."""
        config = tmp_path / "kappa.toml"
        config.write_text(
            'particles = [40]\nepsilons = [0.0, 0.5]\nreplicates = 4\nhorizons = [0.5]\n'
        )
        out = tmp_path / "kappa"

        assert main(["kappa", "--config", str(config), "--out", str(out)]) == 0

        with open(out / "kappa.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert [row["epsilon"] for row in rows] == ["0.0", "0.5"]
        assert rows[0]["status"] == "contraction expected (constant killing)"
        assert rows[1]["status"] == "empirical-only"
        assert float(rows[1]["perturbation"]) > 0
        summary = read_manifest(out)["summary"]
        assert isinstance(summary["kappa_nonincreasing_in_epsilon"], bool)
        assert set(summary["nonincreasing_by_n"]) == {"40"}
        assert set(summary["perturbation"]) == {"0", "0.5"}
