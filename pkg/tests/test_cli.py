"""Tests for the genro-vad command line."""

import json

import pytest
import yaml

from genro_vad.autodiff.tensor import get_precision, set_precision
from genro_vad.cli import build_parser, main
from genro_vad.config import RunConfig
from genro_vad.storage import RunStorage


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory, tiny_config_file):
    """Run directory completed through ``run-all`` with a tiny config file."""
    run_dir = str(tmp_path_factory.mktemp("cli") / "run")
    previous = get_precision()
    try:
        code = main(["run-all", "--run-dir", run_dir, "--config", str(tiny_config_file)])
    finally:
        set_precision(previous)
    assert code == 0
    return run_dir


@pytest.mark.unit
class TestParser:
    """Argument parsing."""

    def test_stage_commands(self):
        """Test every stage is a subcommand."""
        parser = build_parser()
        for command in ("gen", "flow", "train-flowae", "train-cvae", "finetune", "report"):
            assert parser.parse_args([command]).command == command

    def test_scoring_options(self):
        """Test scoring flags are only offered where they apply."""
        parser = build_parser()
        args = parser.parse_args(["score", "--weights", "0.1,10", "--condition", "gt"])
        assert args.weights == "0.1,10"
        assert args.conditions == ["gt"]
        with pytest.raises(SystemExit):
            parser.parse_args(["gen", "--weights", "0.1,10"])

    def test_repeated_overrides(self):
        """Test --set accumulates."""
        args = build_parser().parse_args(["gen", "--set", "seed=1", "--set", "jobs=2"])
        assert args.overrides == ["seed=1", "jobs=2"]

    def test_dump_needs_scenario(self):
        """Test dump-cubes requires a scenario id."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["dump-cubes"])


@pytest.mark.unit
class TestExitCodes:
    """Failures map to documented exit codes."""

    def test_schema(self, capsys):
        """Test the schema command prints the configuration schema."""
        assert main(["schema"]) == 0
        schema = json.loads(capsys.readouterr().out)
        assert schema["type"] == "object"
        assert "memae" in schema["properties"]

    def test_missing_prerequisite(self, tmp_path):
        """Test a stage without its inputs exits with 3."""
        assert main(["flow", "--run-dir", str(tmp_path)]) == 3

    def test_invalid_override(self, tmp_path):
        """Test an invalid configuration value exits with 2."""
        assert main(["gen", "--run-dir", str(tmp_path), "--set", "data.num_frames=3"]) == 2
        assert main(["gen", "--run-dir", str(tmp_path), "--set", "nokey"]) == 2

    def test_missing_config_file(self, tmp_path):
        """Test a missing configuration file exits with 2."""
        missing = str(tmp_path / "absent.yaml")
        assert main(["gen", "--run-dir", str(tmp_path), "--config", missing]) == 2

    def test_invalid_weights(self, tmp_path):
        """Test malformed weights exit with 2."""
        assert main(["score", "--run-dir", str(tmp_path), "--weights", "1,2,3"]) == 2

    def test_unknown_condition(self, tmp_path):
        """Test selecting an unconfigured condition exits with 2."""
        assert main(["score", "--run-dir", str(tmp_path), "--condition", "nope"]) == 2


@pytest.mark.integration
class TestRunDirectory:
    """Commands against a completed run directory."""

    def test_stored_config_is_reused(self, cli_run):
        """Test later commands resolve the configuration stored in the run."""
        storage = RunStorage(cli_run)
        stored = RunConfig.from_dict(yaml.safe_load(storage.read_text("config.yaml")))
        assert stored.data.num_frames == 24
        assert stored.seed == 3

    def test_dump_cubes(self, cli_run):
        """Test dump-cubes writes the scenario's cube file."""
        assert main(["dump-cubes", "--run-dir", cli_run, "--scenario", "test_000"]) == 0
        assert RunStorage(cli_run).exists("dumps/test_000/cubes.vadt")

    def test_dump_unknown_scenario(self, cli_run):
        """Test an unknown scenario exits with 2."""
        assert main(["dump-cubes", "--run-dir", cli_run, "--scenario", "test_042"]) == 2

    def test_weight_sweep(self, cli_run):
        """Test ad-hoc weights add conditions that eval and report pick up."""
        previous = get_precision()
        try:
            assert main(["score", "--run-dir", cli_run, "--weights", "0.1,10"]) == 0
            assert main(["score", "--run-dir", cli_run, "--weights", "10,0.1", "--flow-only"]) == 0
            assert main(["eval", "--run-dir", cli_run]) == 0
            assert main(["report", "--run-dir", cli_run]) == 0
        finally:
            set_precision(previous)
        storage = RunStorage(cli_run)
        rows = storage.read_json("eval/metrics.json")["rows"]
        names = [r["condition"] for r in rows if r["subset"] == "all"]
        assert names[-2:] == ["gt-w0.1_10_0.1_10", "gt-w10_0_10_0"]
        assert len(storage.read_text("report/metrics.csv").splitlines()) == 1 + 3 * 8

    def test_changed_seed_exits_with_2(self, cli_run):
        """Test overriding a hashed setting against existing artifacts exits with 2."""
        assert main(["score", "--run-dir", cli_run, "--seed", "99"]) == 2
