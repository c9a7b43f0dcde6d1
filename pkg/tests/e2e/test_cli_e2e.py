"""End-to-end tests for the unite command line."""
import argparse
import json
import sys

import numpy as np
import pytest

from unite.cli import main, parse_cube_spec


@pytest.fixture
def trained(tmp_path, run_config, toy_dataset):
    """Train an energy checkpoint through the CLI and return its manifest path."""
    output = tmp_path / "energy_run"
    assert main(["train", str(run_config("energy")), str(toy_dataset), "--output-dir", str(output)]) == 0
    return output / "final.json"


def read_rows(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.mark.e2e
class TestFeaturizeCommand:
    """End-to-end tests for unite featurize."""

    def test_make_toy(self, tmp_path):
        """Test toy generation writes one record per conformer."""
        output = tmp_path / "toy.jsonl"
        code = main(["featurize", "--make-toy", "3", "--conformers", "2", "--no-forces", "--no-density",
                     "--output", str(output)])
        assert code == 0
        rows = read_rows(output)
        assert len(rows) == 6
        assert "forces_hartree_per_bohr" not in rows[0]["labels"]
        assert rows[0]["molecule_id"] == rows[1]["molecule_id"]

    def test_features_npz(self, tmp_path, toy_dataset):
        """Test featurizing a dataset stores tensors, atoms, coordinates and E_TB per line."""
        output = tmp_path / "features.npz"
        assert main(["featurize", str(toy_dataset), "--output", str(output), "--fmo-features"]) == 0
        arrays = np.load(output)
        assert len(arrays["channels"]) == 12
        assert arrays["line1_data"].shape[0] == 12
        assert arrays["line1_atoms"].shape[0] == arrays["line1_coords"].shape[0]
        assert np.isfinite(arrays["line8_e_tb"])

    def test_needs_dataset_or_toy(self, tmp_path):
        """Test featurize without input is an argument error."""
        with pytest.raises(SystemExit) as excinfo:
            main(["featurize", "--output", str(tmp_path / "x.npz")])
        assert excinfo.value.code == 2


@pytest.mark.e2e
class TestTrainPredictEval:
    """End-to-end tests for train, predict and eval."""

    def test_train_writes_checkpoints(self, trained):
        """Test training leaves final and best checkpoints plus metrics."""
        assert trained.exists()
        assert (trained.parent / "best.json").exists()
        assert "train_mae" in json.loads((trained.parent / "metrics.json").read_text())

    def test_train_bad_dataset(self, tmp_path, run_config):
        """Test a missing dataset makes train exit with 1."""
        code = main(["train", str(run_config("energy")), str(tmp_path / "missing.jsonl"),
                     "--output-dir", str(tmp_path / "run")])
        assert code == 1

    def test_train_reports_workflow_errors(self, tmp_path, mocker):
        """Test errors left in the workflow state make train exit with 1."""
        run = mocker.patch("unite.cli.run_training", return_value={"errors": ["fit: non-finite gradient"]})
        assert main(["train", "c.json", "d.jsonl", "--output-dir", str(tmp_path), "--seed", "4"]) == 1
        overrides = run.call_args.args[3]
        assert overrides == {"seed": 4, "delta_learning": False, "fmo_features": False}

    def test_predict_with_forces(self, tmp_path, trained, toy_dataset):
        """Test predictions keep record order and forces have one row per atom."""
        output = tmp_path / "predictions.jsonl"
        assert main(["predict", str(trained), str(toy_dataset), "--output", str(output), "--forces"]) == 0
        rows = read_rows(output)
        assert [row["line"] for row in rows] == list(range(1, 9))
        assert rows[0]["molecule_id"] == "toy-0"
        assert len(rows[0]["forces"]) == len(rows[0]["atoms"])
        assert isinstance(rows[0]["prediction"], float)

    def test_predict_cube_needs_density_head(self, tmp_path, trained, toy_dataset):
        """Test asking an energy checkpoint for density cubes fails with exit 1."""
        code = main(["predict", str(trained), str(toy_dataset), "--output", str(tmp_path / "p.jsonl"),
                     "--density-cube", "spacing=0.5"])
        assert code == 1

    def test_eval_reports_mae(self, tmp_path, trained, toy_dataset, capsys):
        """Test eval prints and writes the label and force MAE."""
        output = tmp_path / "metrics.json"
        assert main(["eval", str(trained), str(toy_dataset), "--output", str(output), "--forces"]) == 0
        metrics = json.loads(output.read_text())
        assert metrics["records"] == 8
        assert metrics["energy_hartree_mae"] >= 0.0
        assert metrics["forces_hartree_per_bohr_mae"] >= 0.0
        assert json.loads(capsys.readouterr().out) == metrics

    def test_missing_checkpoint(self, tmp_path, toy_dataset):
        """Test an absent checkpoint is a failed command."""
        assert main(["eval", str(tmp_path / "none.json"), str(toy_dataset)]) == 1


@pytest.mark.e2e
@pytest.mark.slow
class TestDensityCommands:
    """End-to-end tests for density checkpoints."""

    def test_predict_cubes_and_eval(self, tmp_path, run_config, toy_dataset):
        """Test density training, cube output next to the predictions and epsilon_rho metrics."""
        run = tmp_path / "density_run"
        assert main(["train", str(run_config("density", "density")), str(toy_dataset), "--output-dir", str(run)]) == 0

        output = tmp_path / "density.jsonl"
        code = main(["predict", str(run / "final.json"), str(toy_dataset), "--output", str(output),
                     "--density-cube", "spacing=0.6"])
        assert code == 0
        rows = read_rows(output)
        assert rows[0]["cube"].endswith("density_line1.cube")
        assert (tmp_path / "density_line1.cube").exists()
        assert np.array(rows[0]["prediction"]).shape == (len(rows[0]["atoms"]), 60)

        metrics_path = tmp_path / "density_metrics.json"
        assert main(["eval", str(run / "final.json"), str(toy_dataset), "--spacing", "0.6",
                     "--output", str(metrics_path)]) == 0
        metrics = json.loads(metrics_path.read_text())
        assert metrics["epsilon_rho_per_molecule"] >= 0.0
        assert metrics["epsilon_rho_per_electron"] >= 0.0


@pytest.mark.e2e
class TestCheckCommand:
    """End-to-end tests for unite check."""

    def test_cg_quick_passes(self, tmp_path):
        """Test the quick CG suite exits 0 and writes its report."""
        report = tmp_path / "cg.json"
        assert main(["check", "cg", "--quick", "--report", str(report)]) == 0
        data = json.loads(report.read_text())
        assert data["passed"]
        assert any("200 trials" in case["case"] for case in data["cases"])

    def test_unknown_suite(self):
        """Test an unknown suite exits with 2."""
        assert main(["check", "symmetry"]) == 2

    def test_injected_bug_fails(self, capsys):
        """Test the quick equivariance suite catches a perturbed CG entry."""
        assert main(["check", "equivariance", "--quick", "--inject-bug"]) == 1
        report = json.loads(capsys.readouterr().out)
        assert not report["passed"]

    def test_tolerance_scale(self):
        """Test a zero tolerance scale fails even the CG identities."""
        assert main(["check", "cg", "--quick", "--tolerance-scale", "0"]) == 1


@pytest.mark.e2e
class TestArguments:
    """End-to-end tests for argument handling."""

    def test_threads_must_be_positive(self):
        """Test --threads 0 is rejected."""
        with pytest.raises(SystemExit) as excinfo:
            main(["--threads", "0", "check", "cg"])
        assert excinfo.value.code == 2

    def test_no_command(self):
        """Test a missing subcommand is rejected."""
        with pytest.raises(SystemExit) as excinfo:
            main([])
        assert excinfo.value.code == 2

    @pytest.mark.parametrize("spec,expected", [("spacing=0.2", 0.2), ("0.5", 0.5)])
    def test_cube_spec(self, spec, expected):
        """Test cube specs accept spacing=X or a bare number."""
        assert parse_cube_spec(spec) == expected

    @pytest.mark.parametrize("spec", ["spacing=-1", "step=0.2", "spacing=fine"])
    def test_bad_cube_spec(self, spec):
        """Test malformed cube specs raise ArgumentTypeError."""
        with pytest.raises(argparse.ArgumentTypeError):
            parse_cube_spec(spec)

    def test_main_entry_point(self, monkeypatch):
        """Test main.py runs the CLI from sys.argv and returns its exit code."""
        import main as entry

        monkeypatch.setattr(sys, "argv", ["main.py", "check", "cg", "--quick"])
        assert entry.main() == 0
