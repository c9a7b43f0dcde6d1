"""Integration tests for the model-level check suites."""
import pytest

from unite.checks import equivariance_suite, extensivity_suite, gradcheck_suite, run_suite, scaling_suite
from unite.model import UniteModel
from unite.settings import HeadSettings, ModelSettings


def case(report, name):
    return next(c for c in report.cases if c.case == name)


@pytest.mark.integration
class TestEquivarianceSuite:
    """Integration tests for the symmetry suite."""

    def test_small_model_passes(self):
        """Test a random small model satisfies every symmetry law."""
        report = equivariance_suite(n_molecules=3, n_transforms=2, settings=ModelSettings.small())
        assert [c.case for c in report.cases] == ["input rotation", "rotation", "parity", "permutation", "translation"]
        assert report.passed, report.to_dict()

    def test_injected_bug_breaks_rotation(self):
        """Test a perturbed CG coefficient is caught by the rotation case only."""
        report = equivariance_suite(n_molecules=3, n_transforms=2, settings=ModelSettings.small(), inject_bug=True)
        assert not report.passed
        assert not case(report, "rotation").passed
        assert case(report, "input rotation").passed
        assert case(report, "permutation").passed


@pytest.mark.integration
class TestExtensivitySuite:
    """Integration tests for far-dimer duplication."""

    def test_passes(self):
        """Test extensive heads double and the HOMO head is unchanged."""
        report = run_suite("extensivity", n_molecules=2)
        assert len(report.cases) == 3
        assert report.passed, report.to_dict()

    def test_tolerance_scale_tightens(self):
        """Test a zero scale turns any non-zero deviation into a failure."""
        report = extensivity_suite(scale=0.0, n_molecules=2)
        assert all(c.tolerance == 0.0 for c in report.cases)


@pytest.mark.integration
@pytest.mark.slow
class TestGradcheckSuite:
    """Integration tests for the finite-difference gradient check."""

    def test_energy_and_dipole_full_sweep(self):
        """Test autograd agrees with central differences on every entry of every parameter."""
        report = gradcheck_suite(heads=("energy", "dipole"))
        assert report.passed, [c for c in report.cases if not c.passed]

        dipole = UniteModel(ModelSettings.small(), HeadSettings(kind="dipole"), 4)
        expected = {f"dipole {name} ({p.numel()} entries)" for name, p in dipole.named_parameters()}
        assert expected <= {c.case for c in report.cases}
        assert any(c.case.startswith("energy head.w_o.weight") for c in report.cases)

    def test_every_head_kind_passes(self):
        """Test pooled readouts of every head kind backpropagate correctly."""
        report = gradcheck_suite(entries_per_tensor=4)
        kinds = {c.case.split(" ")[0] for c in report.cases}
        assert kinds == {"energy", "dipole", "polarizability", "homo", "gap", "r2", "density"}
        assert report.passed, [c for c in report.cases if not c.passed]


@pytest.mark.integration
@pytest.mark.slow
class TestScalingSuite:
    """Integration tests for the wall-time scaling suite."""

    def test_table_and_exponent(self):
        """Test one timing row per chain length and a sub-quadratic fit."""
        report = scaling_suite(units=(4, 8, 16, 32), repeats=2)
        assert [row["atoms"] for row in report.table] == [8, 16, 32, 64]
        assert report.table[0]["pairs"] > 0
        assert report.passed, report.to_dict()
