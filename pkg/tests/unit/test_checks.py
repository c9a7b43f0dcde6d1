"""Unit tests for check reports and the cheap check suites."""
import logging

import pytest

from unite.checks import (
    CaseResult,
    SuiteReport,
    cg_suite,
    hydrogen_chain,
    injected_bug_table,
    run_suite,
)
from unite.errors import UnknownSuiteError


@pytest.mark.unit
class TestReports:
    """Unit tests for CaseResult and SuiteReport."""

    def test_case_pass_flag(self):
        """Test a case passes when its deviation is within tolerance."""
        assert CaseResult("a", 1e-12, 1e-10).passed
        assert not CaseResult("b", 1e-9, 1e-10).passed

    def test_report_aggregates_and_logs(self, caplog):
        """Test a single failing case fails the suite and is logged as a warning."""
        report = SuiteReport("demo")
        with caplog.at_level(logging.INFO, logger="unite.checks"):
            report.add("fine", 0.0, 1.0)
            report.add("broken", 2.0, 1.0)
        assert not report.passed
        assert any(r.levelno == logging.WARNING and "broken" in r.getMessage() for r in caplog.records)
        data = report.to_dict()
        assert data["suite"] == "demo"
        assert [c["passed"] for c in data["cases"]] == [True, False]
        assert "table" not in data

    def test_unknown_suite(self):
        """Test unknown suite names raise UnknownSuiteError."""
        with pytest.raises(UnknownSuiteError):
            run_suite("vibes")


@pytest.mark.unit
class TestCgSuite:
    """Unit tests for the Clebsch-Gordan suite."""

    def test_passes(self):
        """Test the tabulated coefficients pass every CG case."""
        report = cg_suite(trials=50)
        assert report.passed, report.to_dict()
        assert len(report.cases) == 4

    def test_detects_injected_bug(self):
        """Test a 1% perturbation of one coefficient fails the suite."""
        report = cg_suite(trials=10, table=injected_bug_table())
        assert not report.passed

    def test_hydrogen_chain(self):
        """Test chains hold two hydrogens per unit."""
        chain = hydrogen_chain(3)
        assert chain.n_atoms == 6
        assert chain.coords[2, 0] == pytest.approx(4.0)
