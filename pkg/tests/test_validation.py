"""Tests for the property suite behind `fvqsd validate`."""

from unittest.mock import patch

from fleming_viot_qsd import validation
from fleming_viot_qsd.validation import CHECKS, run_validation


class TestRunValidation:
    """Test run_validation."""

    def test_all_checks_pass(self):
        """The shipped implementation satisfies every property."""
        results = run_validation(seed=0)

        failures = [f"{r.name}: {r.detail}" for r in results if not r.passed]
        assert failures == []
        assert [r.name for r in results] == list(CHECKS)

    def test_raising_check_is_a_failure(self):
        """An exception inside a check is recorded, not propagated."""
        def broken(gen):
            raise RuntimeError("boom")

        with patch.dict(validation.CHECKS, {"broken": broken}, clear=True):
            results = run_validation()

        assert len(results) == 1
        assert results[0].passed is False
        assert "RuntimeError: boom" in results[0].detail

    def test_detail_of_passing_check(self):
        """A passing check keeps its description."""
        with patch.dict(validation.CHECKS, {"alpha_table": validation.check_alpha_table}, clear=True):
            results = run_validation()

        assert results[0].passed
        assert results[0].detail == "alpha(N) table values"
