from __future__ import annotations

from unittest.mock import MagicMock

import numpy as np
import pytest

from src import verify
from src.cli import main
from src.gradcheck import GradCheckReport
from src.verify import CHECKS, VerifyResult, run_checks

FAST = ["conv paths agree", "kernel banks", "payload solver", "metric oracles", "checkpoint integrity", "attention gate"]


def test_fast_checks_pass():
    result = run_checks(seed=0, only=FAST)
    assert result.ok, result.summary()
    assert sorted(result.passed) == sorted(FAST)


def test_failure_is_reported_not_raised(monkeypatch):
    def broken(rng):
        raise AssertionError("gradient mismatch")

    monkeypatch.setitem(CHECKS, "broken", broken)
    result = run_checks(seed=4, only=["broken", "kernel banks"])
    assert not result.ok
    assert result.passed == ["kernel banks"]
    assert result.failures == [("broken", "gradient mismatch")]
    assert "FAIL broken: gradient mismatch" in result.summary()
    assert "(seed 4)" in result.summary()


def test_summary_counts():
    result = VerifyResult(seed=1, passed=["a", "b"], seconds=0.25)
    assert result.summary().startswith("verify: 2 passed, 0 failed in 0.2s (seed 1)")


def test_verify_command_exit_codes(monkeypatch, capsys):
    assert main(["verify", "--only", "kernel banks", "--only", "attention gate"]) == 0
    assert "2 passed" in capsys.readouterr().out
    monkeypatch.setitem(verify.CHECKS, "broken", lambda rng: (_ for _ in ()).throw(AssertionError("boom")))
    assert main(["verify", "--only", "broken"]) == 1


@pytest.mark.slow
def test_full_suite_passes():
    result = run_checks(seed=0)
    assert result.ok, result.summary()
    assert set(result.passed) == set(CHECKS)


def test_network_check_samples_several_elements_per_tensor(monkeypatch):
    grad_check = MagicMock(return_value=GradCheckReport(max_rel_error=0.0, checked=1, tolerance=1e-4))
    monkeypatch.setattr(verify, "grad_check", grad_check)
    verify.check_network_gradient(np.random.default_rng(0))
    kwargs = grad_check.call_args.kwargs
    assert kwargs["max_per_tensor"] >= 4
    assert kwargs["tolerance"] == 1e-4
    names = kwargs["names"]
    assert "attention.gamma" in names and len(names) == len(grad_check.call_args.args[1])
