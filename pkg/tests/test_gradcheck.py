import numpy as np

from mvdet import gradcheck


def test_op_suite_all_under_tolerance():
    errs = gradcheck.check_ops(seed=0)
    assert errs, "suite must cover the op set"
    assert max(errs.values()) < 1e-4


def test_full_loss_under_tolerance():
    assert gradcheck.check_full_loss(seed=0, max_coords=50) < 1e-4


def test_report_lines_and_verdict():
    report = gradcheck.GradCheckReport(
        op_errors={"mul": 1e-9}, full_loss_error=2e-7, tolerance=1e-4
    )
    assert report.passed
    lines = report.lines()
    assert any("mul" in ln for ln in lines)
    assert any("PASS" in ln for ln in lines)

    bad = gradcheck.GradCheckReport(
        op_errors={"mul": 1e-2}, full_loss_error=2e-7, tolerance=1e-4
    )
    assert not bad.passed
    assert any("FAIL" in ln for ln in bad.lines())


def test_full_loss_uses_frozen_assignment(monkeypatch):
    # the assignment must be solved once at the base point, then reused by
    # every finite-difference evaluation
    import mvdet.loss as loss_mod

    calls = {"n": 0}
    real = loss_mod.match_real_rows

    def counting(cost):
        calls["n"] += 1
        return real(cost)

    monkeypatch.setattr(loss_mod, "match_real_rows", counting)
    gradcheck.check_full_loss(seed=0, max_coords=3)
    # one solve per layer at the base point only (2 layers in the toy setup)
    assert calls["n"] == 2
