import pytest

from corexae.oracles import FAULTS, SUITES, OracleCheck, run_suites


def test_all_suites_pass():
    report = run_suites(n=40)
    assert report.passed, [c.line() for c in report.failures()]
    assert {c.suite for c in report.checks} == set(SUITES)


@pytest.mark.parametrize("fault, suite, check", [("eq5-sign", "identities", "mi-decomposition"),
                                                 ("bound-offset", "bound", "tight-at-true-posterior")])
def test_injected_faults_are_caught(fault, suite, check):
    report = run_suites([suite], n=20, fault=fault)
    assert not report.passed
    assert f"{suite}/{check}" in [f"{c.suite}/{c.name}" for c in report.failures()]


def test_informational_checks_never_gate():
    c = OracleCheck("s", "n", 1.0, 1e-12, 3, gated=False)
    assert c.line().startswith("INFO") and not c.passed
    from corexae.oracles import SuiteReport

    assert SuiteReport([c], 0.0).passed


def test_unknown_names_rejected():
    with pytest.raises(ValueError):
        run_suites(["nope"])
    with pytest.raises(ValueError):
        run_suites(fault="nope")


def test_non_finite_residual_fails():
    assert not OracleCheck("s", "n", float("nan"), 1.0, 1).passed
