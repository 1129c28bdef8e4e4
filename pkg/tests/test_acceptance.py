"""Acceptance gate: every criterion at its stated tolerance, one line each.

Wall-clock budgets are asserted here (they are not part of the report,
which must be byte-identical between runs).
"""

import time

import pytest

from wkamlab.acceptance import (CHECKS, AcceptanceContext, AcceptanceParams,
                                report_json, run_core_checks)

BUDGETS = {
    "eigenfunction_identity": 1.0,
    "ricci_bound": 1.0,
    "energy_conservation": 1.0,
    "weak_kam_convergence": 60.0,
    "operator_laws": 10.0,
    "conjugate_solution": 120.0,
    "riccati_trace": 10.0,
    "comparison_machinery": 5.0,
    "rigidity_formulas": 10.0,
}


@pytest.fixture(scope="module")
def ctx():
    return AcceptanceContext(AcceptanceParams())


@pytest.fixture(scope="module")
def outcomes(ctx):
    out = {}
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        res = fn(ctx)
        elapsed = time.perf_counter() - t0
        out[name] = (res, elapsed)
        print(f"\n[{elapsed:6.1f}s] {res.line()}")
    return out


@pytest.mark.parametrize("name", [name for name, _ in CHECKS])
def test_criterion(outcomes, name):
    res, elapsed = outcomes[name]
    print(res.line())
    assert res.passed, res.details
    assert elapsed <= BUDGETS[name], f"{name} took {elapsed:.1f}s > {BUDGETS[name]}s"


def test_criterion_determinism(outcomes):
    # two full runs of the gate must serialize to identical bytes
    first = report_json([res for res, _ in outcomes.values()])
    second = report_json(run_core_checks(AcceptanceParams()))
    identical = first == second
    print(f"PASS determinism: byte_identical={identical}, report_bytes={len(first)}"
          if identical else "FAIL determinism")
    assert identical
