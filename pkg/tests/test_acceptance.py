"""Acceptance gate: runs every release criterion at its stated tolerance.

Each test prints one PASS/FAIL line (visible with pytest -s or in the
captured-output section of the report) and asserts the criterion.
"""

import pytest

from levypolymer.verify import CRITERIA, run_criterion


def _check(name):
    result = run_criterion(name, full=True)
    line = f"{'PASS' if result.passed else 'FAIL'} {result.name} " \
           f"({result.seconds:.1f}s): {result.detail}"
    print(line)
    assert result.passed, line
    return result


def test_criterion_01_rate_function_duality():
    _check("criterion_01_rate_duality")


def test_criterion_02_bessel_oracle():
    _check("criterion_02_bessel_kernel")


def test_criterion_03_convolution_identity():
    _check("criterion_03_convolution")


def test_criterion_04_tilting_identity_residual():
    _check("criterion_04_tilting_residual")


def test_criterion_05_annealed_identity():
    _check("criterion_05_annealed_martingale")


def test_criterion_06_hard_obstacle_closed_form():
    _check("criterion_06_hard_obstacle_closed_form")


def test_criterion_07_comparison_theorem():
    _check("criterion_07_comparison_theorem")


def test_criterion_08_sandwich_inequality():
    _check("criterion_08_sandwich_inequality")


def test_criterion_09_mc_solver_route_agreement():
    _check("criterion_09_route_agreement")


def test_criterion_10_weak_strong_trend_ordering():
    _check("criterion_10_disorder_trend")


def test_criterion_11_thread_determinism():
    _check("criterion_11_cli_determinism")


def test_registry_names_are_unique_and_complete():
    names = [name for name, _, _ in CRITERIA]
    assert len(names) == len(set(names)) == 11
