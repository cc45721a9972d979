import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levypolymer.lattice import Field, LatticeBox
from levypolymer.seeding import rng_for
from levypolymer.walk import (PolymerPath, RateVector, cumulant, directions,
                              generator_apply, kappa_bounds,
                              rate_function_closed, rate_function_legendre,
                              sample_path, tilt, transition_probs)

from oracles import bessel_pmf, legendre_bruteforce


# -- RateVector / PolymerPath -----------------------------------------------


def test_rate_vector_validation():
    with pytest.raises(ValueError):
        RateVector(1, (1.0,))
    with pytest.raises(ValueError):
        RateVector(1, (1.0, 0.0))
    with pytest.raises(ValueError):
        RateVector(2, (1.0, 1.0, -2.0, 1.0))
    kv = RateVector.isotropic(2, 1.5)
    assert kv.total_rate == pytest.approx(1.5)
    assert (kv + kv).rates == (3.0,) * 4


def test_direction_ordering_plus_then_minus():
    assert directions(1).tolist() == [[1], [-1]]
    assert directions(2).tolist() == [[1, 0], [-1, 0], [0, 1], [0, -1]]


def test_path_invariants():
    with pytest.raises(ValueError):
        PolymerPath(1, [0.5, 0.4], [[1], [1]], 1.0)
    with pytest.raises(ValueError):
        PolymerPath(1, [0.5, 1.4], [[1], [1]], 1.0)
    p = PolymerPath(1, [0.25, 0.5], [[1], [-1]], 1.0)
    assert p.position_at(0.1) == (0,)
    assert p.position_at(0.25) == (1,)
    assert p.position_at(0.9) == (0,)
    segs = list(p.segments(1.0))
    assert segs == [(0.0, 0.25, (0,)), (0.25, 0.5, (1,)), (0.5, 1.0, (0,))]


# -- generator ----------------------------------------------------------------


def test_generator_kills_constants_on_full_lattice():
    box = LatticeBox(2, 4, boundary="periodic")
    f = Field(box, np.ones(box.shape) * 3.7)
    out = generator_apply(f, RateVector.isotropic(2, 2.0))
    assert np.abs(out.values).max() == 0.0


def test_generator_indicator_d1():
    # kappa = 2 isotropic in d=1 makes kappa_e / 2d = 1
    box = LatticeBox(1, 5)
    f = Field.indicator(box)
    out = generator_apply(f, RateVector.isotropic(1, 2.0))
    assert out.value_at((1,)) == pytest.approx(1.0)
    assert out.value_at((-1,)) == pytest.approx(1.0)
    assert out.value_at((0,)) == pytest.approx(-2.0)


def test_generator_conserves_mass_on_periodic_box():
    box = LatticeBox(2, 3, boundary="periodic")
    rng = rng_for(12, "gen")
    f = Field(box, rng.random(box.shape))
    out = generator_apply(f, RateVector(2, (0.5, 2.0, 1.0, 3.0)))
    assert abs(out.total()) < 1e-12


# -- sample_path ---------------------------------------------------------------


def test_jump_count_matches_poisson_mean():
    kv = RateVector.isotropic(2, 1.4)
    T, n = 3.0, 100_000
    counts = np.array([sample_path(kv, T, rng_for(1, "jc", i)).n_jumps
                       for i in range(n)])
    mean, target = counts.mean(), kv.total_rate * T
    se = counts.std(ddof=1) / math.sqrt(n)
    assert abs(mean - target) <= 4 * se


def test_endpoint_symmetric_mean_zero():
    kv = RateVector.isotropic(1, 1.0)
    n = 20_000
    ends = np.array([sample_path(kv, 1.0, rng_for(2, "sym", i)).position_at(1.0)[0]
                     for i in range(n)])
    se = ends.std(ddof=1) / math.sqrt(n)
    assert abs(ends.mean()) <= 4 * se


def test_endpoint_law_matches_bessel():
    kv = RateVector.isotropic(1, 1.0)
    n = 20_000
    hits = np.array([sample_path(kv, 1.0, rng_for(3, "b", i)).position_at(1.0) == (0,)
                     for i in range(n)], dtype=float)
    p_hat = hits.mean()
    se = math.sqrt(p_hat * (1 - p_hat) / n)
    assert abs(p_hat - bessel_pmf(0, 1.0, 1.0)) <= 4 * se


def test_sample_path_deterministic():
    kv = RateVector(1, (2.0, 0.5))
    p1, p2 = sample_path(kv, 2.0, 99), sample_path(kv, 2.0, 99)
    assert np.array_equal(p1.times, p2.times) and np.array_equal(p1.steps, p2.steps)


# -- transition_probs -----------------------------------------------------------


def test_transition_probs_t0_is_indicator():
    box = LatticeBox(2, 3)
    f = transition_probs(RateVector.isotropic(2, 1.0), 0.0, box)
    assert f.value_at((0, 0)) == 1.0 and f.total() == 1.0


def test_transition_probs_bessel_profile():
    box = LatticeBox(1, 30)
    f = transition_probs(RateVector.isotropic(1, 1.0), 1.0, box)
    worst = max(abs(f.value_at((x,)) - bessel_pmf(x, 1.0, 1.0)) for x in range(-10, 11))
    assert worst < 1e-10


def test_transition_probs_convolution_d1():
    box = LatticeBox(1, 28)
    p1 = transition_probs(RateVector.isotropic(1, 1.0), 1.0, box).values
    p2 = transition_probs(RateVector.isotropic(1, 2.0), 1.0, box).values
    p12 = transition_probs(RateVector.isotropic(1, 3.0), 1.0, box).values
    conv = np.convolve(p1, p2)[28:28 + box.side]
    assert np.abs(conv - p12).max() < 1e-9


def test_transition_probs_convolution_of_tilted_rates():
    # rates add: the kernel at kappa(lam) + kappa(lam') is the convolution
    kva = tilt(1.0, [0.3])
    kvb = tilt(0.7, [-0.2])
    box = LatticeBox(1, 30)
    pa = transition_probs(kva, 1.0, box).values
    pb = transition_probs(kvb, 1.0, box).values
    pab = transition_probs(kva + kvb, 1.0, box).values
    conv = np.convolve(pa, pb)[30:30 + box.side]
    assert np.abs(conv - pab).max() < 1e-9


def test_transition_probs_mass_deficit_below_reported_bound():
    kv = RateVector(1, (1.5, 0.7))
    for R in (6, 10, 16):
        f = transition_probs(kv, 2.0, LatticeBox(1, R), tail_tol=1e-12)
        deficit = 1.0 - f.total()
        assert deficit <= f.info["escape_bound"] + 1e-12
        assert deficit >= -1e-12


def test_transition_probs_accuracy_flag_on_small_box():
    f = transition_probs(RateVector.isotropic(1, 5.0), 3.0, LatticeBox(1, 4))
    assert f.info["accuracy_ok"] is False
    assert f.total() < 1.0
    big = transition_probs(RateVector.isotropic(1, 5.0), 3.0, LatticeBox(1, 80))
    assert big.info["accuracy_ok"] is True


# -- cumulant / tilt / bounds ----------------------------------------------------


def test_cumulant_zero_at_origin():
    assert cumulant(RateVector.isotropic(3, 2.0), [0.0, 0.0, 0.0]) == 0.0


def test_cumulant_d1_value():
    assert cumulant(RateVector.isotropic(1, 1.0), [1.0]) == pytest.approx(
        math.cosh(1.0) - 1.0, abs=1e-14)


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_cumulant_consistent_with_kernel_at_any_horizon(t):
    kv = RateVector.isotropic(1, 1.0)
    lam = 0.7
    box = LatticeBox(1, 45)
    probs = transition_probs(kv, t, box).values
    xs = np.arange(-box.radius, box.radius + 1)
    emp = math.log(float(np.sum(np.exp(lam * xs) * probs))) / t
    assert abs(emp - cumulant(kv, [lam])) < 1e-8


def test_cumulant_even_in_each_coordinate():
    kv = RateVector.isotropic(2, 1.3)
    for lam in ([0.4, -0.2], [-0.4, -0.2], [0.4, 0.2]):
        assert cumulant(kv, lam) == pytest.approx(
            cumulant(kv, [abs(lam[0]), abs(lam[1])]), rel=1e-14)


def test_tilt_values():
    assert tilt(2.0, [0.0]).rates == (2.0, 2.0)
    kv = tilt(2.0, [1.0])
    assert kv.rates == pytest.approx((2 * math.e, 2 / math.e))


def test_tilt_endpoint_law_identity():
    # normalized e^<lam,x> P_kappa(X_t = x) equals the tilted walk's kernel
    kappa, lam, t = 1.0, 0.6, 1.0
    box = LatticeBox(1, 35)
    base = transition_probs(RateVector.isotropic(1, kappa), t, box).values
    tilted = transition_probs(tilt(kappa, [lam]), t, box).values
    xs = np.arange(-box.radius, box.radius + 1)
    reweighted = np.exp(lam * xs) * base
    reweighted /= reweighted.sum()
    assert np.abs(reweighted - tilted / tilted.sum()).max() < 1e-9


def test_kappa_bounds_degenerate_at_zero():
    kb = kappa_bounds(2.5, [0.0, 0.0])
    assert kb.kappa_under == kb.kappa_over == 2.5
    assert kb.delta1 == (0.0,) * 4 and kb.delta2 == (0.0,) * 4


def test_kappa_bounds_d1_explicit():
    kb = kappa_bounds(1.0, [1.0])
    assert kb.kappa_under == pytest.approx(math.exp(-1), rel=1e-15)
    assert kb.kappa_over == pytest.approx(math.e, rel=1e-15)
    gap = math.e - math.exp(-1)
    assert kb.delta1 == (gap, 0.0) and kb.delta2 == (0.0, gap)
    # reconstruction is exact here
    rates = tilt(1.0, [1.0]).rates
    assert tuple(kb.kappa_under + d for d in kb.delta1) == rates
    assert tuple(r + d for r, d in zip(rates, kb.delta2)) == (kb.kappa_over,) * 2


@settings(max_examples=200, deadline=None)
@given(st.floats(0.1, 50.0), st.lists(st.floats(-0.5, 0.5), min_size=1, max_size=3))
def test_kappa_bounds_reconstruction_within_ulp(kappa, lam):
    kb = kappa_bounds(kappa, lam)
    rates = tilt(kappa, np.array(lam)).rates
    for r, d1, d2 in zip(rates, kb.delta1, kb.delta2):
        assert abs(kb.kappa_under + d1 - r) <= math.ulp(r)
        assert abs(r + d2 - kb.kappa_over) <= math.ulp(kb.kappa_over)
    assert kb.kappa_under <= min(rates) and max(rates) <= kb.kappa_over


def test_kappa_bounds_continuity_toward_zero_tilt():
    prev_gap = None
    for eps in (0.4, 0.2, 0.1, 0.05):
        kb = kappa_bounds(3.0, [eps, -eps])
        gap = kb.kappa_over - kb.kappa_under
        if prev_gap is not None:
            assert gap < prev_gap
        prev_gap = gap
    assert prev_gap < 3.0 * 0.25


# -- rate functions --------------------------------------------------------------


def test_rate_function_zero_at_origin():
    assert rate_function_closed(1.7, [0.0, 0.0]) == 0.0
    assert rate_function_legendre(1.7, [0.0, 0.0]) == 0.0


def test_rate_function_d1_value():
    expected = math.asinh(1.0) - math.sqrt(2.0) + 1.0
    assert rate_function_closed(1.0, [1.0]) == pytest.approx(expected, rel=1e-12)
    assert rate_function_legendre(1.0, [1.0]) == pytest.approx(expected, rel=1e-12)


def test_rate_function_routes_agree_spec_point():
    c = rate_function_closed(3.0, [0.5, -0.2])
    l = rate_function_legendre(3.0, [0.5, -0.2])
    assert abs(c - l) <= 1e-10 * max(1.0, abs(c))


def test_rate_function_matches_bruteforce_oracle():
    for kappa, x in ((1.0, (1.0,)), (3.0, (0.5, -0.2)), (0.7, (2.0, 0.3)),
                     (10.0, (-4.0, 1.0, 0.2))):
        oracle = legendre_bruteforce(kappa, x)
        assert rate_function_closed(kappa, x) == pytest.approx(oracle, abs=1e-7)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.1, 100.0), st.lists(st.floats(-10, 10), min_size=1, max_size=3))
def test_rate_function_duality_property(kappa, x):
    c = rate_function_closed(kappa, x)
    l = rate_function_legendre(kappa, x)
    assert abs(c - l) <= 1e-9 * max(abs(c), abs(l), 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.2, 20.0), st.lists(st.floats(-5, 5), min_size=2, max_size=3),
       st.randoms(use_true_random=False))
def test_rate_function_symmetry(kappa, x, rnd):
    base = rate_function_closed(kappa, x)
    flipped = [v if rnd.random() < 0.5 else -v for v in x]
    rnd.shuffle(flipped)
    assert rate_function_closed(kappa, flipped) == pytest.approx(base, rel=1e-12, abs=1e-15)


def test_rate_function_monotone_in_each_coordinate():
    grid = np.linspace(0.0, 6.0, 25)
    vals = [rate_function_closed(2.0, [g, 0.5]) for g in grid]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    vals_leg = [rate_function_legendre(2.0, [g, 0.5]) for g in grid]
    assert all(b > a for a, b in zip(vals_leg, vals_leg[1:]))


@settings(max_examples=150, deadline=None)
@given(st.floats(0.1, 50.0), st.lists(st.floats(-8, 8), min_size=1, max_size=3))
def test_rate_function_nonnegative_zero_only_at_origin(kappa, x):
    v = rate_function_closed(kappa, x)
    if all(xi == 0 for xi in x):
        assert v == 0.0
    else:
        assert v >= 0.0
        if max(abs(xi) for xi in x) > 1e-3:
            assert v > 0.0
