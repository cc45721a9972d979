import json
import math

import numpy as np
import pytest

from levypolymer.environment import (EnvironmentParams, LevyMeasure, alpha,
                                     environment_from_json, environment_to_json,
                                     log_weight_factor, parse_preset,
                                     sample_environment)
from levypolymer.lattice import LatticeBox
from levypolymer.seeding import derive_seed


def _delta_env(box, T, seed, sigma2=0.0, atoms=()):
    return sample_environment(EnvironmentParams(sigma2, LevyMeasure(atoms)),
                              box, T, seed)


# -- measure / params validation ------------------------------------------------


def test_levy_measure_validation():
    with pytest.raises(ValueError):
        LevyMeasure(((-1.5, 1.0),))
    with pytest.raises(ValueError):
        LevyMeasure(((0.5, 0.0),))
    with pytest.raises(ValueError):
        LevyMeasure(((0.5, -1.0),))
    m = LevyMeasure(((-1.0, 2.0), (0.5, 1.0)))
    assert m.total_mass == 3.0
    assert m.mean_mark_rate == pytest.approx(-1.5)
    assert m.has_hard_obstacles and not m.is_pure_hard_obstacle
    assert LevyMeasure.empty().total_mass == 0.0


def test_params_validation():
    with pytest.raises(ValueError):
        EnvironmentParams(-0.1, LevyMeasure.empty())


def test_alpha_examples():
    assert alpha(EnvironmentParams(1.0, LevyMeasure.empty())) == 0.5
    nu = 0.7
    assert alpha(EnvironmentParams(0.0, LevyMeasure.delta(-1.0, nu))) == -nu
    assert alpha(EnvironmentParams(0.0, LevyMeasure.delta(0.5, 2.0))) == pytest.approx(1.0)


# -- sampling --------------------------------------------------------------------


def test_null_measure_has_no_events():
    env = _delta_env(LatticeBox(2, 3), 5.0, 1)
    assert env.n_events == 0
    t, m = env.events_at((1, -2))
    assert len(t) == 0 and len(m) == 0


def test_event_count_poisson_mean():
    # mass 2 at mark 0.5, horizon 3: counts ~ Poisson(6) per site
    box = LatticeBox(1, 1)
    n = 100_000
    counts = np.empty(n)
    for i in range(n):
        env = _delta_env(box, 3.0, derive_seed(5, i), atoms=((0.5, 2.0),))
        counts[i] = len(env.events_at((0,))[0])
    assert abs(counts.mean() - 6.0) <= 3.0 * math.sqrt(6.0) / math.sqrt(n)
    assert abs(counts.var(ddof=1) - 6.0) <= 5.0 * 6.0 / math.sqrt(n)


def test_same_seed_bit_identical():
    box = LatticeBox(2, 4)
    params = parse_preset("gaussian(0.5)+bernoulli_reward(0.4,1.2)")
    a = sample_environment(params, box, 2.0, 33)
    b = sample_environment(params, box, 2.0, 33)
    assert a.equals(b)
    c = sample_environment(params, box, 2.0, 34)
    assert not a.equals(c)


def test_per_site_scheme_independent_of_box_size():
    # the per-site stream is keyed by (seed, site), not by the box
    params = parse_preset("bernoulli_reward(0.2,1.5)")
    small = sample_environment(params, LatticeBox(1, 2), 2.0, 7)
    large = sample_environment(params, LatticeBox(1, 6), 2.0, 7)
    for site in ((0,), (1,), (-2,)):
        ts, ms = small.events_at(site)
        tl, ml = large.events_at(site)
        assert np.array_equal(ts, tl) and np.array_equal(ms, ml)


def test_dense_scheme_matches_law_and_is_deterministic():
    params = parse_preset("hard_obstacles(2)")
    box = LatticeBox(1, 30)
    a = sample_environment(params, box, 3.0, 11, scheme="dense")
    b = sample_environment(params, box, 3.0, 11, scheme="dense")
    assert a.equals(b)
    counts = np.diff(a.offsets)
    assert abs(counts.mean() - 6.0) < 4 * math.sqrt(6.0 / box.n_sites)
    # times sorted within each site
    for rank in range(box.n_sites):
        lo, hi = a.offsets[rank], a.offsets[rank + 1]
        assert np.all(np.diff(a.times[lo:hi]) >= 0)


def test_event_times_in_range_and_sorted():
    env = _delta_env(LatticeBox(1, 5), 2.5, 3, atoms=((0.3, 3.0),))
    assert env.times.min() > 0 and env.times.max() <= 2.5
    for rank in range(env.box.n_sites):
        lo, hi = env.offsets[rank], env.offsets[rank + 1]
        assert np.all(np.diff(env.times[lo:hi]) > 0)


def test_site_independence_empirical_correlation():
    box = LatticeBox(1, 1)
    n = 10_000
    c0 = np.empty(n)
    c1 = np.empty(n)
    for i in range(n):
        env = _delta_env(box, 1.0, derive_seed(9, i), atoms=((0.5, 1.0),))
        c0[i] = len(env.events_at((0,))[0])
        c1[i] = len(env.events_at((1,))[0])
    corr = np.corrcoef(c0, c1)[0, 1]
    assert abs(corr) <= 4.0 / math.sqrt(n)


# -- log weight factor ------------------------------------------------------------


def test_log_weight_factor_examples():
    box = LatticeBox(1, 3)
    empty = _delta_env(box, 1.0, 1)
    assert log_weight_factor(empty, (0,), (0.0, 1.0)) == 0.0

    import levypolymer.environment as env_mod

    params = EnvironmentParams(0.0, LevyMeasure.delta(-1.0, 1.0))
    offsets = np.zeros(box.n_sites + 1, dtype=np.int64)
    offsets[box.rank_of((0,)) + 1:] = 1
    obstacle = env_mod.EnvironmentRealization(
        params, box, 1.0, np.array([0.5]), np.array([-1.0]), offsets, 0)
    assert log_weight_factor(obstacle, (0,), (0.0, 1.0)) == -math.inf
    assert log_weight_factor(obstacle, (0,), (0.6, 1.0)) == 0.0

    params_r = EnvironmentParams(0.0, LevyMeasure.delta(1.0, 1.0))
    reward = env_mod.EnvironmentRealization(
        params_r, box, 1.0, np.array([0.5]), np.array([1.0]), offsets, 0)
    assert log_weight_factor(reward, (0,), (0.0, 1.0)) == pytest.approx(math.log(2.0))


def test_log_weight_factor_interval_validation():
    env = _delta_env(LatticeBox(1, 2), 1.0, 1)
    with pytest.raises(ValueError):
        log_weight_factor(env, (0,), (0.5, 1.5))
    with pytest.raises(ValueError):
        log_weight_factor(env, (0,), (-0.1, 0.5))


def test_refinement_consistency_jumps_and_gaussian():
    params = parse_preset("gaussian(0.7)+bernoulli_reward(0.6,2)")
    env = sample_environment(params, LatticeBox(1, 3), 2.0, 21)
    cuts = [0.0, 0.3, 0.7071067811865476, 1.25, 2.0]
    whole = log_weight_factor(env, (1,), (0.0, 2.0))
    parts = sum(log_weight_factor(env, (1,), (a, b)) for a, b in zip(cuts, cuts[1:]))
    assert parts == pytest.approx(whole, abs=1e-10)


def test_gaussian_increment_variance_scaling():
    # increments over disjoint unit windows are i.i.d. N(0, sigma2)
    params = parse_preset("gaussian(2.0)")
    vals = []
    for i in range(4000):
        env = sample_environment(params, LatticeBox(1, 1), 2.0, derive_seed(77, i))
        vals.append(env.gaussian_increment((0,), 0.0, 1.0))
    vals = np.array(vals)
    assert abs(vals.mean()) < 4 * math.sqrt(2.0 / len(vals))
    assert abs(vals.var(ddof=1) - 2.0) < 4 * 2.0 * math.sqrt(2.0 / len(vals))


def test_annealed_moment_of_weight_factor():
    # sample mean of exp(L_0(1)) converges to exp(alpha)
    params = parse_preset("gaussian(0.5)+bernoulli_reward(0.8,0.6)")
    a = alpha(params)
    n = 100_000
    box = LatticeBox(1, 1)
    w = np.empty(n)
    for i in range(n):
        env = sample_environment(params, box, 1.0, derive_seed(123, i))
        w[i] = math.exp(log_weight_factor(env, (0,), (0.0, 1.0)))
    se = w.std(ddof=1) / math.sqrt(n)
    assert abs(w.mean() - math.exp(a)) <= 4 * se


# -- presets and serialization ------------------------------------------------------


def test_parse_preset_forms():
    p = parse_preset("hard_obstacles(1.5)")
    assert p.sigma2 == 0.0 and p.levy.atoms == ((-1.0, 1.5),)
    p = parse_preset("bernoulli_reward(0.3, 0.5)")
    assert p.levy.atoms == ((0.3, 0.5),)
    p = parse_preset("gaussian(2)")
    assert p.sigma2 == 2.0 and p.levy.atoms == ()
    p = parse_preset("gaussian(1)+hard_obstacles(0.5)+bernoulli_reward(0.2,0.1)")
    assert p.sigma2 == 1.0 and len(p.levy.atoms) == 2
    assert parse_preset("empty()").levy.total_mass == 0.0
    with pytest.raises(ValueError):
        parse_preset("wobble(1)")
    with pytest.raises(ValueError):
        parse_preset("bernoulli_reward(-2, 1)")


def test_json_round_trip_replays_exactly():
    params = parse_preset("gaussian(0.3)+hard_obstacles(0.5)+bernoulli_reward(0.4,0.8)")
    env = sample_environment(params, LatticeBox(2, 3), 1.5, 99)
    doc = environment_to_json(env)
    back = environment_from_json(doc)
    assert back.equals(env)
    # Gaussian layer replays from the serialized seed
    assert back.gaussian_increment((1, -2), 0.25, 1.25) == \
        env.gaussian_increment((1, -2), 0.25, 1.25)
    # schema sanity: site keys map to [time, mark] pairs
    parsed = json.loads(doc)
    assert parsed["format"] == "levypolymer-environment"
    for key, events in parsed["events"].items():
        assert len(key.split(",")) == 2
        for t, r in events:
            assert 0 < t <= 1.5 and r >= -1.0
