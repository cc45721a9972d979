"""Large-deviation layer: empirical cumulants, rate estimates, and the exact
tilting, sandwich, and comparison checks.

All cross-rate comparisons reuse one environment realization per sample
across every rate vector involved: the inequalities being checked hold in
distribution over environments, and common realizations slash the variance
of the paired differences without biasing means. Ensemble loops accept a
map_fn so a caller-owned worker pool can parallelize over environments;
aggregation is order-independent (results keyed by environment index).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .environment import EnvironmentParams, alpha as annealed_alpha, sample_environment
from .lattice import LatticeBox
from .seeding import derive_seed
from .solver import (SolverOptions, certified_radius, escape_bound, solve_p2p)
from .walk import RateVector, cumulant, kappa_bounds, rate_function_closed, tilt

_MAX_CERTIFIED_SITES = 50_000
_DENSE_EVENT_CUTOFF = 20_000


@dataclass(frozen=True)
class CumulantSample:
    """Finite-T estimate of the polymer cumulant at one tilt vector."""

    lam: tuple
    lambda_hat: float
    std_error: float
    T: float
    n_env: int
    excluded: int = 0


@dataclass(frozen=True)
class RateEstimate:
    """Finite-T quenched rate value at one velocity, paired with the walk rate."""

    x: tuple
    J_hat: float
    I_value: float
    std_error: float
    T: float
    n_env: int
    excluded: int = 0


@dataclass(frozen=True)
class LegSummary:
    label: str
    mean: float
    std_error: float


@dataclass(frozen=True)
class SandwichReport:
    kappa: float
    lam: tuple
    T: float
    n_env: int
    excluded: int
    legs: tuple
    diff_lower_mean: float
    diff_lower_se: float
    diff_upper_mean: float
    diff_upper_se: float
    ok_lower: bool
    ok_upper: bool

    @property
    def ok(self) -> bool:
        return self.ok_lower and self.ok_upper


@dataclass(frozen=True)
class ComparisonReport:
    rates_combined: tuple
    rates_single: tuple
    T: float
    n_env: int
    excluded: int
    mean_combined: float
    se_combined: float
    mean_single: float
    se_single: float
    diff_mean: float
    diff_se: float
    ok: bool


@dataclass(frozen=True)
class DisorderReport:
    kappa: float
    d: int
    times: tuple
    median_log_W: tuple
    slope: float
    fraction_below: dict
    classification: str
    caveat: str
    n_env: int
    meta: dict


def _mean_se(values) -> tuple:
    arr = np.asarray(values, dtype=float)
    if len(arr) == 0:
        return float("nan"), float("nan")
    se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return float(arr.mean()), se


def _tilted_log_moments(rec, T: float, lam) -> tuple:
    """(log sum e^<lam,x> u(T,x), log sum u(T,x)), common offset included."""
    i = rec.index_of(T)
    vals = rec.scaled_fields[i].ravel()
    mask = vals > 0
    if not np.any(mask):
        return float("-inf"), float("-inf")
    logv = np.log(vals[mask])
    lamx = rec.box.site_array()[mask] @ np.asarray(lam, dtype=float)
    off = rec.log_offsets[i]
    return float(logsumexp(logv + lamx) + off), float(logsumexp(logv) + off)


def empirical_cumulant(env, kappa: float, lam, T: float,
                       options: SolverOptions = SolverOptions()) -> CumulantSample:
    """(1/T) log of the tilted endpoint moment for one realization.

    Exactly zero at lam = 0 (the two log-sums coincide term by term).
    """
    kv = RateVector.isotropic(env.box.d, kappa)
    rec = solve_p2p(env, kv, T, options=options)
    num, den = _tilted_log_moments(rec, T, lam)
    if den == -math.inf:
        raise ValueError("extinct realization: cumulant undefined")
    return CumulantSample(tuple(float(v) for v in lam), (num - den) / T, 0.0, T, 1)


def _cumulant_task(args):
    params, d, kappa, lam, T, radius, options, env_seed, scheme = args
    box = LatticeBox(d, radius)
    env = sample_environment(params, box, T, env_seed, scheme=scheme)
    kv = RateVector.isotropic(d, kappa)
    rec = solve_p2p(env, kv, T, options=options)
    num, den = _tilted_log_moments(rec, T, lam)
    if den == -math.inf:
        return None
    return (num - den) / T


def empirical_cumulant_ensemble(params: EnvironmentParams, d: int, kappa: float,
                                lam, T: float, n_env: int, seed: int,
                                options: SolverOptions = SolverOptions(),
                                radius: int | None = None,
                                map_fn=map) -> CumulantSample:
    """Ensemble mean of the single-realization cumulant, extinct runs excluded."""
    kv_ref = tilt(kappa, lam)  # box must stay certified for the tilted rates
    if radius is None:
        radius = certified_radius(RateVector.isotropic(d, max(kv_ref.rates)), T)
    scheme = _pick_scheme(params, d, radius, T)
    tasks = [(params, d, kappa, tuple(float(v) for v in lam), T, radius, options,
              derive_seed(seed, "env", i), scheme) for i in range(n_env)]
    raw = list(map_fn(_cumulant_task, tasks))
    vals = [v for v in raw if v is not None]
    mean, se = _mean_se(vals)
    return CumulantSample(tuple(float(v) for v in lam), mean, se, T,
                          len(vals), excluded=n_env - len(vals))


def tilting_identity_residual(env, kappa: float, lam, T: float,
                              options: SolverOptions = SolverOptions()) -> float:
    """Relative residual of the exact change-of-measure identity.

    sum_x e^<lam,x> u_kappa(T,x) must equal e^(T Lambda(lam)) Z_tilted(T) for
    every realization; the residual measures accumulated solver error only.
    """
    d = env.box.d
    kv0 = RateVector.isotropic(d, kappa)
    kvl = tilt(kappa, lam)
    rec0 = solve_p2p(env, kv0, T, options=options)
    recl = solve_p2p(env, kvl, T, options=options)
    lhs, _ = _tilted_log_moments(rec0, T, lam)
    rhs = T * cumulant(kv0, lam) + recl.log_partition(T)
    if rhs == -math.inf:
        raise ValueError("extinct tilted realization: residual undefined")
    return abs(math.expm1(lhs - rhs))


def _rate_task(args):
    params, d, kappa, x, T, radius, options, env_seed = args
    box = LatticeBox(d, radius)
    env = sample_environment(params, box, T, env_seed)
    kv = RateVector.isotropic(d, kappa)
    rec = solve_p2p(env, kv, T, options=options)
    i = rec.index_of(T)
    target = tuple(int(math.floor(T * xi)) for xi in x)
    u = float(rec.scaled_fields[i][box.index(target)])
    lz = rec.log_partition(T)
    if u <= 0.0 or lz == -math.inf:
        return None
    return (lz - (math.log(u) + rec.log_offsets[i])) / T


def quenched_rate_estimate(params: EnvironmentParams, d: int, kappa: float, x,
                           T: int, n_env: int, seed: int,
                           options: SolverOptions = SolverOptions(),
                           radius: int | None = None,
                           map_fn=map) -> RateEstimate:
    """Finite-T endpoint rate proxy (1/T)(log Z_T - log Z_{T,[Tx]}).

    T should be an integer (point-to-point values at real times sit arbitrarily
    close behind hard obstacles; recording at integer times avoids the known
    pathology). Realizations with a dead target site are excluded and counted.
    """
    if T != int(T):
        raise ValueError("rate estimates are reported at integer horizons only")
    kv = RateVector.isotropic(d, kappa)
    if radius is None:
        radius = certified_radius(kv, T)
    target = tuple(int(math.floor(T * xi)) for xi in x)
    if max(abs(c) for c in target) > radius:
        raise ValueError(f"target {target} outside certified box radius {radius}")
    tasks = [(params, d, kappa, tuple(float(v) for v in x), float(T), radius,
              options, derive_seed(seed, "env", i)) for i in range(n_env)]
    raw = list(map_fn(_rate_task, tasks))
    vals = [v for v in raw if v is not None]
    mean, se = _mean_se(vals)
    return RateEstimate(tuple(float(v) for v in x), mean,
                        rate_function_closed(kappa, x), se, float(T),
                        len(vals), excluded=n_env - len(vals))


def _multi_rate_task(args):
    """Solve the same realization under several rate vectors; (1/T) log Z each."""
    params, d, rate_tuples, T, radius, options, env_seed = args
    box = LatticeBox(d, radius)
    env = sample_environment(params, box, T, env_seed)
    vals = []
    cache = {}
    for rates in rate_tuples:
        if rates in cache:
            vals.append(cache[rates])
            continue
        rec = solve_p2p(env, RateVector(d, rates), T, options=options)
        lz = rec.log_partition(T)
        v = lz / T if lz > -math.inf else None
        cache[rates] = v
        vals.append(v)
    return vals


def _shared_environment_values(params, d, rate_vectors, T, n_env, seed, options,
                               radius, map_fn):
    """Per-environment (1/T) log Z columns for each rate vector, paired.

    Environments where any leg went extinct are dropped symmetrically.
    """
    if radius is None:
        worst = max(max(kv.rates) for kv in rate_vectors)
        radius = certified_radius(RateVector.isotropic(d, worst), T)
    rate_tuples = tuple(kv.rates for kv in rate_vectors)
    tasks = [(params, d, rate_tuples, T, radius, options,
              derive_seed(seed, "env", i)) for i in range(n_env)]
    rows = list(map_fn(_multi_rate_task, tasks))
    kept = [r for r in rows if all(v is not None for v in r)]
    cols = np.array(kept, dtype=float).T if kept else np.empty((len(rate_vectors), 0))
    return cols, n_env - len(kept), radius


def sandwich_check(params: EnvironmentParams, d: int, kappa: float, lam,
                   T: float, n_env: int, seed: int,
                   options: SolverOptions = SolverOptions(),
                   radius: int | None = None, map_fn=map) -> SandwichReport:
    """Three-leg free-energy ordering under the isotropic envelope of a tilt.

    The tilted finite-T free energy must sit between the isotropic walks at
    the under- and over-rates, within 4 standard errors of the paired
    differences. At lam = 0 the three legs are the same computation.
    """
    kb = kappa_bounds(kappa, lam)
    legs = (RateVector.isotropic(d, kb.kappa_under), tilt(kappa, lam),
            RateVector.isotropic(d, kb.kappa_over))
    cols, excluded, _ = _shared_environment_values(
        params, d, legs, T, n_env, seed, options, radius, map_fn)
    low, mid, high = cols
    d1_mean, d1_se = _mean_se(mid - low)
    d2_mean, d2_se = _mean_se(high - mid)
    summaries = tuple(
        LegSummary(label, *_mean_se(col))
        for label, col in zip(("under", "tilted", "over"), cols))
    return SandwichReport(
        kappa=kappa, lam=tuple(float(v) for v in lam), T=T,
        n_env=cols.shape[1], excluded=excluded, legs=summaries,
        diff_lower_mean=d1_mean, diff_lower_se=d1_se,
        diff_upper_mean=d2_mean, diff_upper_se=d2_se,
        ok_lower=bool(d1_mean >= -4 * d1_se - 1e-12),
        ok_upper=bool(d2_mean >= -4 * d2_se - 1e-12),
    )


def comparison_check(params: EnvironmentParams, d: int, kv1: RateVector,
                     kv2: RateVector, T: float, n_env: int, seed: int,
                     options: SolverOptions = SolverOptions(),
                     radius: int | None = None, map_fn=map) -> ComparisonReport:
    """Concave-order comparison of partition functions at added rates.

    The combined-rate walk decomposes as an independent sum containing the
    kv1 walk, so E[log Z] under kv1 + kv2 dominates E[log Z] under kv1. The
    check asserts mean(log Z_single - log Z_combined) <= 4 SE over shared
    environments.
    """
    legs = (kv1 + kv2, kv1)
    cols, excluded, _ = _shared_environment_values(
        params, d, legs, T, n_env, seed, options, radius, map_fn)
    combined, single = cols
    mc, sc = _mean_se(combined)
    ms, ss = _mean_se(single)
    diff_mean, diff_se = _mean_se(single - combined)
    return ComparisonReport(
        rates_combined=legs[0].rates, rates_single=kv1.rates, T=T,
        n_env=cols.shape[1], excluded=excluded,
        mean_combined=mc, se_combined=sc, mean_single=ms, se_single=ss,
        diff_mean=diff_mean, diff_se=diff_se,
        ok=bool(diff_mean <= 4 * diff_se + 1e-12),
    )


def _pick_scheme(params, d, radius, T) -> str:
    expected_events = params.levy.total_mass * T * (2 * radius + 1) ** d
    return "dense" if expected_events > _DENSE_EVENT_CUTOFF else "per_site"


def _disorder_task(args):
    params, d, kappa, times, radius, options, env_seed, scheme = args
    box = LatticeBox(d, radius)
    env = sample_environment(params, box, max(times), env_seed, scheme=scheme)
    kv = RateVector.isotropic(d, kappa)
    rec = solve_p2p(env, kv, max(times), options=options)
    a = annealed_alpha(params)
    return [rec.log_partition(t) - a * t for t in times]


def disorder_diagnostic(params: EnvironmentParams, d: int, kappa: float,
                        T_grid, n_env: int, seed: int,
                        options: SolverOptions | None = None,
                        radius: int | None = None, map_fn=map) -> DisorderReport:
    """Finite-T trend of the normalized partition function W_t.

    Reports the median log W_t at the requested horizons, the fitted slope of
    the median, and tail fractions. A flat trend is labeled consistent with
    weak disorder, a negative one with strong disorder. This is a finite-T
    heuristic for qualitative placement; it does not estimate any critical
    rate.
    """
    times = tuple(sorted(float(t) for t in T_grid))
    if not times or times[0] <= 0:
        raise ValueError("T_grid must contain positive times")
    kv = RateVector.isotropic(d, kappa)
    Tmax = times[-1]
    certified = True
    if radius is None:
        try:
            radius = certified_radius(kv, Tmax)
            certified = (2 * radius + 1) ** d <= _MAX_CERTIFIED_SITES
        except ValueError:
            certified = False
        if not certified:
            # practical window: ~3.5 sigma of the endpoint spread plus margin
            radius = int(math.ceil(3.5 * math.sqrt(kappa * Tmax / d))) + 4
    scheme = _pick_scheme(params, d, radius, Tmax)
    if options is None:
        heavy = scheme == "dense"
        options = SolverOptions(dt=0.25 if heavy else 0.125,
                                backend="expm" if heavy else "uniformization",
                                events="step" if heavy else "exact",
                                record=times)
    else:
        options = SolverOptions(dt=options.dt, backend=options.backend,
                                events=options.events, tail_tol=options.tail_tol,
                                record=times)
    tasks = [(params, d, kappa, times, radius, options,
              derive_seed(seed, "env", i), scheme) for i in range(n_env)]
    rows = np.array(list(map_fn(_disorder_task, tasks)), dtype=float)
    med = np.median(rows, axis=0)
    finite = np.isfinite(med)
    slope = float(np.polyfit(np.array(times)[finite], med[finite], 1)[0]) \
        if finite.sum() >= 2 else float("-inf")
    w_final = np.exp(rows[:, -1])
    fractions = {thr: float(np.mean(w_final < thr)) for thr in (0.5, 0.1, 0.01)}
    label = ("consistent with weak disorder" if slope > -0.02
             else "consistent with strong disorder")
    caveat = ("finite-horizon trend heuristic: classifies the recorded W_t "
              "trajectory only and does not estimate critical jump rates")
    return DisorderReport(
        kappa=kappa, d=d, times=times,
        median_log_W=tuple(float(v) for v in med), slope=slope,
        fraction_below=fractions, classification=label, caveat=caveat,
        n_env=n_env,
        meta={"radius": radius, "scheme": scheme, "events": options.events,
              "backend": options.backend, "dt": options.dt,
              "escape_certified": bool(certified),
              "escape_bound": escape_bound(kv, Tmax, radius)},
    )
