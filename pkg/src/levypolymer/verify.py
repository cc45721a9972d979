"""Acceptance battery: exact identities, independent oracles, trend checks.

Every check is deterministic given its built-in seeds and returns a
CheckResult with a one-line detail string. "quick" runs scaled-down sizes as
a smoke gate; "full" runs the release sizes with their wall-clock budgets
(a check that exceeds its budget fails even if the numbers are right).
"""

import math
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .deviations import comparison_check, disorder_diagnostic, sandwich_check, \
    tilting_identity_residual
from .environment import (EnvironmentParams, EnvironmentRealization, LevyMeasure,
                          alpha, parse_preset, sample_environment)
from .lattice import LatticeBox
from .montecarlo import estimate_Z
from .seeding import derive_seed, rng_for
from .solver import (SolverOptions, certified_radius, martingale_W,
                     partition_function, solve_p2p)
from .walk import (RateVector, rate_function_closed, rate_function_legendre,
                   tilt, transition_probs)


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str


def _bessel_pmf(x: int, kappa: float, t: float) -> float:
    """e^(-kappa t) I_x(kappa t) by the power series, independent of any
    uniformization or library Bessel routine."""
    z = kappa * t
    n = abs(int(x))
    total = 0.0
    k = 0
    while k <= 400:
        term = (z / 2.0) ** (2 * k + n) / (math.factorial(k) * math.factorial(k + n))
        total += term
        if k > 3 and term < 1e-22 * max(total, 1e-280):
            break
        k += 1
    return math.exp(-z) * total


def _single_event_env(params: EnvironmentParams, box: LatticeBox, T: float,
                      site, s: float, r: float) -> EnvironmentRealization:
    """Realization with exactly one jump event, for closed-form checks."""
    offsets = np.zeros(box.n_sites + 1, dtype=np.int64)
    rank = box.rank_of(site)
    offsets[rank + 1:] = 1
    return EnvironmentRealization(params, box, T, np.array([s]), np.array([r]),
                                  offsets, gaussian_seed=0)


# -- criteria -------------------------------------------------------------------


def check_rate_duality(full: bool, map_fn=map):
    n_pairs = 1000 if full else 200
    rng = rng_for(20250, "duality")
    worst = 0.0
    for i in range(n_pairs):
        d = int(rng.integers(1, 4))
        kappa = float(rng.uniform(0.1, 100.0))
        x = rng.uniform(-10.0, 10.0, size=d)
        c = rate_function_closed(kappa, x)
        l = rate_function_legendre(kappa, x)
        rel = abs(c - l) / max(abs(c), abs(l), 1e-12)
        worst = max(worst, rel)
    return worst < 1e-9, f"max relative gap {worst:.2e} over {n_pairs} pairs"


def check_bessel_kernel(full: bool, map_fn=map):
    kv = RateVector.isotropic(1, 1.0)
    box = LatticeBox(1, 30)
    probs = transition_probs(kv, 1.0, box)
    worst = max(abs(probs.value_at((x,)) - _bessel_pmf(x, 1.0, 1.0))
                for x in range(-10, 11))
    return worst < 1e-10, f"max |uniformization - series| = {worst:.2e}"


def check_convolution(full: bool, map_fn=map):
    worst = 0.0
    for d, k1, k2, R in ((1, 1.0, 2.0, 28), (2, 1.0, 0.7, 22)):
        box = LatticeBox(d, R)
        p1 = transition_probs(RateVector.isotropic(d, k1), 1.0, box).values
        p2 = transition_probs(RateVector.isotropic(d, k2), 1.0, box).values
        p12 = transition_probs(RateVector.isotropic(d, k1 + k2), 1.0, box).values
        conv = fftconvolve(p1, p2, mode="full")
        center = tuple(slice(2 * R - R, 2 * R + R + 1) for _ in range(d))
        worst = max(worst, float(np.abs(conv[center] - p12).max()))
    return worst < 1e-9, f"max |P(k1+k2) - P(k1)*P(k2)| = {worst:.2e} (d=1,2)"


def _mixed_instance(i: int):
    rng = rng_for(4040, "tilting", i)
    d = 1 if i % 5 < 3 else 2
    kappa = float(rng.uniform(0.5, 1.5))
    lam = rng.uniform(-0.5, 0.5, size=d)
    T = float(rng.choice([1.0, 2.0]))
    atoms = ((-1.0, float(rng.uniform(0.2, 0.5))),
             (float(rng.uniform(0.3, 1.0)), float(rng.uniform(0.3, 0.7))))
    params = EnvironmentParams(0.0, LevyMeasure(atoms))
    return d, kappa, lam, T, params


def check_tilting_residual(full: bool, map_fn=map):
    n_inst = 50 if full else 10
    worst = 0.0
    for i in range(n_inst):
        d, kappa, lam, T, params = _mixed_instance(i)
        kv_env = RateVector.isotropic(d, max(tilt(kappa, lam).rates))
        box = LatticeBox(d, certified_radius(kv_env, T))
        env = sample_environment(params, box, T, derive_seed(4041, i))
        res = tilting_identity_residual(env, kappa, lam, T)
        worst = max(worst, res)
    return worst < 1e-6, f"max residual {worst:.2e} over {n_inst} instances"


def check_annealed_martingale(full: bool, map_fn=map):
    n_env = 10_000 if full else 1_500
    kv = RateVector.isotropic(1, 1.0)
    box = LatticeBox(1, certified_radius(kv, 1.0))
    details = []
    ok = True
    for preset in ("gaussian(1)", "bernoulli_reward(0.3,0.5)", "hard_obstacles(1)"):
        params = parse_preset(preset)
        a = alpha(params)
        ws = np.empty(n_env)
        for i in range(n_env):
            env = sample_environment(params, box, 1.0, derive_seed(5050, preset, i))
            rec = solve_p2p(env, kv, 1.0)
            ws[i] = martingale_W(rec, a, 1.0)
        se = ws.std(ddof=1) / math.sqrt(n_env)
        dev = abs(ws.mean() - 1.0)
        ok &= dev <= 4 * se
        details.append(f"{preset}: |mean W - 1| = {dev:.4f} vs 4SE = {4 * se:.4f}")
    return ok, "; ".join(details)


def check_hard_obstacle_closed_form(full: bool, map_fn=map):
    kappa, s, T = 1.0, 0.5, 1.0
    kv = RateVector.isotropic(1, kappa)
    box = LatticeBox(1, certified_radius(kv, T))
    params = EnvironmentParams(0.0, LevyMeasure.delta(-1.0, 1.0))
    env = _single_event_env(params, box, T, (0,), s, -1.0)
    z = partition_function(solve_p2p(env, kv, T), T)
    target = 1.0 - _bessel_pmf(0, kappa, s)
    err = abs(z - target)
    return err < 1e-6, f"|Z - (1 - e^-ks I0(ks))| = {err:.2e}"


def check_comparison(full: bool, map_fn=map):
    pairs = [
        ("hard_obstacles(1)", 1.0, 1.0, 4.0, 200),
        ("bernoulli_reward(0.5,1)", 1.0, 0.5, 4.0, 200),
        ("gaussian(1)+hard_obstacles(0.5)", 1.0, 1.0, 2.0, 200),
    ]
    if not full:
        pairs = [("hard_obstacles(1)", 1.0, 1.0, 2.0, 60)]
    ok = True
    details = []
    for j, (preset, k1, k2, T, n_env) in enumerate(pairs):
        rep = comparison_check(parse_preset(preset), 1,
                               RateVector.isotropic(1, k1),
                               RateVector.isotropic(1, k2), T, n_env,
                               derive_seed(7070, j), map_fn=map_fn)
        ok &= rep.ok
        details.append(f"{preset}: E[logZ+]-E[logZ1] = {-rep.diff_mean:.3f} "
                       f"(se {rep.diff_se:.3f}, excl {rep.excluded})")
    return ok, "; ".join(details)


def check_sandwich(full: bool, map_fn=map):
    cases = [
        ("hard_obstacles(0.5)", 2, 1.5, (0.3, 0.0), 2.0, 200),
        ("bernoulli_reward(0.5,0.8)", 1, 1.0, (0.4,), 4.0, 200),
    ]
    if not full:
        cases = cases[1:]
        cases[0] = cases[0][:5] + (60,)
    ok = True
    details = []
    for j, (preset, d, kappa, lam, T, n_env) in enumerate(cases):
        rep = sandwich_check(parse_preset(preset), d, kappa, lam, T, n_env,
                             derive_seed(8080, j), map_fn=map_fn)
        ok &= rep.ok
        details.append(
            f"{preset} d={d}: under {rep.legs[0].mean:.3f} <= tilted "
            f"{rep.legs[1].mean:.3f} <= over {rep.legs[2].mean:.3f} (ok={rep.ok})")
    # exact degeneracy at lambda = 0
    rep0 = sandwich_check(parse_preset("hard_obstacles(1)"), 1, 1.0, (0.0,), 2.0,
                          6, derive_seed(8080, "zero"), map_fn=map_fn)
    exact0 = rep0.diff_lower_mean == 0.0 and rep0.diff_upper_mean == 0.0
    ok &= exact0
    details.append(f"lambda=0 legs exactly equal: {exact0}")
    return ok, "; ".join(details)


def _route_instance(i: int):
    rng = rng_for(9090, "route", i)
    if i < 70:
        d, sigma2, n_paths, dt = 1, 0.0, 1500, 0.125
        T = float(rng.choice([1.0, 2.0, 3.0, 4.0]))
        kappa = float(rng.uniform(0.5, 2.0))
    elif i < 85:
        d, sigma2, n_paths, dt = 1, float(rng.uniform(0.25, 1.0)), 400, 1.0 / 32
        T = float(rng.choice([1.0, 2.0]))
        kappa = float(rng.uniform(0.5, 1.5))
    else:
        d, sigma2, n_paths, dt = 2, 0.0, 800, 0.125
        T = float(rng.choice([1.0, 2.0]))
        kappa = float(rng.uniform(0.5, 1.0))
    atoms = []
    if rng.random() < 0.8:
        atoms.append((-1.0, float(rng.uniform(0.3, 1.0))))
    if rng.random() < 0.8 or not atoms:
        atoms.append((float(rng.uniform(0.3, 1.0)), float(rng.uniform(0.3, 1.0))))
    params = EnvironmentParams(sigma2, LevyMeasure(tuple(atoms)))
    return d, kappa, T, params, n_paths, dt


def check_route_agreement(full: bool, map_fn=map):
    n_inst = 100 if full else 20
    n_pass = 0
    worst = 0.0
    for i in range(n_inst):
        d, kappa, T, params, n_paths, dt = _route_instance(i)
        kv = RateVector.isotropic(d, kappa)
        box = LatticeBox(d, min(certified_radius(kv, T), 30))
        env = sample_environment(params, box, T, derive_seed(9091, i))
        rec = solve_p2p(env, kv, T, options=SolverOptions(dt=dt))
        z = partition_function(rec, T)
        est = estimate_Z(env, kv, T, n_paths, derive_seed(9092, i))
        solver_tol = 1e-8 + (0.5 * dt * z if params.sigma2 > 0 else 0.0)
        gap = abs(est.value - z)
        allowed = 4.0 * est.std_error + solver_tol
        n_pass += gap <= allowed
        worst = max(worst, gap / allowed if allowed > 0 else 0.0)
    need = 95 if full else 18
    return n_pass >= need, f"{n_pass}/{n_inst} within 4 SE + solver tol (worst ratio {worst:.2f})"


def check_disorder_trend(full: bool, map_fn=map):
    # the median trend needs the full horizon span; only the ensemble size
    # shrinks at quick level
    n_env = 100 if full else 12
    grid = (2.0, 4.0, 8.0)
    params = parse_preset("hard_obstacles(1)")
    slow = disorder_diagnostic(params, 3, 0.5, grid, n_env,
                               derive_seed(1010, "slow"), map_fn=map_fn)
    fast = disorder_diagnostic(params, 3, 40.0, grid, n_env,
                               derive_seed(1010, "fast"), map_fn=map_fn)
    ok = fast.slope > slow.slope
    return ok, (f"median log W slope: kappa=40 {fast.slope:.4f} > "
                f"kappa=0.5 {slow.slope:.4f} = {ok}")


def check_cli_determinism(full: bool, map_fn=map):
    args = ["ensemble", "--kind", "comparison", "--preset", "hard_obstacles(1)",
            "--dim", "1", "--kappa", "1", "--kappa2", "1", "--T", "2",
            "--n-env", "24", "--seed", "5"]
    digests = []
    with tempfile.TemporaryDirectory() as tmp:
        for threads in ("1", "3"):
            out = Path(tmp) / f"run{threads}"
            cmd = [sys.executable, "-m", "levypolymer"] + args + \
                ["--threads", threads, "--out", str(out)]
            proc = subprocess.run(cmd, capture_output=True, text=True,
                                  env=dict(os.environ))
            if proc.returncode != 0:
                return False, f"cli exited {proc.returncode}: {proc.stderr[-200:]}"
            digests.append((out / "comparison.csv").read_bytes())
    same = digests[0] == digests[1]
    return same, f"CSV bytes identical across --threads 1 vs 3: {same}"


CRITERIA = (
    ("criterion_01_rate_duality", check_rate_duality, 10.0),
    ("criterion_02_bessel_kernel", check_bessel_kernel, 1.0),
    ("criterion_03_convolution", check_convolution, 10.0),
    ("criterion_04_tilting_residual", check_tilting_residual, 120.0),
    ("criterion_05_annealed_martingale", check_annealed_martingale, 300.0),
    ("criterion_06_hard_obstacle_closed_form", check_hard_obstacle_closed_form, 10.0),
    ("criterion_07_comparison_theorem", check_comparison, 600.0),
    ("criterion_08_sandwich_inequality", check_sandwich, 600.0),
    ("criterion_09_route_agreement", check_route_agreement, 600.0),
    ("criterion_10_disorder_trend", check_disorder_trend, 1800.0),
    ("criterion_11_cli_determinism", check_cli_determinism, 300.0),
)


def run_criterion(name: str, full: bool = True, map_fn=map) -> CheckResult:
    for cname, fn, budget in CRITERIA:
        if cname == name:
            t0 = time.time()
            passed, detail = fn(full, map_fn)
            dt = time.time() - t0
            if full and dt >= budget:
                passed = False
                detail += f" [budget exceeded: {dt:.0f}s >= {budget:.0f}s]"
            return CheckResult(name, bool(passed), dt, detail)
    raise KeyError(f"unknown check {name!r}")


def run(level: str = "quick", threads: int = 1) -> list:
    if level not in ("quick", "full"):
        raise ValueError("level must be quick or full")
    full = level == "full"
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        ex = ProcessPoolExecutor(max_workers=threads)
        map_fn = lambda fn, it: list(ex.map(fn, list(it), chunksize=4))
    else:
        ex = None
        map_fn = map
    try:
        return [run_criterion(name, full, map_fn) for name, _, _ in CRITERIA]
    finally:
        if ex is not None:
            ex.shutdown()
