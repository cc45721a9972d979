"""Path-sampling Monte Carlo estimators, independent of the lattice solver.

Quenched estimates average the exponential path weight over walks sampled in
a fixed environment; annealed checks then average fresh environments. These
estimators share the environment's Gaussian path with the solver (same seed
material), which makes paired route-agreement tests meaningful.
"""

import math
from dataclasses import dataclass

import numpy as np

from .environment import (EnvironmentParams, EnvironmentRealization,
                          log_weight_factor, sample_environment)
from .lattice import LatticeBox
from .seeding import derive_seed, rng_for
from .solver import SolverOptions, certified_radius, solve_p2p
from .walk import PolymerPath, RateVector, sample_path


class EnvironmentWindowError(RuntimeError):
    """A sampled path left the environment's site window; enlarge the box."""


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo value with standard error and sample count.

    log_domain marks values that estimate a log-quantity through a stable
    aggregation (so the error propagation was done on the log scale).
    degenerate flags a standard error that could not be estimated (for
    example, every sampled weight was zero).
    """

    value: float
    std_error: float
    n: int
    log_domain: bool = False
    degenerate: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one sample")
        if not self.degenerate and self.std_error < 0:
            raise ValueError("std_error must be nonnegative")


@dataclass(frozen=True)
class FreeEnergyPoint:
    """One horizon entry of a finite-T free-energy scan."""

    T: float
    estimate: Estimate
    route: str
    extinct_fraction: float


def hamiltonian(env: EnvironmentRealization, path: PolymerPath, T: float,
                start: float = 0.0) -> float:
    """Accumulated log weight of a path over (start, T].

    Sums the log potential increments over the path's constancy intervals;
    -inf iff the path sits on a hard obstacle at its event time. Additive
    under splitting of the time interval: the value over (0, T] equals the
    value over (0, s] plus the value over (s, T] for the same path.
    """
    if path.horizon < T:
        raise ValueError(f"path horizon {path.horizon} shorter than T={T}")
    if not 0.0 <= start <= T:
        raise ValueError("need 0 <= start <= T")
    total = 0.0
    for t0, t1, site in path.segments(T):
        if t1 <= start:
            continue
        if not env.box.contains(site):
            raise EnvironmentWindowError(
                f"path reached {site}, outside the environment window of radius "
                f"{env.box.radius}; sample the environment on a larger box")
        w = log_weight_factor(env, site, (max(t0, start), t1))
        if w == -math.inf:
            return -math.inf
        total += w
    return total


def estimate_Z(env: EnvironmentRealization, kv, T: float, n_paths: int,
               seed: int) -> Estimate:
    """Sample mean of exp(H) over independent walk paths, environment fixed.

    Paths killed by hard obstacles contribute 0. Deterministic given the
    seed; path k uses the stream derived from (seed, "path", k).
    """
    if n_paths < 2:
        raise ValueError("need n_paths >= 2 for a standard error")
    if isinstance(kv, (int, float)):
        kv = RateVector.isotropic(env.box.d, float(kv))
    weights = np.empty(n_paths)
    for k in range(n_paths):
        path = sample_path(kv, T, rng_for(seed, "path", k))
        h = hamiltonian(env, path, T)
        weights[k] = math.exp(h) if h > -math.inf else 0.0
    value = float(weights.mean())
    if np.all(weights == 0.0):
        return Estimate(0.0, 0.0, n_paths, degenerate=True)
    se = float(weights.std(ddof=1) / math.sqrt(n_paths))
    return Estimate(value, se, n_paths)


def _check_annealed_variance(params: EnvironmentParams, T: float,
                             cv2_cap: float = 1e4) -> None:
    # predicted squared coefficient of variation of exp(L_0(T)):
    # exp(T * (sigma2 + sum(nu r^2))) - 1 must be manageable
    second = sum(nu * r * r for r, nu in params.levy.atoms)
    growth = T * (params.sigma2 + second)
    if growth > math.log1p(cv2_cap):
        raise ValueError(
            "annealed estimate infeasible: predicted relative variance "
            f"exp({growth:.3g}) - 1 exceeds the cap {cv2_cap:.0e}; shrink the "
            "marks, sigma2, or the horizon")


def annealed_check(params: EnvironmentParams, kappa: float, T: float,
                   n_env: int, n_paths: int, seed: int, d: int = 1) -> Estimate:
    """Estimate (1/T) log(mean over environments of Z_T), to compare to alpha.

    Standard error by the delta method on the environment-level Z samples.
    """
    _check_annealed_variance(params, T)
    kv = RateVector.isotropic(d, kappa)
    radius = certified_radius(kv, T)
    box = LatticeBox(d, radius)
    zs = np.empty(n_env)
    for i in range(n_env):
        env_seed = derive_seed(seed, "env", i)
        env = sample_environment(params, box, T, env_seed)
        zs[i] = estimate_Z(env, kv, T, n_paths, derive_seed(seed, "paths", i)).value
    mean = float(zs.mean())
    if mean <= 0:
        return Estimate(float("-inf"), 0.0, n_env, log_domain=True, degenerate=True)
    se_mean = float(zs.std(ddof=1) / math.sqrt(n_env))
    return Estimate(math.log(mean) / T, se_mean / (mean * T), n_env, log_domain=True)


def free_energy_mc(params: EnvironmentParams, kappa: float, T_list, n_env: int,
                   seed: int, d: int = 1, route: str = "solver",
                   n_paths: int = 1000,
                   options: SolverOptions = SolverOptions()) -> list:
    """Finite-T free energy proxies: mean over environments of (1/T) log Z_T.

    route "solver" integrates each realization on a certified box; route "mc"
    uses estimate_Z. Environments are independent across T entries. Samples
    with Z = 0 (extinction under hard obstacles) are excluded from the mean
    and reported through extinct_fraction; the value is then a conditional
    mean over surviving realizations.
    """
    T_list = list(T_list)
    if any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise ValueError("T_list must be increasing")
    kv = RateVector.isotropic(d, kappa)
    out = []
    for j, T in enumerate(T_list):
        radius = certified_radius(kv, T)
        box = LatticeBox(d, radius)
        vals = []
        extinct = 0
        for i in range(n_env):
            env_seed = derive_seed(seed, "T", j, "env", i)
            env = sample_environment(params, box, T, env_seed)
            if route == "solver":
                rec = solve_p2p(env, kv, T, options=options)
                lz = rec.log_partition(T)
            elif route == "mc":
                est = estimate_Z(env, kv, T, n_paths, derive_seed(seed, "T", j, "p", i))
                lz = math.log(est.value) if est.value > 0 else float("-inf")
            else:
                raise ValueError(f"unknown route {route!r}")
            if lz == -math.inf:
                extinct += 1
            else:
                vals.append(lz / T)
        if vals:
            arr = np.array(vals)
            se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
            est = Estimate(float(arr.mean()), se, len(arr), log_domain=True)
        else:
            est = Estimate(float("-inf"), 0.0, n_env, log_domain=True, degenerate=True)
        out.append(FreeEnergyPoint(float(T), est, route, extinct / n_env))
    return out
