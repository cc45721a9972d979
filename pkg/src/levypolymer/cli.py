"""Reproducible experiment runner.

Subcommands: rate-table, solve, env-sample, ensemble, verify. Every run
writes deterministic CSV tables plus a JSON manifest (config echo, derived
quantities, wall clock, output checksums). Identical config and seed give
byte-identical CSVs regardless of --threads: per-sample seeds are derived
from the master seed by index and aggregation is order-independent.

Exit codes: 0 ok, 1 check or run failure, 2 invalid configuration.
"""

import argparse
import configparser
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .deviations import (comparison_check, disorder_diagnostic,
                         empirical_cumulant_ensemble, quenched_rate_estimate,
                         sandwich_check)
from .environment import alpha, environment_to_json, parse_preset, sample_environment
from .lattice import LatticeBox
from .montecarlo import annealed_check, free_energy_mc
from .solver import (SolverOptions, certified_radius, martingale_W,
                     partition_function, solve_p2p)
from .walk import (RateVector, cumulant, rate_function_closed,
                   rate_function_legendre)

ENV_THREADS = "LEVYPOLYMER_THREADS"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    kind: str = "free-energy"
    preset: str = "empty()"
    d: int = 1
    kappa: float = 1.0
    kappa2: float | None = None
    lam: tuple = ()
    x: tuple = ()
    T: tuple = (1.0,)
    radius: int | None = None  # None = auto via the certified escape bound
    n_env: int = 100
    n_paths: int = 1000
    seed: int = 0
    threads: int | None = None  # None = LEVYPOLYMER_THREADS, else 1
    out: str = "out"
    dt: float = 0.125
    events: str = "exact"
    backend: str = "uniformization"
    tail_tol: float = 1e-12
    route: str = "solver"
    x_min: float = -2.0
    x_max: float = 2.0
    x_steps: int = 21
    level: str = "quick"
    dump_fields: bool = False
    dump_env: bool = False
    allow_uncertified_box: bool = False

    def params(self):
        return parse_preset(self.preset)

    def solver_options(self, record=None):
        return SolverOptions(dt=self.dt, backend=self.backend, events=self.events,
                             tail_tol=self.tail_tol,
                             record=tuple(record) if record is not None else None)

    def validate(self):
        if self.kappa <= 0 or (self.kappa2 is not None and self.kappa2 <= 0):
            raise ConfigError("jump rates must be strictly positive")
        if not self.T or any(t <= 0 for t in self.T):
            raise ConfigError("horizons must be strictly positive")
        if self.d < 1:
            raise ConfigError("dimension must be >= 1")
        if self.n_env < 1 or self.n_paths < 2:
            raise ConfigError("need n_env >= 1 and n_paths >= 2")
        if self.dt <= 0 or self.tail_tol <= 0:
            raise ConfigError("dt and tail_tol must be positive")
        try:
            self.params()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.radius is not None and not self.allow_uncertified_box:
            kv = RateVector.isotropic(self.d, self._max_rate())
            need = certified_radius(kv, max(self.T), self.tail_tol, max_radius=10**6)
            if self.radius < need:
                raise ConfigError(
                    f"radius {self.radius} is below the certified radius {need} "
                    "for these rates; pass --allow-uncertified-box to override")

    def _max_rate(self):
        k = self.kappa + (self.kappa2 or 0.0)
        if self.lam:
            k *= math.exp(sum(abs(v) for v in self.lam))
        return k

    def box_radius(self, kv: RateVector, T: float) -> int:
        if self.radius is not None:
            return self.radius
        return certified_radius(kv, T, self.tail_tol, max_radius=10**6)


# -- plumbing -----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_manifest(outdir: Path, cfg: RunConfig, derived: dict, t0: float) -> None:
    outputs = {}
    for p in sorted(outdir.iterdir()):
        if p.name != "manifest.json" and p.is_file():
            outputs[p.name] = _sha256(p)
    doc = {
        "config": _jsonable(vars(cfg)),
        "version": __version__,
        "derived": _jsonable(derived),
        "wall_clock_s": round(time.time() - t0, 3),
        "outputs": outputs,
    }
    (outdir / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


class _Pool:
    """map() over tasks; a process pool when threads > 1, else builtin map."""

    def __init__(self, threads: int):
        self.threads = threads
        self._ex = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None

    def map(self, fn, tasks):
        tasks = list(tasks)
        if self._ex is None:
            return [fn(t) for t in tasks]
        chunk = max(1, len(tasks) // (4 * self.threads))
        return list(self._ex.map(fn, tasks, chunksize=chunk))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()


# -- subcommands ---------------------------------------------------------------


def _symmetric_grid(lo: float, hi: float, steps: int) -> np.ndarray:
    # for a symmetric request, build the grid as exact mirror pairs so the
    # table is bitwise symmetric under x -> -x
    if lo == -hi and steps % 2 == 1 and steps >= 3:
        half = np.linspace(0.0, hi, (steps + 1) // 2)
        return np.concatenate([-half[:0:-1], half])
    return np.linspace(lo, hi, steps)


def cmd_rate_table(cfg: RunConfig, outdir: Path) -> dict:
    grid = _symmetric_grid(cfg.x_min, cfg.x_max, cfg.x_steps)
    axes = np.meshgrid(*([grid] * cfg.d), indexing="ij")
    points = np.stack([a.ravel() for a in axes], axis=1)
    rows = []
    for x in points:
        ic = rate_function_closed(cfg.kappa, x)
        il = rate_function_legendre(cfg.kappa, x)
        rows.append([cfg.kappa, *[float(v) for v in x], ic, il, abs(ic - il)])
    header = ["kappa"] + [f"x_{i + 1}" for i in range(cfg.d)] + \
        ["I_closed", "I_legendre", "abs_diff"]
    write_csv(outdir / "rate_table.csv", header, rows)
    return {"max_abs_diff": max(r[-1] for r in rows), "rows": len(rows)}


def cmd_solve(cfg: RunConfig, outdir: Path) -> dict:
    T = max(cfg.T)
    params = cfg.params()
    kv = RateVector.isotropic(cfg.d, cfg.kappa)
    radius = cfg.box_radius(kv, T)
    box = LatticeBox(cfg.d, radius)
    env = sample_environment(params, box, T, cfg.seed)
    rec = solve_p2p(env, kv, T, options=cfg.solver_options(record=cfg.T))
    a = alpha(params)
    rows = [[t, partition_function(rec, t), martingale_W(rec, a, t)]
            for t in rec.times]
    write_csv(outdir / "solve.csv", ["t", "Z", "W"], rows)
    if cfg.dump_env:
        (outdir / "environment.json").write_text(environment_to_json(env))
    if cfg.dump_fields:
        sites = box.site_array()
        for t in rec.times:
            u = rec.field_at(t).values.ravel()
            write_csv(outdir / f"field_t{t}.csv",
                      [f"x_{i + 1}" for i in range(cfg.d)] + ["u"],
                      [[*map(int, s), v] for s, v in zip(sites, u)])
    return {"alpha": a, "radius": radius, "escape_bound": rec.meta["escape_bound"],
            "n_events": rec.meta["n_events"], "log_Z_final": rec.log_partition(T)}


def cmd_env_sample(cfg: RunConfig, outdir: Path) -> dict:
    T = max(cfg.T)
    kv = RateVector.isotropic(cfg.d, cfg.kappa)
    radius = cfg.box_radius(kv, T)
    env = sample_environment(cfg.params(), LatticeBox(cfg.d, radius), T, cfg.seed)
    (outdir / "environment.json").write_text(environment_to_json(env))
    return {"radius": radius, "n_events": env.n_events}


def cmd_ensemble(cfg: RunConfig, outdir: Path) -> dict:
    params = cfg.params()
    pool = _Pool(cfg.threads)
    derived: dict = {"alpha": alpha(params)}
    opts = cfg.solver_options()
    try:
        if cfg.kind == "free-energy":
            points = free_energy_mc(params, cfg.kappa, cfg.T, cfg.n_env, cfg.seed,
                                    d=cfg.d, route=cfg.route, n_paths=cfg.n_paths,
                                    options=opts)
            rows = [[p.T, p.estimate.value, p.estimate.std_error, p.estimate.n,
                     p.route, p.extinct_fraction] for p in points]
            write_csv(outdir / "free_energy.csv",
                      ["T", "estimate", "std_error", "n", "route", "extinct_fraction"],
                      rows)
            derived["values"] = [p.estimate.value for p in points]
        elif cfg.kind == "annealed":
            T = max(cfg.T)
            est = annealed_check(params, cfg.kappa, T, cfg.n_env, cfg.n_paths,
                                 cfg.seed, d=cfg.d)
            write_csv(outdir / "annealed.csv",
                      ["T", "estimate", "std_error", "n", "alpha"],
                      [[T, est.value, est.std_error, est.n, derived["alpha"]]])
            derived["estimate"] = est.value
        elif cfg.kind == "cumulant":
            T = max(cfg.T)
            lam = cfg.lam or (0.0,) * cfg.d
            cs = empirical_cumulant_ensemble(params, cfg.d, cfg.kappa, lam, T,
                                             cfg.n_env, cfg.seed, options=opts,
                                             radius=cfg.radius, map_fn=pool.map)
            walk_val = cumulant(RateVector.isotropic(cfg.d, cfg.kappa), lam)
            write_csv(outdir / "cumulant.csv",
                      [f"lam_{i + 1}" for i in range(cfg.d)]
                      + ["lambda_hat", "std_error", "T", "n_env", "excluded",
                         "cumulant_walk"],
                      [[*cs.lam, cs.lambda_hat, cs.std_error, cs.T, cs.n_env,
                        cs.excluded, walk_val]])
            derived["lambda_hat"] = cs.lambda_hat
        elif cfg.kind == "rate":
            x = cfg.x or (0.0,) * cfg.d
            rows = []
            by_T = {}
            for T in cfg.T:
                r = quenched_rate_estimate(params, cfg.d, cfg.kappa, x, int(T),
                                           cfg.n_env, cfg.seed, options=opts,
                                           radius=cfg.radius, map_fn=pool.map)
                by_T[T] = r.J_hat
                # Richardson-style doubling extrapolation, heuristic only
                extrap = (2 * r.J_hat - by_T[T / 2]) if T / 2 in by_T else ""
                rows.append([*r.x, r.T, r.J_hat, r.std_error, r.I_value,
                             r.n_env, r.excluded, extrap])
            write_csv(outdir / "rate_estimate.csv",
                      [f"x_{i + 1}" for i in range(cfg.d)]
                      + ["T", "J_hat", "std_error", "I_value", "n_env", "excluded",
                         "J_extrapolated_heuristic"],
                      rows)
        elif cfg.kind == "sandwich":
            T = max(cfg.T)
            lam = cfg.lam or (0.0,) * cfg.d
            rep = sandwich_check(params, cfg.d, cfg.kappa, lam, T, cfg.n_env,
                                 cfg.seed, options=opts, radius=cfg.radius,
                                 map_fn=pool.map)
            (outdir / "sandwich_report.json").write_text(json.dumps(
                _jsonable(vars(rep) | {"legs": [vars(l) for l in rep.legs],
                                       "ok": rep.ok, "seed": cfg.seed}),
                indent=1, sort_keys=True))
            legs = {f"{l.label}_{k}": v for l in rep.legs
                    for k, v in (("mean", l.mean), ("se", l.std_error))}
            write_csv(outdir / "sandwich.csv",
                      ["kappa"] + [f"lam_{i + 1}" for i in range(cfg.d)]
                      + ["T", "n_env", "excluded", *legs.keys(),
                         "diff_lower", "diff_lower_se", "diff_upper",
                         "diff_upper_se", "ok"],
                      [[rep.kappa, *rep.lam, rep.T, rep.n_env, rep.excluded,
                        *legs.values(), rep.diff_lower_mean, rep.diff_lower_se,
                        rep.diff_upper_mean, rep.diff_upper_se, rep.ok]])
            derived["ok"] = rep.ok
            if not rep.ok:
                raise RuntimeError("sandwich ordering violated beyond 4 SE")
        elif cfg.kind == "comparison":
            T = max(cfg.T)
            kv1 = RateVector.isotropic(cfg.d, cfg.kappa)
            kv2 = RateVector.isotropic(cfg.d, cfg.kappa2 or cfg.kappa)
            rep = comparison_check(params, cfg.d, kv1, kv2, T, cfg.n_env, cfg.seed,
                                   options=opts, radius=cfg.radius, map_fn=pool.map)
            (outdir / "comparison_report.json").write_text(json.dumps(
                _jsonable(vars(rep) | {"seed": cfg.seed}), indent=1, sort_keys=True))
            write_csv(outdir / "comparison.csv",
                      ["T", "n_env", "excluded", "mean_combined", "se_combined",
                       "mean_single", "se_single", "diff_mean", "diff_se", "ok"],
                      [[rep.T, rep.n_env, rep.excluded, rep.mean_combined,
                        rep.se_combined, rep.mean_single, rep.se_single,
                        rep.diff_mean, rep.diff_se, rep.ok]])
            derived["ok"] = rep.ok
            if not rep.ok:
                raise RuntimeError("comparison inequality violated beyond 4 SE")
        elif cfg.kind == "disorder":
            rep = disorder_diagnostic(params, cfg.d, cfg.kappa, cfg.T, cfg.n_env,
                                      cfg.seed, radius=cfg.radius, map_fn=pool.map)
            write_csv(outdir / "disorder.csv",
                      ["kappa", "t", "median_log_W"],
                      [[rep.kappa, t, v] for t, v in zip(rep.times, rep.median_log_W)])
            (outdir / "disorder_report.json").write_text(json.dumps(
                _jsonable(vars(rep) | {"fraction_below": rep.fraction_below}),
                indent=1, sort_keys=True))
            derived["slope"] = rep.slope
            derived["classification"] = rep.classification
        else:
            raise ConfigError(f"unknown ensemble kind {cfg.kind!r}")
    finally:
        pool.close()
    return derived


def cmd_verify(cfg: RunConfig, outdir: Path) -> dict:
    from . import verify as verify_mod

    results = verify_mod.run(cfg.level, threads=cfg.threads)
    rows = []
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.seconds:.1f}s) {r.detail}")
        rows.append([r.name, r.passed, round(r.seconds, 2), r.detail])
    write_csv(outdir / "verify.csv", ["check", "passed", "seconds", "detail"], rows)
    (outdir / "verify.json").write_text(json.dumps(
        {r.name: {"passed": r.passed, "seconds": round(r.seconds, 3),
                  "detail": r.detail} for r in results}, indent=1, sort_keys=True))
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    if n_fail:
        raise RuntimeError(f"{n_fail} verification check(s) failed")
    return {"checks": len(results)}


# -- argument handling ----------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="levypolymer", description=__doc__)
    sub = top.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (flags override it)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out")
    common.add_argument("--preset", help='e.g. "hard_obstacles(1)" or "gaussian(1)+bernoulli_reward(0.3,0.5)"')
    common.add_argument("--dim", type=int, dest="d")
    common.add_argument("--kappa", type=float)
    common.add_argument("--kappa2", type=float)
    common.add_argument("--lambda", type=float, nargs="+", dest="lam")
    common.add_argument("--x", type=float, nargs="+")
    common.add_argument("--T", type=float, nargs="+")
    common.add_argument("--radius", help='box radius or "auto"')
    common.add_argument("--n-env", type=int, dest="n_env")
    common.add_argument("--n-paths", type=int, dest="n_paths")
    common.add_argument("--dt", type=float)
    common.add_argument("--events", choices=["exact", "step"])
    common.add_argument("--backend", choices=["uniformization", "expm"])
    common.add_argument("--tail-tol", type=float, dest="tail_tol")
    common.add_argument("--route", choices=["solver", "mc"])
    common.add_argument("--allow-uncertified-box", action="store_true", default=None)
    sub.add_parser("rate-table", parents=[common]).add_argument(
        "--x-grid", nargs=3, type=float, metavar=("MIN", "MAX", "STEPS"))
    solve_p = sub.add_parser("solve", parents=[common])
    solve_p.add_argument("--dump-fields", action="store_true", default=None)
    solve_p.add_argument("--dump-env", action="store_true", default=None)
    sub.add_parser("env-sample", parents=[common])
    sub.add_parser("ensemble", parents=[common]).add_argument(
        "--kind", choices=["free-energy", "annealed", "cumulant", "rate",
                           "sandwich", "comparison", "disorder"])
    sub.add_parser("verify", parents=[common]).add_argument(
        "--level", choices=["quick", "full"])
    return top


def _load_config_file(path: str) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    merged = {}
    for section in cp.sections():
        merged.update(dict(cp.items(section)))
    return merged


_TUPLE_KEYS = {"t": "T", "lam": "lam", "lambda": "lam", "x": "x"}
_INT_KEYS = {"d", "dim", "n_env", "n_paths", "seed", "threads", "x_steps"}
_FLOAT_KEYS = {"kappa", "kappa2", "dt", "tail_tol", "x_min", "x_max"}
_BOOL_KEYS = {"dump_fields", "dump_env", "allow_uncertified_box"}


def _coerce_file_value(key: str, raw: str):
    key_l = key.lower()
    if key_l in _TUPLE_KEYS:
        return tuple(float(v) for v in raw.replace(",", " ").split())
    if key_l in _INT_KEYS:
        return int(raw)
    if key_l in _FLOAT_KEYS:
        return float(raw)
    if key_l in _BOOL_KEYS:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if key_l == "radius":
        return None if raw.strip() == "auto" else int(raw)
    return raw


def build_config(argv) -> RunConfig:
    args = vars(_build_parser().parse_args(argv))
    command = args.pop("command")
    cfg = RunConfig(command=command)
    if args.get("config"):
        for key, raw in _load_config_file(args["config"]).items():
            key_n = {"dim": "d", "t": "T", "lambda": "lam"}.get(key.lower(), key.lower())
            if not hasattr(cfg, key_n):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key_n, _coerce_file_value(key, raw))
    args.pop("config", None)
    if args.get("x_grid") is not None:
        cfg.x_min, cfg.x_max, cfg.x_steps = (args["x_grid"][0], args["x_grid"][1],
                                             int(args["x_grid"][2]))
    args.pop("x_grid", None)
    if args.get("radius") is not None:
        cfg.radius = None if args["radius"] == "auto" else int(args["radius"])
    args.pop("radius", None)
    for key, val in args.items():
        if val is not None:
            if key in ("T", "lam", "x"):
                val = tuple(val)
            setattr(cfg, key, val)
    if cfg.threads is None:
        cfg.threads = int(os.environ.get(ENV_THREADS, "1"))
    cfg.threads = max(1, cfg.threads)
    cfg.validate()
    return cfg


_DISPATCH = {
    "rate-table": cmd_rate_table,
    "solve": cmd_solve,
    "env-sample": cmd_env_sample,
    "ensemble": cmd_ensemble,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    t0 = time.time()
    try:
        cfg = build_config(argv)
    except ConfigError as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0) and 2
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        derived = _DISPATCH[cfg.command](cfg, outdir)
    except (RuntimeError, ValueError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return 1
    write_manifest(outdir, cfg, derived, t0)
    return 0


def entrypoint() -> None:
    sys.exit(main())
