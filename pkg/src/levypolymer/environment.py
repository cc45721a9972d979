"""I.i.d. Levy environment on a lattice box and its log-transformed potential.

Each site x carries an independent Levy process with characteristic triple
(0, sigma2, rho), rho a finite atomic jump measure on [-1, inf). The solver
and the path estimators consume the log-transform: a Gaussian part with
variance sigma2 per unit time plus log(1 + r) per jump event, where a mark
r = -1 is an absorbing hard obstacle (log 0 = -inf).

The Gaussian part is realized as a deterministic function of the seed via
dyadic Brownian-bridge refinement, so increments over any two overlapping
grids are consistent: the increment over [a, b] equals the sum of the
increments over any partition of [a, b], per seed, exactly by construction.
"""

import json
import math
import re
from dataclasses import dataclass

import numpy as np

from .lattice import LatticeBox
from .seeding import derive_seed, rng_for


@dataclass(frozen=True)
class LevyMeasure:
    """Finite atomic jump measure: atoms are (mark r, mass nu per unit time)."""

    atoms: tuple

    def __post_init__(self):
        atoms = tuple((float(r), float(nu)) for r, nu in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        for r, nu in atoms:
            if r < -1.0:
                raise ValueError(f"mark {r} below -1: measure must live on [-1, inf)")
            if not (nu > 0 and math.isfinite(nu)):
                raise ValueError("atom masses must be positive and finite")
        if not math.isfinite(self.total_mass):
            raise ValueError("total mass must be finite")
        if not math.isfinite(self.mean_mark_rate):
            raise ValueError("first moment must be finite")

    @classmethod
    def empty(cls) -> "LevyMeasure":
        return cls(())

    @classmethod
    def delta(cls, r: float, nu: float) -> "LevyMeasure":
        return cls(((r, nu),))

    @property
    def total_mass(self) -> float:
        return sum(nu for _, nu in self.atoms)

    @property
    def mean_mark_rate(self) -> float:
        """integral of r against the measure, sum(nu * r)."""
        return sum(nu * r for r, nu in self.atoms)

    @property
    def has_hard_obstacles(self) -> bool:
        return any(r == -1.0 for r, _ in self.atoms)

    @property
    def is_pure_hard_obstacle(self) -> bool:
        return len(self.atoms) > 0 and all(r == -1.0 for r, _ in self.atoms)

    def merged(self, other: "LevyMeasure") -> "LevyMeasure":
        return LevyMeasure(self.atoms + other.atoms)


@dataclass(frozen=True)
class EnvironmentParams:
    """Per-site noise law: Gaussian variance sigma2 per unit time plus jumps."""

    sigma2: float
    levy: LevyMeasure

    def __post_init__(self):
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if self.sigma2 < 0 or not math.isfinite(self.sigma2):
            raise ValueError("sigma2 must be >= 0 and finite")

    @classmethod
    def empty(cls) -> "EnvironmentParams":
        return cls(0.0, LevyMeasure.empty())


def alpha(params: EnvironmentParams) -> float:
    """Annealed exponent: sigma2/2 + sum(nu * r). E[Z_t] = exp(alpha * t)."""
    return 0.5 * params.sigma2 + params.levy.mean_mark_rate


_PRESET_RE = re.compile(r"^\s*([a-z_]+)\s*\(([^)]*)\)\s*$")


def parse_preset(spec: str) -> EnvironmentParams:
    """Build EnvironmentParams from a preset expression.

    Supported: "hard_obstacles(nu)", "bernoulli_reward(r,nu)", "gaussian(sigma2)",
    "empty()", and "+"-combinations such as "gaussian(1)+hard_obstacles(0.5)".
    """
    sigma2 = 0.0
    atoms = []
    for part in spec.split("+"):
        m = _PRESET_RE.match(part)
        if not m:
            raise ValueError(f"cannot parse environment preset {part!r}")
        name, argstr = m.group(1), m.group(2)
        args = [float(a) for a in argstr.split(",")] if argstr.strip() else []
        if name == "hard_obstacles":
            (nu,) = args
            atoms.append((-1.0, nu))
        elif name == "bernoulli_reward":
            r, nu = args
            atoms.append((r, nu))
        elif name == "gaussian":
            (s2,) = args
            sigma2 += s2
        elif name == "empty":
            if args:
                raise ValueError("empty() takes no arguments")
        else:
            raise ValueError(f"unknown environment preset {name!r}")
    return EnvironmentParams(sigma2, LevyMeasure(tuple(atoms)))


def _bridge_top(T: float) -> float:
    """Smallest power of two >= T, the root interval of the dyadic bridge."""
    return float(2.0 ** math.ceil(math.log2(T))) if T > 1.0 else 1.0


class EnvironmentRealization:
    """One sampled environment over a box and a time horizon.

    Immutable after construction (the Brownian value cache only memoizes a
    pure function of the seed). Event storage is flat: times/marks grouped by
    canonical site rank with an offsets table.
    """

    def __init__(self, params, box, horizon, times, marks, offsets, gaussian_seed,
                 seed=None, scheme="per_site"):
        self.params = params
        self.box = box
        self.horizon = float(horizon)
        self.times = np.asarray(times, dtype=float)
        self.marks = np.asarray(marks, dtype=float)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.gaussian_seed = int(gaussian_seed)
        self.seed = seed
        self.scheme = scheme
        self.bridge_top = _bridge_top(self.horizon)
        self._bcache: dict = {}
        self._ztab: dict = {}
        self._by_time = None
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if len(self.offsets) != box.n_sites + 1 or self.offsets[-1] != len(self.times):
            raise ValueError("offsets table inconsistent with event arrays")
        if len(self.times) and (self.times.min() <= 0 or self.times.max() > self.horizon):
            raise ValueError("event times must lie in (0, horizon]")

    @property
    def n_events(self) -> int:
        return len(self.times)

    def events_at(self, site):
        """(times, marks) slices for one site, time-sorted."""
        rank = self.box.rank_of(site)
        lo, hi = self.offsets[rank], self.offsets[rank + 1]
        return self.times[lo:hi], self.marks[lo:hi]

    def events_by_time(self):
        """(times, site_ranks, marks) for all events, globally time-sorted."""
        if self._by_time is None:
            ranks = np.repeat(np.arange(self.box.n_sites), np.diff(self.offsets))
            order = np.argsort(self.times, kind="stable")
            self._by_time = (self.times[order], ranks[order], self.marks[order])
        return self._by_time

    # -- Gaussian layer -----------------------------------------------------

    # bridge levels 0 .. _SHALLOW-1 are drawn in one per-site batch; deeper
    # nodes (reached only through non-dyadic query times) get their own stream
    _SHALLOW = 6

    def _node_z(self, site, level: int, index: int) -> float:
        """Standard normal for one midpoint node, order-independent."""
        if level < self._SHALLOW:
            tab = self._ztab.get(site)
            if tab is None:
                rng = rng_for(self.gaussian_seed, "bm-tab", *site)
                tab = rng.standard_normal(2**self._SHALLOW)
                self._ztab.setdefault(site, tab)
            # slot 0 is the endpoint; level l starts at 1 + (2^l - 1)
            return float(tab[2**level + index])
        return float(rng_for(self.gaussian_seed, "bm", *site, level, index).standard_normal())

    def _end_z(self, site) -> float:
        tab = self._ztab.get(site)
        if tab is None:
            rng = rng_for(self.gaussian_seed, "bm-tab", *site)
            tab = rng.standard_normal(2**self._SHALLOW)
            self._ztab.setdefault(site, tab)
        return float(tab[0])

    def brownian_value(self, site, t: float) -> float:
        """B_site(t) with Var(B(t)) = sigma2 * t, a pure function of the seed.

        Evaluated by descending the dyadic midpoint tree over [0, bridge_top];
        every float time is a dyadic rational, so the descent terminates with
        the exact value. Midpoints a + (b - a)/2 are exact in floating point
        along the descent, which makes increments refinement-consistent.
        """
        if self.params.sigma2 == 0.0:
            return 0.0
        if t == 0.0:
            return 0.0
        if not 0.0 <= t <= self.bridge_top:
            raise ValueError(f"time {t} outside bridge interval [0, {self.bridge_top}]")
        site = tuple(int(c) for c in site)
        key = (site, t)
        cached = self._bcache.get(key)
        if cached is not None:
            return cached
        s2 = self.params.sigma2
        a, b = 0.0, self.bridge_top
        va = 0.0
        ekey = (site, b)
        vb = self._bcache.get(ekey)
        if vb is None:
            vb = math.sqrt(s2 * self.bridge_top) * self._end_z(site)
            self._bcache.setdefault(ekey, vb)
        level, index = 0, 0
        while t != b:
            h = b - a
            m = a + 0.5 * h
            mkey = (site, m)
            vm = self._bcache.get(mkey)
            if vm is None:
                z = self._node_z(site, level, index)
                vm = 0.5 * (va + vb) + math.sqrt(s2 * h * 0.25) * z
                self._bcache.setdefault(mkey, vm)
            if t == m:
                return vm
            if t < m:
                b, vb = m, vm
                index = 2 * index
            else:
                a, va = m, vm
                index = 2 * index + 1
            level += 1
            if level > 1100:
                raise RuntimeError("dyadic descent failed to terminate")
        return vb

    def gaussian_increment(self, site, a: float, b: float) -> float:
        """B_site(b) - B_site(a); zero when sigma2 == 0."""
        if self.params.sigma2 == 0.0:
            return 0.0
        return self.brownian_value(site, b) - self.brownian_value(site, a)

    def gaussian_increments_all(self, a: float, b: float) -> np.ndarray:
        """Per-site Gaussian increments over (a, b], shaped like the box."""
        out = np.zeros(self.box.shape)
        if self.params.sigma2 == 0.0:
            return out
        flat = out.reshape(-1)
        for rank, site in enumerate(self.box.site_array()):
            flat[rank] = self.gaussian_increment(tuple(site), a, b)
        return out

    # -- misc ----------------------------------------------------------------

    def equals(self, other: "EnvironmentRealization") -> bool:
        return (
            self.params == other.params
            and self.box == other.box
            and self.horizon == other.horizon
            and self.gaussian_seed == other.gaussian_seed
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.marks, other.marks)
        )


def sample_environment(params: EnvironmentParams, box: LatticeBox, T: float,
                       seed: int, scheme: str = "per_site") -> EnvironmentRealization:
    """Sample the jump events of the environment over box x (0, T].

    Per site, the event count is Poisson(total_mass * T), times are i.i.d.
    uniform on (0, T] sorted stably, and marks pick atom i with probability
    nu_i / total_mass. Sites are independent.

    scheme="per_site" derives one stream per (seed, site), so the draw for a
    given site does not depend on the box or on iteration order.
    scheme="dense" draws all sites from a single vectorized stream keyed by
    the seed (same law, different stream); intended for boxes with very many
    events where per-site stream setup dominates.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    if box.n_sites < 1:
        raise ValueError("box must be nonempty")
    levy = params.levy
    nu_tot = levy.total_mass
    atom_marks = np.array([r for r, _ in levy.atoms])
    atom_probs = (
        np.array([nu for _, nu in levy.atoms]) / nu_tot if nu_tot > 0 else None
    )
    gaussian_seed = derive_seed(seed, "gauss")
    n_sites = box.n_sites

    if nu_tot == 0:
        offsets = np.zeros(n_sites + 1, dtype=np.int64)
        return EnvironmentRealization(
            params, box, T, np.empty(0), np.empty(0), offsets, gaussian_seed, seed, scheme
        )

    if scheme == "per_site":
        counts = np.empty(n_sites, dtype=np.int64)
        t_chunks = []
        m_chunks = []
        for rank, site in enumerate(box.site_array()):
            rng = rng_for(seed, "ev", *(int(c) for c in site))
            n = int(rng.poisson(nu_tot * T))
            counts[rank] = n
            if n == 0:
                continue
            t_raw = T * (1.0 - rng.random(n))
            idx = rng.choice(len(atom_marks), size=n, p=atom_probs)
            order = np.argsort(t_raw, kind="stable")
            t_chunks.append(t_raw[order])
            m_chunks.append(atom_marks[idx[order]])
        times = np.concatenate(t_chunks) if t_chunks else np.empty(0)
        marks = np.concatenate(m_chunks) if m_chunks else np.empty(0)
    elif scheme == "dense":
        rng = rng_for(seed, "ev-dense")
        counts = rng.poisson(nu_tot * T, n_sites)
        total = int(counts.sum())
        t_raw = T * (1.0 - rng.random(total))
        idx = rng.choice(len(atom_marks), size=total, p=atom_probs)
        site_ids = np.repeat(np.arange(n_sites), counts)
        order = np.lexsort((t_raw, site_ids))
        times = t_raw[order]
        marks = atom_marks[idx[order]]
    else:
        raise ValueError(f"unknown sampling scheme {scheme!r}")

    offsets = np.zeros(n_sites + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return EnvironmentRealization(
        params, box, T, times, marks, offsets, gaussian_seed, seed, scheme
    )


def log_weight_factor(env: EnvironmentRealization, site, interval) -> float:
    """Increment of the log potential at `site` over (a, b].

    Gaussian increment (variance sigma2 * (b - a), refinement-consistent)
    plus log(1 + r) per jump event in (a, b]. Returns -inf iff some event in
    the window is a hard obstacle (r = -1).
    """
    a, b = float(interval[0]), float(interval[1])
    if not (0.0 <= a <= b <= env.horizon):
        raise ValueError(f"interval [{a}, {b}] outside [0, {env.horizon}]")
    times, marks = env.events_at(site)
    lo = int(np.searchsorted(times, a, side="right"))
    hi = int(np.searchsorted(times, b, side="right"))
    window = marks[lo:hi]
    if np.any(window == -1.0):
        return float("-inf")
    total = float(np.sum(np.log1p(window))) if hi > lo else 0.0
    total += env.gaussian_increment(site, a, b)
    return total


# -- serialization ------------------------------------------------------------


def environment_to_json(env: EnvironmentRealization) -> str:
    """Serialize a realization (events and Gaussian seed) for exact replay."""
    events = {}
    for rank, site in enumerate(env.box.site_array()):
        lo, hi = env.offsets[rank], env.offsets[rank + 1]
        if hi > lo:
            key = ",".join(str(int(c)) for c in site)
            events[key] = [[float(t), float(r)] for t, r in
                           zip(env.times[lo:hi], env.marks[lo:hi])]
    doc = {
        "format": "levypolymer-environment",
        "version": 1,
        "params": {
            "sigma2": env.params.sigma2,
            "atoms": [[r, nu] for r, nu in env.params.levy.atoms],
        },
        "box": {"d": env.box.d, "radius": env.box.radius, "boundary": env.box.boundary},
        "horizon": env.horizon,
        "gaussian_seed": env.gaussian_seed,
        "seed": env.seed,
        "scheme": env.scheme,
        "events": events,
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def environment_from_json(text: str) -> EnvironmentRealization:
    doc = json.loads(text)
    if doc.get("format") != "levypolymer-environment" or doc.get("version") != 1:
        raise ValueError("not a version-1 environment document")
    params = EnvironmentParams(
        doc["params"]["sigma2"],
        LevyMeasure(tuple((r, nu) for r, nu in doc["params"]["atoms"])),
    )
    box = LatticeBox(**doc["box"])
    n_sites = box.n_sites
    counts = np.zeros(n_sites, dtype=np.int64)
    chunks = {}
    for key, evs in doc["events"].items():
        site = tuple(int(c) for c in key.split(","))
        rank = box.rank_of(site)
        counts[rank] = len(evs)
        chunks[rank] = evs
    offsets = np.zeros(n_sites + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    times = np.zeros(int(offsets[-1]))
    marks = np.zeros(int(offsets[-1]))
    for rank, evs in chunks.items():
        lo = offsets[rank]
        for j, (t, r) in enumerate(evs):
            times[lo + j] = t
            marks[lo + j] = r
    return EnvironmentRealization(
        params, box, doc["horizon"], times, marks, offsets,
        doc["gaussian_seed"], doc.get("seed"), doc.get("scheme", "per_site"),
    )
