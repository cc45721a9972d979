"""Finite lattice boxes and real-valued fields on them.

A box is the sup-norm ball {x in Z^d : |x|_inf <= R}. Fields store their
values as a dense d-dimensional array; site (x_1, ..., x_d) lives at array
index (x_1 + R, ..., x_d + R).
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LatticeBox:
    """Sup-norm ball of radius `radius` in Z^d.

    boundary: "dirichlet" (absorbing: mass crossing the edge is lost) or
    "periodic" (wrap-around, used only for conservation sanity checks).
    """

    d: int
    radius: int
    boundary: str = "dirichlet"

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.boundary not in ("dirichlet", "periodic"):
            raise ValueError(f"unknown boundary {self.boundary!r}")

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def shape(self) -> tuple:
        return (self.side,) * self.d

    @property
    def n_sites(self) -> int:
        return self.side**self.d

    def contains(self, site) -> bool:
        return len(site) == self.d and all(abs(int(c)) <= self.radius for c in site)

    def index(self, site) -> tuple:
        """Array index of a lattice site; raises if outside the box."""
        if not self.contains(site):
            raise IndexError(f"site {tuple(site)} outside box of radius {self.radius}")
        return tuple(int(c) + self.radius for c in site)

    def site_array(self) -> np.ndarray:
        """All sites as an (n_sites, d) int array, in canonical C order."""
        axes = [np.arange(-self.radius, self.radius + 1)] * self.d
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def rank_of(self, site) -> int:
        """Flat canonical rank of a site (C order over the shape)."""
        idx = self.index(site)
        return int(np.ravel_multi_index(idx, self.shape))


@dataclass
class Field:
    """Real-valued function on a LatticeBox."""

    box: LatticeBox
    values: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.box.shape:
            raise ValueError(
                f"values shape {self.values.shape} does not match box shape {self.box.shape}"
            )

    @classmethod
    def zeros(cls, box: LatticeBox) -> "Field":
        return cls(box, np.zeros(box.shape))

    @classmethod
    def indicator(cls, box: LatticeBox, site=None) -> "Field":
        """Unit mass at `site` (default: origin)."""
        if site is None:
            site = (0,) * box.d
        v = np.zeros(box.shape)
        v[box.index(site)] = 1.0
        return cls(box, v)

    def value_at(self, site) -> float:
        return float(self.values[self.box.index(site)])

    def total(self) -> float:
        return float(self.values.sum())

    def copy(self) -> "Field":
        return Field(self.box, self.values.copy(), dict(self.info))


def shift_measure(values: np.ndarray, axis: int, sign: int, boundary: str) -> np.ndarray:
    """Move all mass one lattice step in direction sign*e_axis.

    Dirichlet boundary drops the mass that leaves the box; periodic wraps it.
    """
    if boundary == "periodic":
        return np.roll(values, sign, axis=axis)
    out = np.zeros_like(values)
    src = [slice(None)] * values.ndim
    dst = [slice(None)] * values.ndim
    if sign > 0:
        dst[axis] = slice(1, None)
        src[axis] = slice(0, -1)
    else:
        dst[axis] = slice(0, -1)
        src[axis] = slice(1, None)
    out[tuple(dst)] = values[tuple(src)]
    return out
