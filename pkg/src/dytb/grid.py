"""Truncated dyadic grid on the unit cube and exact piecewise-constant calculus.

Everything lives on [0,1)^n with n in {1, 2}, subdivided dyadically down to a
finest level L ("depth").  Functions are constant on the finest-level cells,
so integrals, averages and L^p norms are finite sums evaluated exactly up to
float roundoff.  Cells are ordered row-major by integer coordinates; that
order is part of the serialization contract.

All objects here are immutable after construction and safe to share between
threads for read-only use.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "GridSpec",
    "DyadicCube",
    "GridFunction",
    "average",
    "lp_norm",
    "child_containing",
    "dyadic_maximal",
    "level_sums",
    "upsample",
]

DEFAULT_CELL_CAP = 2**20


@dataclass(frozen=True, order=True)
class DyadicCube:
    """One cube of the dyadic grid: level ``l`` and integer coordinates ``k``.

    The cube is the half-open box prod_a [k_a * 2^-l, (k_a + 1) * 2^-l).
    """

    level: int
    coords: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.level < 0:
            raise ValueError(f"negative level {self.level}")
        top = 1 << self.level
        if not all(0 <= k < top for k in self.coords):
            raise ValueError(f"coords {self.coords} out of range at level {self.level}")

    @property
    def dim(self) -> int:
        return len(self.coords)

    @property
    def side(self) -> float:
        return 2.0**-self.level

    @property
    def volume(self) -> float:
        return 2.0 ** (-self.dim * self.level)

    def parent(self) -> DyadicCube:
        if self.level == 0:
            raise ValueError("the root cube has no parent")
        return DyadicCube(self.level - 1, tuple(k >> 1 for k in self.coords))

    def ancestor(self, level: int) -> DyadicCube:
        """The unique cube at the given coarser ``level`` containing this one."""
        if not 0 <= level <= self.level:
            raise ValueError(f"level {level} is not an ancestor level of {self}")
        shift = self.level - level
        return DyadicCube(level, tuple(k >> shift for k in self.coords))

    def children(self) -> list[DyadicCube]:
        """The 2^dim dyadic children, ordered row-major by offset."""
        out = []
        for off in range(2**self.dim):
            offs = _child_offset(off, self.dim)
            out.append(
                DyadicCube(self.level + 1, tuple(2 * k + o for k, o in zip(self.coords, offs)))
            )
        return out

    def contains(self, other: DyadicCube) -> bool:
        """Whether ``other`` is contained in (possibly equal to) this cube."""
        if other.dim != self.dim or other.level < self.level:
            return False
        return other.ancestor(self.level) == self

    def lower_corner(self) -> tuple[float, ...]:
        return tuple(k * self.side for k in self.coords)

    def __repr__(self) -> str:  # compact, e.g. Q(3; 5) or Q(2; 1,3)
        return f"Q({self.level}; {','.join(str(k) for k in self.coords)})"


def _child_offset(index: int, dim: int) -> tuple[int, ...]:
    """Row-major child offset vector for child ``index`` in {0, ..., 2^dim - 1}."""
    if dim == 1:
        return (index,)
    return (index >> 1, index & 1)


def child_index_of(parent: DyadicCube, child: DyadicCube) -> int:
    """The row-major index of ``child`` among ``parent``'s children."""
    if child.level != parent.level + 1 or child.ancestor(parent.level) != parent:
        raise ValueError(f"{child} is not a child of {parent}")
    offs = tuple(c - 2 * k for c, k in zip(child.coords, parent.coords))
    if parent.dim == 1:
        return offs[0]
    return (offs[0] << 1) | offs[1]


@dataclass(frozen=True)
class GridSpec:
    """Grid geometry: dimension (1 or 2) and finest level ``depth``.

    Rejects grids whose finest-cell count 2^(dim*depth) exceeds ``cell_cap``.
    """

    dim: int
    depth: int
    cell_cap: int = DEFAULT_CELL_CAP

    def __post_init__(self) -> None:
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.depth < 0:
            raise ValueError(f"depth must be non-negative, got {self.depth}")
        if 2 ** (self.dim * self.depth) > self.cell_cap:
            raise ValueError(
                f"2^({self.dim}*{self.depth}) cells exceed the cell cap {self.cell_cap}"
            )

    @property
    def n_cells(self) -> int:
        return 2 ** (self.dim * self.depth)

    @property
    def cell_volume(self) -> float:
        return 2.0 ** (-self.dim * self.depth)

    def root(self) -> DyadicCube:
        return DyadicCube(0, (0,) * self.dim)

    def contains(self, cube: DyadicCube) -> bool:
        return cube.dim == self.dim and 0 <= cube.level <= self.depth

    def check(self, cube: DyadicCube) -> None:
        if not self.contains(cube):
            raise ValueError(f"cube {cube} does not fit a dim={self.dim} depth={self.depth} grid")

    def n_cubes(self, level: int) -> int:
        return 2 ** (self.dim * level)

    def cube_flat(self, cube: DyadicCube) -> int:
        """Row-major flat index of ``cube`` among cubes of its level."""
        if self.dim == 1:
            return cube.coords[0]
        return (cube.coords[0] << cube.level) | cube.coords[1]

    def cube_from_flat(self, level: int, flat: int) -> DyadicCube:
        if self.dim == 1:
            return DyadicCube(level, (flat,))
        return DyadicCube(level, (flat >> level, flat & ((1 << level) - 1)))

    def cubes_at(self, level: int) -> list[DyadicCube]:
        return [self.cube_from_flat(level, r) for r in range(self.n_cubes(level))]

    def all_cubes(self, top: DyadicCube | None = None, max_level: int | None = None):
        """Iterate cubes contained in ``top`` (default the root), coarse to fine."""
        if top is None:
            top = self.root()
        self.check(top)
        stop = self.depth if max_level is None else max_level
        for level in range(top.level, stop + 1):
            shift = level - top.level
            for local in range(2 ** (self.dim * shift)):
                if self.dim == 1:
                    yield DyadicCube(level, ((top.coords[0] << shift) | local,))
                else:
                    r0 = local >> shift
                    r1 = local & ((1 << shift) - 1)
                    yield DyadicCube(
                        level, ((top.coords[0] << shift) | r0, (top.coords[1] << shift) | r1)
                    )

    def cell_indices(self, cube: DyadicCube) -> np.ndarray:
        """Flat indices of the finest cells covered by ``cube`` (row-major order)."""
        self.check(cube)
        shift = self.depth - cube.level
        if self.dim == 1:
            k = cube.coords[0]
            return np.arange(k << shift, (k + 1) << shift)
        side = 1 << self.depth
        rows = np.arange(cube.coords[0] << shift, (cube.coords[0] + 1) << shift)
        cols = np.arange(cube.coords[1] << shift, (cube.coords[1] + 1) << shift)
        return (rows[:, None] * side + cols[None, :]).ravel()


def level_sums(spec: GridSpec, cell_values: np.ndarray) -> list[np.ndarray]:
    """Per-level cube sums of a finest-cell array, index ``[level][flat_cube]``.

    Built bottom-up: a parent's entry is the exact float sum of its children's
    entries, so the additivity of the tree is bit-exact by construction.
    """
    vals = np.asarray(cell_values, dtype=float)
    if vals.shape != (spec.n_cells,):
        raise ValueError(f"expected {spec.n_cells} cell values, got shape {vals.shape}")
    out = [vals]
    cur = vals
    if spec.dim == 1:
        for _ in range(spec.depth):
            cur = cur[0::2] + cur[1::2]
            out.append(cur)
    else:
        m = 1 << spec.depth
        cur2 = cur.reshape(m, m)
        for _ in range(spec.depth):
            m //= 2
            cur2 = cur2.reshape(m, 2, m, 2).sum(axis=(1, 3))
            out.append(cur2.ravel())
    out.reverse()
    return out


def upsample(spec: GridSpec, level: int, values: np.ndarray) -> np.ndarray:
    """Replicate per-cube values at ``level`` onto the cubes one level finer."""
    if spec.dim == 1:
        return np.repeat(values, 2)
    m = 1 << level
    grid = np.asarray(values).reshape(m, m)
    return np.repeat(np.repeat(grid, 2, axis=0), 2, axis=1).ravel()


def cells_of(spec: GridSpec, level: int, values: np.ndarray) -> np.ndarray:
    """Spread per-cube values at ``level`` down to one value per finest cell."""
    cur = np.asarray(values, dtype=float)
    for lev in range(level, spec.depth):
        cur = upsample(spec, lev, cur)
    return cur


@dataclass(frozen=True)
class GridFunction:
    """A function constant on finest-level cells, one value per cell (row-major).

    Integrals over dyadic cubes are exact cell sums times the cell volume.
    """

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.spec.n_cells,):
            raise ValueError(
                f"expected {self.spec.n_cells} values for dim={self.spec.dim} "
                f"depth={self.spec.depth}, got shape {vals.shape}"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    # -- constructors ------------------------------------------------------

    @staticmethod
    def constant(spec: GridSpec, value: float) -> GridFunction:
        return GridFunction(spec, np.full(spec.n_cells, float(value)))

    @staticmethod
    def indicator(spec: GridSpec, cube: DyadicCube) -> GridFunction:
        vals = np.zeros(spec.n_cells)
        vals[spec.cell_indices(cube)] = 1.0
        return GridFunction(spec, vals)

    # -- calculus ----------------------------------------------------------

    @cached_property
    def cube_sums(self) -> list[np.ndarray]:
        """Cell-value sums over every cube, per level (cached; exact tree)."""
        return level_sums(self.spec, self.values)

    def integral(self, cube: DyadicCube | None = None) -> float:
        """Integral over ``cube`` (default: the whole grid)."""
        if cube is None:
            return float(self.cube_sums[0][0]) * self.spec.cell_volume
        self.spec.check(cube)
        return float(self.cube_sums[cube.level][self.spec.cube_flat(cube)]) * self.spec.cell_volume

    def average(self, cube: DyadicCube | None = None) -> float:
        if cube is None:
            cube = self.spec.root()
        return self.integral(cube) / cube.volume

    def lp_norm(self, p: float, cube: DyadicCube | None = None) -> float:
        return lp_norm(self, p, cube)

    def restrict(self, cube: DyadicCube) -> GridFunction:
        """The function times the indicator of ``cube``."""
        vals = np.zeros(self.spec.n_cells)
        idx = self.spec.cell_indices(cube)
        vals[idx] = self.values[idx]
        return GridFunction(self.spec, vals)

    # -- arithmetic (pointwise) ---------------------------------------------

    def _match(self, other: GridFunction) -> None:
        if other.spec != self.spec:
            raise ValueError("grid mismatch")

    def __add__(self, other: GridFunction) -> GridFunction:
        self._match(other)
        return GridFunction(self.spec, self.values + other.values)

    def __sub__(self, other: GridFunction) -> GridFunction:
        self._match(other)
        return GridFunction(self.spec, self.values - other.values)

    def __mul__(self, other):
        if isinstance(other, GridFunction):
            self._match(other)
            return GridFunction(self.spec, self.values * other.values)
        return GridFunction(self.spec, self.values * float(other))

    __rmul__ = __mul__

    def __neg__(self) -> GridFunction:
        return GridFunction(self.spec, -self.values)

    def abs(self) -> GridFunction:
        return GridFunction(self.spec, np.abs(self.values))

    # -- serialization -------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {"dim": self.spec.dim, "depth": self.spec.depth, "values": self.values.tolist()}

    @staticmethod
    def from_json_dict(data: dict) -> GridFunction:
        spec = GridSpec(int(data["dim"]), int(data["depth"]))
        return GridFunction(spec, np.asarray(data["values"], dtype=float))

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @staticmethod
    def load_json(path) -> GridFunction:
        with open(path) as fh:
            return GridFunction.from_json_dict(json.load(fh))

    def save_csv(self, path) -> None:
        """One value per line; leading comment line carries ``# dim,depth``."""
        with open(path, "w") as fh:
            fh.write(f"# {self.spec.dim},{self.spec.depth}\n")
            for v in self.values:
                fh.write(f"{float(v)!r}\n")

    @staticmethod
    def load_csv(path) -> GridFunction:
        with open(path) as fh:
            header = fh.readline().strip()
            if not header.startswith("#"):
                raise ValueError(f"{path}: missing '# dim,depth' header line")
            dim_s, depth_s = header.lstrip("#").split(",")
            vals = [float(line) for line in fh if line.strip()]
        return GridFunction(GridSpec(int(dim_s), int(depth_s)), np.asarray(vals))


# -- module-level operations --------------------------------------------------


def average(f: GridFunction, cube: DyadicCube) -> float:
    """The mean value of ``f`` over ``cube``: |Q|^-1 * integral of f over Q."""
    return f.average(cube)


def lp_norm(f: GridFunction, p: float, cube: DyadicCube | None = None) -> float:
    """(sum over cells in Q of |f|^p * cell_volume)^(1/p); Q defaults to the root.

    Requires finite p > 1.
    """
    if not (p > 1.0) or not math.isfinite(p):
        raise ValueError(f"p must be finite and > 1, got {p}")
    if cube is None:
        vals = f.values
    else:
        f.spec.check(cube)
        vals = f.values[f.spec.cell_indices(cube)]
    return float(np.sum(np.abs(vals) ** p) * f.spec.cell_volume) ** (1.0 / p)


def child_containing(parent: DyadicCube, inner: DyadicCube) -> DyadicCube:
    """The unique child of ``parent`` containing the strictly smaller ``inner``."""
    if inner.dim != parent.dim or inner.level <= parent.level:
        raise ValueError(f"{inner} is not strictly contained in {parent}")
    if inner.ancestor(parent.level) != parent:
        raise ValueError(f"{inner} is not strictly contained in {parent}")
    return inner.ancestor(parent.level + 1)


def dyadic_maximal(f: GridFunction) -> GridFunction:
    """Dyadic maximal function: at each cell, max over containing cubes of |mean|."""
    spec = f.spec
    sums = f.cube_sums
    best = None
    for level in range(spec.depth + 1):
        vol = 2.0 ** (-spec.dim * level)
        avg = np.abs(sums[level] * spec.cell_volume / vol)
        if best is None:
            best = avg
        else:
            best = np.maximum(best, avg)
        if level < spec.depth:
            best = upsample(spec, level, best)
    return GridFunction(spec, best)
