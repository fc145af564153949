"""Systems of locally accretive test functions, one function b_Q per cube.

Each b_Q is supported on Q, has integral exactly |Q|, and obeys the norm
budget ||b_Q||_p <= A |Q|^(1/p) for the system's exponent p and declared
constant A > 1.  Generation is deterministic per (seed, cube); materialized
functions are cached with exclusive-fill locking so systems can be shared.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .grid import DyadicCube, GridFunction, GridSpec, lp_norm

__all__ = ["AccretiveSystem", "get_b", "validate", "ACCRETIVE_KINDS"]

ACCRETIVE_KINDS = ("constant", "two-value", "signed", "random")

# Generators must keep cell values away from zero (twisted denominators are
# protected structurally, but tiny values wreck conditioning); only the signed
# kind is allowed to produce exact zeros.
MIN_ABS_VALUE = 1e-6


@dataclass
class AccretiveSystem:
    """A deterministic rule (kind, seed, params) producing b_Q on demand.

    kinds:
      constant   b_Q = 1_Q; minimal constant 1.
      two-value  1+s on a pseudo-random half of Q's cells, 1-s on the rest
                 (param s in [0, 1-1e-6)); single-cell cubes fall back to 1.
      signed     2 on the second half of Q's cells (row-major), 0 on the first
                 half; the only kind allowed to produce zeros.
      random     1 + amp*w with w mean-zero noise scaled into [-1, 1], so cell
                 values stay inside [1-amp, 1+amp] (param amp in (0, 1-1e-5]).
    """

    spec: GridSpec
    kind: str
    p: float
    A: float
    seed: int = 0
    params: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ACCRETIVE_KINDS:
            raise ValueError(f"unknown kind {self.kind!r}; expected one of {ACCRETIVE_KINDS}")
        if not self.p > 1.0:
            raise ValueError(f"p must be > 1, got {self.p}")
        if not self.A > 1.0:
            raise ValueError(f"A must be > 1, got {self.A}")
        if self.kind == "two-value":
            s = float(self.params.get("s", 0.5))
            if not 0.0 <= s < 1.0 - MIN_ABS_VALUE:
                raise ValueError(f"two-value parameter s={s} out of range")
        if self.kind == "random":
            amp = float(self.params.get("amp", 0.5))
            if not 0.0 < amp <= 1.0 - 1e-5:
                raise ValueError(f"random parameter amp={amp} out of range")
        worst = self.worst_constant()
        if worst > self.A * (1 + 1e-9):
            raise ValueError(
                f"declared A={self.A} is below the kind's worst-case constant {worst:.6g}"
            )

    def worst_constant(self) -> float:
        """Largest value validate() can measure for this kind and parameters."""
        if self.kind == "constant":
            return 1.0
        if self.kind == "two-value":
            s = float(self.params.get("s", 0.5))
            return (((1 + s) ** self.p + (1 - s) ** self.p) / 2.0) ** (1.0 / self.p)
        if self.kind == "signed":
            return (2.0**self.p / 2.0) ** (1.0 / self.p)
        return 1.0 + float(self.params.get("amp", 0.5))

    def get_b(self, cube: DyadicCube) -> GridFunction:
        """The test function attached to ``cube`` (cached, deterministic)."""
        self.spec.check(cube)
        key = (cube.level, self.spec.cube_flat(cube))
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        b = self._generate(cube)
        self._check_generated(cube, b)
        with self._lock:
            return self._cache.setdefault(key, b)

    # -- generation ---------------------------------------------------------

    def _rng(self, cube: DyadicCube) -> np.random.Generator:
        key = (cube.level, self.spec.cube_flat(cube))
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def _generate(self, cube: DyadicCube) -> GridFunction:
        idx = self.spec.cell_indices(cube)
        vals = np.zeros(self.spec.n_cells)
        n = idx.size
        if self.kind == "constant" or n == 1:
            vals[idx] = 1.0
        elif self.kind == "two-value":
            s = float(self.params.get("s", 0.5))
            half = self._rng(cube).permutation(n)[: n // 2]
            vals[idx] = 1.0 - s
            vals[idx[half]] = 1.0 + s
        elif self.kind == "signed":
            vals[idx[n // 2 :]] = 2.0
        else:  # random
            amp = float(self.params.get("amp", 0.5))
            w = self._rng(cube).uniform(-1.0, 1.0, n)
            w -= w.mean()
            peak = np.abs(w).max()
            if peak > 1.0:  # keep values inside [1-amp, 1+amp] after recentring
                w /= peak
            vals[idx] = 1.0 + amp * w
        return GridFunction(self.spec, vals)

    def _check_generated(self, cube: DyadicCube, b: GridFunction) -> None:
        mean_err = abs(b.integral(cube) - cube.volume)
        if mean_err > 1e-12 * cube.volume:
            raise RuntimeError(f"generator bug: mean of b_{cube} off by {mean_err:.3e}")
        if lp_norm(b, self.p, cube) > self.A * cube.volume ** (1.0 / self.p) * (1 + 1e-12):
            raise RuntimeError(f"generator bug: norm budget exceeded on {cube}")
        if self.kind != "signed":
            inside = b.values[self.spec.cell_indices(cube)]
            if np.abs(inside).min() < MIN_ABS_VALUE:
                raise RuntimeError(f"generator bug: near-zero cell value on {cube}")

    # -- serialization --------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "p": self.p, "A": self.A, "seed": self.seed,
                "params": dict(self.params)}

    @staticmethod
    def from_json_dict(spec: GridSpec, data: dict) -> AccretiveSystem:
        return AccretiveSystem(spec, data["kind"], float(data["p"]), float(data["A"]),
                               int(data.get("seed", 0)), dict(data.get("params", {})))


def get_b(system: AccretiveSystem, cube: DyadicCube) -> GridFunction:
    return system.get_b(cube)


def validate(system: AccretiveSystem, cube: DyadicCube) -> tuple[bool, float]:
    """Check the per-cube invariants; returns (ok, measured constant).

    measured = ||b_Q||_p / |Q|^(1/p); ok requires support inside Q, integral
    |Q| to 1e-12 relative, and measured <= declared A.
    """
    b = system.get_b(cube)
    inside = np.zeros(system.spec.n_cells, dtype=bool)
    inside[system.spec.cell_indices(cube)] = True
    support_ok = bool(np.all(b.values[~inside] == 0.0))
    mean_ok = abs(b.integral(cube) - cube.volume) <= 1e-12 * cube.volume
    measured = lp_norm(b, system.p, cube) / cube.volume ** (1.0 / system.p)
    ok = support_ok and mean_ok and measured <= system.A * (1 + 1e-12)
    return ok, measured
