"""Twisted, half-twisted and corona-adapted martingale differences.

Fix a base cube S0, a function b on S0 with integral |S0| and controlled L^p
norm, and a disjoint terminal family T inside S0 with local functions b_T.
Over the derived family Q (cubes in S0 not inside any terminal cube) the
twisted difference of f at Q is

    D~_Q f = sum over children Q' of
             [ <f>_Q' / <b_Q'>_Q' * b_Q'  -  <f>_Q / <b>_Q * b ] 1_Q'

with b_Q' = b for non-terminal children and b_Q' = b_T on terminal ones; the
half-twisted difference drops terminal children and the multiplication by b:

    D_Q f = sum over children Q' not terminal of
            [ <f>_Q' / <b>_Q'  -  <f>_Q / <b>_Q ] 1_Q'.

All denominators are protected by the terminal construction: every cube in
the derived family fails both stopping conditions, so |<b>_Q| > delta.

The corona-adapted analogues run against a stopping forest: E_Q h rescales
the stopping function of Q's corona block, Delta_Q h differences it across
children, and the finite grid makes the telescoping representation

    h 1_S = E_S h + sum over Q in S of Delta_Q h

an exact identity.  Everything here is pure and side-effect free.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .accretive import AccretiveSystem
from .corona import CoronaForest, TerminalFamily, _subtree_mask, make_terminal_family
from .grid import DyadicCube, GridFunction, GridSpec, level_sums

__all__ = [
    "TwistedContext",
    "SignChoice",
    "make_context",
    "block_context",
    "twisted_delta",
    "half_twisted_D",
    "transform",
    "half_transform",
    "classical_transform",
    "corona_expectation",
    "corona_delta",
    "expand",
    "corona_transform",
    "box",
    "half_twisted_block",
    "decomposition_identity_check",
    "delta_decomp_check",
    "pi_transform",
    "amalgam_transform",
    "proof_operators",
    "measure_comparison_check",
]


@dataclass(frozen=True)
class SignChoice:
    """A bounded multiplier per cube; missing cubes count as 0."""

    eps: dict

    def __post_init__(self) -> None:
        for q, e in self.eps.items():
            if abs(e) > 1.0:
                raise ValueError(f"|eps| must be <= 1, got {e} at {q}")

    def get(self, cube: DyadicCube) -> float:
        return self.eps.get(cube, 0.0)

    @staticmethod
    def constant(cubes, value: float = 1.0) -> SignChoice:
        return SignChoice({q: value for q in cubes})

    @staticmethod
    def random_signs(cubes, rng: np.random.Generator) -> SignChoice:
        cubes = list(cubes)
        signs = rng.choice([-1.0, 1.0], size=len(cubes))
        return SignChoice(dict(zip(cubes, signs)))


@dataclass(frozen=True)
class TwistedContext:
    """Base cube, function b, terminal family and constants, validated so the
    twisted calculus is well defined (all averages used as denominators are
    bounded away from zero by failure of the stopping conditions)."""

    family: TerminalFamily
    b: GridFunction
    p: float
    delta: float
    A: float

    @property
    def spec(self) -> GridSpec:
        return self.b.spec

    @property
    def s0(self) -> DyadicCube:
        return self.family.s0

    def __post_init__(self) -> None:
        spec = self.b.spec
        if self.family.spec != spec:
            raise ValueError("grid mismatch between b and the terminal family")
        s0 = self.family.s0
        out = np.delete(self.b.values, spec.cell_indices(s0))
        if np.any(out != 0.0):
            raise ValueError("b is not supported on the base cube")
        if abs(self.b.integral(s0) - s0.volume) > 1e-12 * s0.volume:
            raise ValueError("b does not have integral |S0|")
        if self.b.lp_norm(self.p, s0) > self.A * s0.volume ** (1 / self.p) * (1 + 1e-12):
            raise ValueError("b exceeds the norm budget A |S0|^(1/p)")
        for t, bt in self.family.b_for.items():
            if bt.lp_norm(self.p, t) > self.A * t.volume ** (1 / self.p) * (1 + 1e-12):
                raise ValueError(f"b_T on {t} exceeds the norm budget")
        self._check_denominators()

    def _check_denominators(self) -> None:
        spec, s0 = self.spec, self.family.s0
        integ = [arr * spec.cell_volume for arr in self.b.cube_sums]
        pows = [arr * spec.cell_volume for arr in level_sums(spec, np.abs(self.b.values) ** self.p)]
        cap = self.A**self.p / self.delta
        for level in range(s0.level, spec.depth + 1):
            vol = 2.0 ** (-spec.dim * level)
            mask = _subtree_mask(spec.dim, s0, level) & ~self.family._covered[level]
            bad = mask & (
                (np.abs(integ[level]) <= self.delta * vol) | (pows[level] >= cap * vol)
            )
            if bad.any():
                flat = int(np.nonzero(bad)[0][0])
                raise ValueError(
                    f"denominator safety fails at {spec.cube_from_flat(level, flat)}: "
                    "the terminal family does not absorb all stopped cubes"
                )

    # cached per-level averages of b, used as denominators throughout
    @cached_property
    def b_avg(self) -> list[np.ndarray]:
        spec = self.spec
        return [
            s * spec.cell_volume / 2.0 ** (-spec.dim * lev)
            for lev, s in enumerate(self.b.cube_sums)
        ]

    def avg_b(self, cube: DyadicCube) -> float:
        return float(self.b_avg[cube.level][self.spec.cube_flat(cube)])

    def q_cubes(self, active_only: bool = True) -> list[DyadicCube]:
        return self.family.q_cubes(active_only=active_only)

    def check_in_q(self, cube: DyadicCube) -> None:
        if not self.family.in_q(cube):
            raise ValueError(f"{cube} is not in the derived cube family of this context")


def make_context(
    system: AccretiveSystem,
    s0: DyadicCube,
    delta: float,
    coarsen_rng: np.random.Generator | None = None,
) -> TwistedContext:
    """Build the twisted context of ``system``'s function on ``s0``."""
    family = make_terminal_family(system, s0, delta, coarsen_rng)
    return TwistedContext(family, system.get_b(s0), system.p, delta, system.A)


def block_context(
    forest: CoronaForest, j: int, system: AccretiveSystem, member: DyadicCube
) -> TwistedContext:
    """The corona block of a stopping cube S as a twisted context: base cube S,
    function b_S, terminal cubes = S's stopping children with their own b."""
    if member not in forest.members(j):
        raise ValueError(f"{member} is not a member of S_{j}")
    kids = forest.stopping_children(j, member)
    b_for = {k: system.get_b(k) for k in kids}
    family = TerminalFamily(forest.spec, member, tuple(kids), tuple(kids), b_for)
    cfg = forest.config
    p = cfg.p1 if j == 1 else cfg.p2
    return TwistedContext(family, system.get_b(member), p, cfg.delta, cfg.A)


# -- twisted and half-twisted differences ---------------------------------------


def twisted_delta(ctx: TwistedContext, cube: DyadicCube, f: GridFunction) -> GridFunction:
    """The twisted martingale difference of f at ``cube``; supported on the
    cube and mean-zero (exactly, by the matched rescalings)."""
    ctx.check_in_q(cube)
    spec = ctx.spec
    out = np.zeros(spec.n_cells)
    if cube.level >= spec.depth:
        return GridFunction(spec, out)
    base = f.average(cube) / ctx.avg_b(cube)
    for child in cube.children():
        idx = spec.cell_indices(child)
        if ctx.family.is_terminal(child):
            bt = ctx.family.b_for[child]
            ratio = f.average(child) / bt.average(child)
            out[idx] = ratio * bt.values[idx] - base * ctx.b.values[idx]
        else:
            ratio = f.average(child) / ctx.avg_b(child)
            out[idx] = ratio * ctx.b.values[idx] - base * ctx.b.values[idx]
    return GridFunction(spec, out)


def half_twisted_D(ctx: TwistedContext, cube: DyadicCube, f: GridFunction) -> GridFunction:
    """The half-twisted difference: terminal children skipped, no b factor."""
    ctx.check_in_q(cube)
    spec = ctx.spec
    out = np.zeros(spec.n_cells)
    if cube.level >= spec.depth:
        return GridFunction(spec, out)
    base = f.average(cube) / ctx.avg_b(cube)
    for child in cube.children():
        if ctx.family.is_terminal(child):
            continue
        out[spec.cell_indices(child)] = f.average(child) / ctx.avg_b(child) - base
    return GridFunction(spec, out)


def transform(ctx: TwistedContext, eps: SignChoice, f: GridFunction) -> GridFunction:
    """sum over the derived family of eps_Q * (twisted difference at Q)."""
    out = np.zeros(ctx.spec.n_cells)
    for q in ctx.q_cubes():
        e = eps.get(q)
        if e != 0.0:
            out += e * twisted_delta(ctx, q, f).values
    return GridFunction(ctx.spec, out)


def half_transform(ctx: TwistedContext, eps: SignChoice, f: GridFunction) -> GridFunction:
    """sum of eps_Q * (half-twisted difference at Q) over the derived family."""
    out = np.zeros(ctx.spec.n_cells)
    for q in ctx.q_cubes():
        e = eps.get(q)
        if e != 0.0:
            out += e * half_twisted_D(ctx, q, f).values
    return GridFunction(ctx.spec, out)


def classical_transform(eps: SignChoice, f: GridFunction, cubes) -> GridFunction:
    """sum_Q eps_Q sum_{Q' child of Q} (<f>_Q' - <f>_Q) 1_Q'."""
    spec = f.spec
    out = np.zeros(spec.n_cells)
    for q in cubes:
        e = eps.get(q)
        if e == 0.0 or q.level >= spec.depth:
            continue
        base = f.average(q)
        for child in q.children():
            out[spec.cell_indices(child)] += e * (f.average(child) - base)
    return GridFunction(spec, out)


# -- corona-adapted expectations and differences ---------------------------------


def corona_expectation(
    forest: CoronaForest, j: int, system: AccretiveSystem, cube: DyadicCube, h: GridFunction
) -> GridFunction:
    """E_Q h = (<h>_Q / <b_S>_Q) b_S 1_Q with S the corona parent of Q."""
    spec = forest.spec
    s = forest.pi(j, cube)
    b = system.get_b(s)
    coeff = h.average(cube) / b.average(cube)
    out = np.zeros(spec.n_cells)
    idx = spec.cell_indices(cube)
    out[idx] = coeff * b.values[idx]
    return GridFunction(spec, out)


def corona_delta(
    forest: CoronaForest, j: int, system: AccretiveSystem, cube: DyadicCube, h: GridFunction
) -> GridFunction:
    """Delta_Q h = sum over children Q' of (E_Q' h - E_Q h) 1_Q'; mean zero,
    supported on the cube."""
    spec = forest.spec
    out = np.zeros(spec.n_cells)
    if cube.level >= spec.depth:
        return GridFunction(spec, out)
    s = forest.pi(j, cube)
    b = system.get_b(s)
    base = h.average(cube) / b.average(cube)
    for child in cube.children():
        idx = spec.cell_indices(child)
        sc = forest.pi(j, child)
        if sc == s:
            bc = b
        else:
            bc = system.get_b(sc)
        coeff = h.average(child) / bc.average(child)
        out[idx] = coeff * bc.values[idx] - base * b.values[idx]
    return GridFunction(spec, out)


def expand(
    forest: CoronaForest, j: int, system: AccretiveSystem, top: DyadicCube, h: GridFunction
):
    """The martingale expansion of h below ``top``: returns (E_top h, list of
    (Q, Delta_Q h)); their sum reconstructs h 1_top exactly on the finite grid.
    """
    spec = forest.spec
    e_top = corona_expectation(forest, j, system, top, h)
    deltas = []
    for q in spec.all_cubes(top, max_level=spec.depth - 1 if spec.depth else 0):
        if q.level >= spec.depth:
            continue
        deltas.append((q, corona_delta(forest, j, system, q, h)))
    return e_top, deltas


def corona_transform(
    forest: CoronaForest, j: int, system: AccretiveSystem, eps: SignChoice, f: GridFunction
) -> GridFunction:
    """sum over cubes below the forest root of eps_Q * Delta_Q f."""
    spec = forest.spec
    out = np.zeros(spec.n_cells)
    for q in spec.all_cubes(forest.q0):
        e = eps.get(q)
        if e != 0.0 and q.level < spec.depth:
            out += e * corona_delta(forest, j, system, q, f).values
    return GridFunction(spec, out)


def box(
    forest: CoronaForest, j: int, system: AccretiveSystem, cube: DyadicCube, h: GridFunction
) -> GridFunction:
    """|half-twisted difference of h at the cube, within its corona block| plus
    the indicator of the cube when one of its children is a stopping cube (the
    indicator stands in for the skipped terminal children)."""
    spec = forest.spec
    out = np.zeros(spec.n_cells)
    has_stop = forest.has_stopping_child(j, cube)
    if cube.level < spec.depth:
        s = forest.pi(j, cube)
        b = system.get_b(s)
        members = forest.members(j)
        base = h.average(cube) / b.average(cube)
        for child in cube.children():
            if child in members:
                continue
            out[spec.cell_indices(child)] = h.average(child) / b.average(child) - base
    np.abs(out, out)
    if has_stop:
        out[spec.cell_indices(cube)] += 1.0
    return GridFunction(spec, out)


def half_twisted_block(
    forest: CoronaForest, j: int, system: AccretiveSystem, cube: DyadicCube, h: GridFunction
) -> GridFunction:
    """The per-cube building block of the nested-form analysis:

        sum over non-stopping children P' of (<h>_P' / <b_S'>_P') 1_P'
        minus (<h>_P / <b_S>_P) 1_P,

    with S (resp. S') the corona parents of the cube and its children.  It is
    constant on each child, which is what lets kernel pairings against
    mean-zero functions deeper inside pull it out as a number."""
    spec = forest.spec
    out = np.zeros(spec.n_cells)
    if cube.level >= spec.depth:
        return GridFunction(spec, out)
    s = forest.pi(j, cube)
    b = system.get_b(s)
    members = forest.members(j)
    out[spec.cell_indices(cube)] = -h.average(cube) / b.average(cube)
    for child in cube.children():
        if child in members:
            continue
        out[spec.cell_indices(child)] += h.average(child) / b.average(child)
    return GridFunction(spec, out)


# -- exact identities ------------------------------------------------------------


def decomposition_identity_check(
    ctx: TwistedContext, cube: DyadicCube, child: DyadicCube, f: GridFunction
) -> float:
    """Residual of the three-term splitting of a half-twisted increment:

        <f>_Q'/<b>_Q' - <f>_Q/<b>_Q
          = (<f>_Q' - <f>_Q)/<b>_Q                                   (i)
          + (<b>_Q - <b>_Q') <f>_Q' / <b>_Q^2                        (ii)
          + (<b>_Q - <b>_Q')^2 <f>_Q' / (<b>_Q' <b>_Q^2)             (iii)

    an exact rational identity; returns |lhs - (i)-(ii)-(iii)| as floats."""
    ctx.check_in_q(cube)
    if ctx.family.is_terminal(child) or child.parent() != cube:
        raise ValueError(f"{child} is not a non-terminal child of {cube}")
    fq = f.average(cube)
    fc = f.average(child)
    bq = ctx.avg_b(cube)
    bc = ctx.avg_b(child)
    lhs = fc / bc - fq / bq
    d = bq - bc
    rhs = (fc - fq) / bq + d * fc / bq**2 + d**2 * fc / (bc * bq**2)
    return abs(lhs - rhs)


def delta_decomp_check(ctx: TwistedContext, eps: SignChoice, f: GridFunction) -> float:
    """Max pointwise residual of the terminal-corrected factorization

        sum eps_Q D~_Q f = (Bf) b
                           + sum_T eps_{parent T} <f>_T 1_T b_T
                           - sum_T eps_{parent T} (<f>_parent/<b>_parent) 1_T b

    with Bf the half-twisted transform; exact because the twisted difference
    equals the half-twisted one times b away from terminal children."""
    lhs = transform(ctx, eps, f).values
    bf = half_transform(ctx, eps, f).values
    rhs = bf * ctx.b.values
    spec = ctx.spec
    for t in ctx.family.members:
        parent = t.parent()
        e = eps.get(parent)
        idx = spec.cell_indices(t)
        bt = ctx.family.b_for[t]
        rhs[idx] += e * f.average(t) * bt.values[idx]
        rhs[idx] -= e * (f.average(parent) / ctx.avg_b(parent)) * ctx.b.values[idx]
    return float(np.max(np.abs(lhs - rhs)))


def pi_transform(ctx: TwistedContext, eps: SignChoice, f: GridFunction) -> GridFunction:
    """The operator behind splitting term (ii): per cube and non-terminal child,
    eps_Q (<b>_Q' - <b>_Q) <f>_Q' 1_Q', summed over the derived family."""
    spec = ctx.spec
    out = np.zeros(spec.n_cells)
    for q in ctx.q_cubes():
        e = eps.get(q)
        if e == 0.0:
            continue
        bq = ctx.avg_b(q)
        for child in q.children():
            if ctx.family.is_terminal(child):
                continue
            out[spec.cell_indices(child)] += (
                e * (ctx.avg_b(child) - bq) * f.average(child)
            )
    return GridFunction(spec, out)


def amalgam_transform(ctx: TwistedContext, eps: SignChoice, f: GridFunction) -> GridFunction:
    """The operator behind splitting term (iii): squared b-increments,
    eps_Q (<b>_Q' - <b>_Q)^2 <f>_Q' / (<b>_Q' <b>_Q^2) 1_Q'."""
    spec = ctx.spec
    out = np.zeros(spec.n_cells)
    for q in ctx.q_cubes():
        e = eps.get(q)
        if e == 0.0:
            continue
        bq = ctx.avg_b(q)
        for child in q.children():
            if ctx.family.is_terminal(child):
                continue
            bc = ctx.avg_b(child)
            out[spec.cell_indices(child)] += (
                e * (bc - bq) ** 2 * f.average(child) / (bc * bq**2)
            )
    return GridFunction(spec, out)


def proof_operators(ctx: TwistedContext, eps: SignChoice, test_cube: DyadicCube):
    """Both splitting operators applied to the indicator of ``test_cube``,
    plus their L^1 norms over the cube (the local testing quantities that are
    compared against a constant times |F|)."""
    if not ctx.s0.contains(test_cube):
        raise ValueError(f"{test_cube} is not inside the base cube")
    ind = GridFunction.indicator(ctx.spec, test_cube)
    pi_img = pi_transform(ctx, eps, ind)
    am_img = amalgam_transform(ctx, eps, ind)
    idx = ctx.spec.cell_indices(test_cube)
    cv = ctx.spec.cell_volume
    norms = (
        float(np.sum(np.abs(pi_img.values[idx])) * cv),
        float(np.sum(np.abs(am_img.values[idx])) * cv),
    )
    return pi_img, am_img, norms


def measure_comparison_check(
    ctx: TwistedContext, eps: SignChoice, f: GridFunction, n_lambdas: int = 32
) -> float:
    """Sweep level sets of the half-twisted transform Bf and compare the
    |b|^p mass of E_lambda = {|Bf| >= lambda} (within S0) against
    2^dim delta^-p A^p |E_lambda|.  Returns the worst excess lhs - rhs
    (non-positive when the comparison holds everywhere)."""
    spec = ctx.spec
    bf = np.abs(half_transform(ctx, eps, f).values)
    inside = np.zeros(spec.n_cells, dtype=bool)
    inside[spec.cell_indices(ctx.s0)] = True
    cap = 2.0**spec.dim * ctx.delta**-ctx.p * ctx.A**ctx.p
    bp = np.abs(ctx.b.values) ** ctx.p
    cv = spec.cell_volume
    worst = -np.inf
    for lam in np.linspace(0.0, float(bf[inside].max(initial=0.0)), n_lambdas):
        e_lam = inside & (bf >= lam)
        lhs = float(np.sum(bp[e_lam]) * cv)
        rhs = cap * float(np.count_nonzero(e_lam)) * cv
        worst = max(worst, lhs - rhs)
    return worst
