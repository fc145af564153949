"""Accretive systems: one test function per cube, mean one, norm capped.

Every b_Q is supported on Q with integral exactly |Q| and p-norm at most
A |Q|^(1/p).  Systems are deterministic in (kind, seed, cube) and cached.
"""

import numpy as np

from dytb import AccretiveSystem, DyadicCube, GridSpec, validate

spec = GridSpec(1, 4)
root = spec.root()

constant = AccretiveSystem(spec, "constant", p=2.0, A=1.5)
print("constant kind:", constant.get_b(root).values[:4], "...")
print("validate:", validate(constant, root))

# two-value: 1 +/- s split over a pseudo-random half of the cells
twoval = AccretiveSystem(spec, "two-value", p=2.0, A=1.5, seed=5, params={"s": 0.5})
b = twoval.get_b(root)
print("\ntwo-value cells:", b.values)
print("mean (exact):", b.average(root))
ok, measured = validate(twoval, root)
print("measured constant:", measured, "closed form:",
      (((1.5) ** 2 + (0.5) ** 2) / 2) ** 0.5)

# signed: 2 on half the cells, 0 on the rest; minimal 2-constant sqrt(2)
signed = AccretiveSystem(spec, "signed", p=2.0, A=1.5)
print("\nsigned cells:", signed.get_b(root).values)
print("measured constant:", validate(signed, root)[1], "(sqrt 2 =", np.sqrt(2), ")")

# random: values inside [1-amp, 1+amp], recentred to mean exactly one
rand_sys = AccretiveSystem(spec, "random", p=2.0, A=1.6, seed=9, params={"amp": 0.6})
vals = rand_sys.get_b(DyadicCube(1, (1,))).values
print("\nrandom kind on [1/2,1):", np.round(vals[8:], 3))
print("value range:", vals[8:].min(), "-", vals[8:].max())

# determinism: the same (seed, cube) always yields the same function
again = AccretiveSystem(spec, "random", p=2.0, A=1.6, seed=9, params={"amp": 0.6})
print("deterministic:", bool(np.array_equal(vals, again.get_b(DyadicCube(1, (1,))).values)))
