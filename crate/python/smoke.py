"""Smoke test for the conelattice Python module.

Build first:  pip install --no-build-isolation ./crates/conelattice-py
"""

import math

import conelattice as cl

cfg = cl.Configuration.random(2, math.pi / 6, 7)
assert cfg.dim == 2
axis, apex = cfg.cone_at([3, -1])
assert abs(math.hypot(*axis) - 1.0) < 1e-12 and apex >= math.pi / 6 - 1e-12

again = cl.Configuration.from_json(cfg.to_json())
assert again.cone_at([3, -1]) == (axis, apex)

cones = cl.reference_cones(2, math.pi / 6)
assert len(cones) == 19 and all(abs(a - math.pi / 18) < 1e-15 for _, a in cones)

edges = cl.graph_edges(cfg, [0, 0], 3.0)
assert edges, "cone graph has edges"

frac = cl.Kernel.fractional(2, 1.0)
assert abs(frac([0, 0], [3, 4]) - 5.0 ** -3) < 1e-15
ratio, probe = cl.comparability_ratio(frac, [0, 0], 4.0, 1.0, 1.5, budget=20)
assert ratio == 1.0, (ratio, probe)

cone = cl.Kernel.cone(cfg, 1.0, 2.0)
e = cl.energy(lambda p: float(p[0]), cone, [0, 0], 4.0, 1.5)
assert e > 0.0

fam = cl.PathFamily(cfg, [0, 0], 6.0, 1.5)
assert all(fam.verify().values()), fam.verify()
p = fam.path([-6, 0], [6, 0])
assert p[0] == [-6, 0] and p[-1] == [6, 0]
c, kappa = cl.chaining_constant(fam, cone, functions=2)
assert c > 0.0 and kappa >= 1.0

print(f"ok: L={len(cones)} edges={len(edges)} B={fam.B} M={fam.M} lambda={fam.lambda_:.3f} c={c:.3e}")
