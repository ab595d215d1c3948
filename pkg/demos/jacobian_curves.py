"""Distance of the unrolled Jacobian to its limit, full and truncated depth.

Writes nothing; prints a coarse table for one synthetic observation.
"""

import numpy as np

from udl import UnrollConfig, lipschitz, reference_solution
from udl.datagen import SyntheticSpec, gen_synthetic
from udl.unroll_grad import jacobian_fixed_point, propagate_jacobian

_, _, Y, D0 = gen_synthetic(SyntheticSpec(m=30, n=50, T=1, seed=3))
y = Y[:, 0]
L = lipschitz(D0, tol=1e-12, max_iters=10_000).value
z_star = reference_solution(D0, y, 0.1, L=L)
J_star = jacobian_fixed_point(D0, z_star, y).values

print("   N   full     K=20")
for N in (20, 50, 100, 300, 1000):
    row = []
    for K in (None, 20):
        _, J = propagate_jacobian(D0, y, UnrollConfig(N, 0.1, "ista", truncation=K), L=L)
        row.append(np.linalg.norm(J.values - J_star))
    print(f"{N:5d}  {row[0]:.2e}  {row[1]:.2e}")
