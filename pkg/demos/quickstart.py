"""Sparse coding, unrolled gradients and a short dictionary-learning run.

Run with ``python3 demos/quickstart.py``.
"""

import numpy as np

from udl import UnrollConfig, lasso_cost, lipschitz, reference_solution
from udl.datagen import SyntheticSpec, gen_synthetic
from udl.metrics import recovery_score
from udl.outer_opt import train_full_batch
from udl.sparse_coding import solve
from udl.unroll_grad import grad_am, grad_ddl, grad_reference

D_true, Z, Y, D0 = gen_synthetic(SyntheticSpec(m=30, n=50, T=1000, seed=1))
y = Y[:, 0]
L = lipschitz(D0).value

# FISTA on one observation, against the polished reference code
z_star = reference_solution(D0, y, 0.1, L=L)
F_star = lasso_cost(D0, z_star, y, 0.1)
for N in (5, 20, 100):
    z, _ = solve(D0, y, UnrollConfig(N, 0.1, "fista"), L=L)
    print(f"N={N:4d}  F(z_N) - F* = {lasso_cost(D0, z, y, 0.1) - F_star:.2e}")

# analytic (AM) vs unrolled (DDL) gradient directions
g_star = grad_reference(D0, y, 0.1, z_star=z_star).matrix
for N in (5, 20, 100):
    cfg = UnrollConfig(N, 0.1, "fista")
    for name, g in (("AM", grad_am(D0, y, cfg, L=L).matrix),
                    ("DDL", grad_ddl(D0, y, cfg, L=L).matrix)):
        cos = np.vdot(g, g_star) / (np.linalg.norm(g) * np.linalg.norm(g_star))
        print(f"N={N:4d}  {name:3s} cosine to g* = {cos:.6f}")

# a few full-batch DDL steps with N = 20
state = train_full_batch(Y, D0, UnrollConfig(20, 0.1, "fista"), mode="ddl",
                         ground_truth=D_true)
print(f"recovery score: init {recovery_score(D0, D_true):.3f} -> "
      f"trained {state.scores[-1]:.3f} after {state.n_steps} steps")
