"""
Anderson acceleration versus plain fixed-point iteration
=========================================================

A contractive affine map has a unique fixed point we can compute directly,
which makes it a convenient yardstick for the two solvers.
"""

import numpy as np

from cdeq.numeric import make_rng
from cdeq.solver import SolverConfig, solve

rng = make_rng(0)
n = 10

# symmetric positive semi-definite A with spectral radius 0.9
Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
lam = rng.uniform(0.0, 0.9, n)
lam[np.argmax(lam)] = 0.9
A = (Q * lam) @ Q.T
b = rng.standard_normal(n)
z_star = np.linalg.solve(np.eye(n) - A, b)


def f(z, x):
    return A @ z + b


cfg = SolverConfig(m=5, tol=1e-8, max_iter=500)
aa = solve(f, None, np.zeros(n), cfg, method="anderson")
pc = solve(f, None, np.zeros(n), cfg, method="picard")

print(f"anderson: {aa.iterations_used:4d} iterations, error {np.linalg.norm(aa.final - z_star):.2e}")
print(f"picard:   {pc.iterations_used:4d} iterations, error {np.linalg.norm(pc.final - z_star):.2e}")

###############################################################################
# The scalar map z -> 0.5 z + 1 is solved exactly after two Anderson steps:
# the residuals at z = 0 and z = 1 are 1 and 0.5, the weights are (-1, 2).

tr = solve(lambda z, x: 0.5 * z + 1.0, None, np.array([0.0]), SolverConfig(ridge=0.0), fixed_iterations=2)
print("scalar iterates:", [float(z[0]) for z in tr.states], "weights:", tr.alphas[-1])
