"""The Carleman weight family and its desk-scale diagnostics.

Three things are on display:

1. the weight scaffold psi: positive inside, zero at both ends, a single
   critical point centered in G1, nonvanishing slope elsewhere;
2. the coefficient asymptotics of the weighted identity: the relative
   deviation of the coefficient A from its leading term lam^2 mu^2 phi^2
   a psi'^2 collapses as mu grows, B turns positive outside G1, and c11
   clears its ellipticity margin;
3. the weighted inequality ratios: bounded at the parameter threshold, with
   medians that do not degrade as lambda is pushed above it.
"""

import numpy as np

from spcontrol import AdaptedField, ProblemCoefficients, TreeStepper, build_grid, build_tree
from spcontrol.carleman import (build_psi, carleman_ratio_backward, eval_weights,
                                lambda_threshold, leading_order_check)

grid = build_grid(L=1.0, N=32, g0=(0.3, 0.8), g1=(0.45, 0.65))
tree = build_tree(M=8, T=1.0)
psi = build_psi(grid)

print(f"psi: max = {psi.psi.max():.4f} at x_c = {psi.x_c}, "
      f"min slope outside G1 = {np.abs(psi.dpsi[~grid.g1_mask]).min():.4f}")

print("\nleading-order deviations (lambda at threshold for each mu):")
print(f"{'mu':>4} | {'dev A':>10} | {'min B / lead':>12} | {'c11 margin':>10}")
for row in leading_order_check(psi, 1.0, [8.0, 16.0, 32.0, 64.0], tree.T, grid):
    print(f"{row.mu:4.0f} | {row.dev_A:10.3e} | {row.min_B:12.4f} | {row.c11_margin:10.4f}")

print("\nweighted inequality ratios (backward equation, random sources, 20 samples):")
coeffs = ProblemCoefficients(a=1.0, a1=1.0, a2=0.5, b1=0.5, b2=0.5)
st = TreeStepper(grid, tree, coeffs)
rng = np.random.default_rng(0)
samples = [(rng.standard_normal((tree.n_nodes(tree.M), grid.N)),
            AdaptedField.random(tree, grid.N, rng, n_levels=tree.M),
            AdaptedField.random(tree, grid.N, rng, n_levels=tree.M))
           for _ in range(20)]
mu = 1.0
lam0 = lambda_threshold(mu, psi, tree.T)
for mult in (1.0, 2.0, 4.0):
    weights = eval_weights(psi, mult * lam0, mu, tree)
    ratios = [carleman_ratio_backward(grid, tree, coeffs, weights, zT, mode="sources",
                                      f0=f0, f_div=fd, stepper=st).ratio
              for zT, f0, fd in samples]
    print(f"  lambda = {mult:.0f} x threshold: median ratio = {np.median(ratios):.4f}, "
          f"max = {max(ratios):.4f}")
