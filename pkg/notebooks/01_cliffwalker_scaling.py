"""
Linearised Bellman error on the cliff grid
==========================================

Build the 5 x 6 cliff grid at c0 = 0.1, solve the exact and the linearised
(context-enhanced) Bellman equations at nearby contexts, and look at how the
gap between the two Q tables shrinks with the size of the perturbation.
"""

# %%
import numpy as np

from cmdp_lab.bounds import cliffwalker_reduced_bound
from cmdp_lab.tabular import (
    build_cliffwalker,
    default_eval_policy,
    error_scaling_experiment,
    q_gap,
    scaling_perturbations,
)

# %%
# 100 log-spaced perturbations between 1e-4 and 1e-1; the slope is fitted on
# the 10 smallest, where the quadratic term dominates.
dcs = scaling_perturbations(100)
for variant in ("A", "B"):
    mdp = build_cliffwalker(5, 6, variant, c=0.1, gamma=0.9)
    for mode in ("policy_eval", "control"):
        res = error_scaling_experiment(mdp, dcs, mode=mode, fit_points=10)
        print(f"variant {variant} {mode:<11} slope {res.slope:.4f}  r^2 {res.r_squared:.6f}")

# %%
# A few rows of the table. Halving the perturbation divides the error by four.
mdp = build_cliffwalker(5, 6, "A", c=0.1, gamma=0.9)
pi = default_eval_policy(mdp)
print(f"{'dc':>10} {'q_error':>12} {'bound':>12}")
for dc in (1e-3, 2e-3, 4e-3, 8e-3, 1.6e-2):
    err = q_gap(mdp, mdp.c0 + dc, pi)
    print(f"{dc:10.4g} {err:12.4e} {cliffwalker_reduced_bound(mdp, mdp.c0 + dc):12.4e}")

# %%
# Transitions of this grid are affine in the context, so only the reward
# curvature enters the second-order bound and it stays well above the error.
ratios = [q_gap(mdp, mdp.c0 + dc, pi) / cliffwalker_reduced_bound(mdp, mdp.c0 + dc)
          for dc in dcs]
print("largest error / bound ratio:", np.max(ratios))
