"""
Context sample enhancement on continuous systems
================================================

Three views of the same first-order idea: exact error laws on the
SimpleDirection task, sensitivity checks on the pendulum, and the
regularisation reading of the augmented loss.
"""

# %%
import numpy as np

from cmdp_lab.cli import parse_grid, simpledir_errors
from cmdp_lab.cse import (
    ContextSample,
    cse_augment,
    polynomial_toy,
    polynomial_toy_jacobian_term,
    regularization_equivalence_check,
)
from cmdp_lab.envs import PendulumGoal, pendulum_gradcheck
from cmdp_lab.tabular import fit_loglog

# %%
# SimpleDirection: the reward is bilinear in state and context, so the
# linearised rollout misses exactly |dc|^2 per step.
rows = simpledir_errors(parse_grid("log:1e-4:1e-1:50"), 10, 0.9,
                        [0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0])
dc, err, closed = map(np.array, zip(*rows))
print("max |error - closed form|:", np.max(np.abs(err - closed)))
print("fitted slope:", fit_loglog(dc, err)[0])

# %%
# Pendulum: analytic sensitivities against central differences.
rep = pendulum_gradcheck(n_trials=100, steps=50, seed=0)
print({k: rep[k] for k in ("trials", "max_rel_error", "mean_rel_error")})

# %%
# One-step augmentation error on the pendulum shrinks quadratically.
env = PendulumGoal()
s, u, c0 = np.array([0.8, -0.5]), 0.7, np.array([3.0, 1.1, 0.9, 0.2])
x = ContextSample.from_step(s, u, c0, env.step(s, u, c0))
direction = np.array([1.0, -0.5, 0.3, 0.2]) / np.linalg.norm([1.0, -0.5, 0.3, 0.2])
for eps in (4e-2, 2e-2, 1e-2, 5e-3):
    r_bar, s_bar = cse_augment(x, eps * direction)
    true = env.step(s, u, c0 + eps * direction)
    gap = abs(true.reward - r_bar) + np.linalg.norm(true.next_state - s_bar)
    print(f"eps {eps:7.4f}  one-step error {gap:.3e}")

# %%
# Regularisation view: for small Gaussian perturbations the augmented loss
# matches a penalty on the mismatch of context Jacobians.
F, f, dF, df = polynomial_toy()
L, J = regularization_equivalence_check(F, f, dF, df, np.zeros(2), 1e-3, 1_000_000,
                                        np.random.default_rng(0))
closed = polynomial_toy_jacobian_term(1e-3, 2.0, 2)
print(f"loss {L:.4e}  penalty {J:.4e}  closed form {closed:.4e}")
