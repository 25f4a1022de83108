"""
Randomised checks of the stability bounds
=========================================

Draw small random MDP pairs and context families, compute exact Q gaps with a
linear solve, and compare them to the closed-form bounds.
"""

# %%
from cmdp_lab.bounds import certify_policy_transfer, certify_theorem1, certify_theorem3

# %%
# Lipschitz stability between two arbitrary MDPs sharing state and action
# spaces. Draws whose discount breaks the contraction premise are redrawn and
# counted separately.
rep = certify_theorem1(n_trials=200, n_states=5, n_actions=3, seed=0)
print({k: rep[k] for k in ("trials", "passed", "discarded_premise", "min_slack_ratio")})

# %%
# Second-order bound for the linearised Bellman equation on a smooth
# softmax family of transitions. Its constants are large, so most draws with
# a sizeable perturbation fall outside the premise; the ones that remain pass
# with room to spare.
rep = certify_theorem3(n_trials=30, n_states=3, n_actions=2, seed=0)
print({k: rep[k] for k in ("trials", "passed", "discarded_premise", "min_slack_ratio")})

# %%
# Policy transfer: the greedy policy of the linearised MDP loses at most twice
# the Q gap compared with the true optimum.
rep = certify_policy_transfer(n_mdps=50, seed=0)
print(rep)
