"""
Baseline, enhanced and randomised training on SimpleDirection
=============================================================

Tabular Q-learning on a discretised SimpleDirection, trained only at the
context origin. The enhanced learner turns each replayed sample into one at a
nearby context; local domain randomisation collects real data there instead.
All three are evaluated on a ring of unseen contexts at radius 0.1.

The full protocol (10 seeds, 20000 episodes) takes about 12 minutes on one
core. Set CMDP_LAB_QUICK=1 for a short run with fewer seeds and episodes;
it is too short for LDR to converge, so only the full run checks the ordering.
"""

# %%
import os

from cmdp_lab.envs import simpledirection_optimal_return
from cmdp_lab.trainer import TrainConfig, compare_modes, ordering_check, ring_contexts

quick = os.environ.get("CMDP_LAB_QUICK") == "1"
config = TrainConfig(episodes=3000, warmup_episodes=300) if quick else TrainConfig()
seeds = range(3 if quick else 10)

# %%
rows, summary = compare_modes(config, seeds)
optimum = sum(simpledirection_optimal_return(10, c) for c in ring_contexts()) / 8
print(f"optimal ring return {optimum:.3f}")
for mode, s in summary.items():
    print(f"{mode:<9} ring {s['ring_mean']:.3f} +- {s['ring_ci95']:.3f}  "
          f"centre {s['center_mean']:.3f}")
print(ordering_check(summary))
