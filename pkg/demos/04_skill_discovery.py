"""End-to-end expert-count discovery on a planted-skill task.

The task plants four orthogonal skill directions, each with its own linear
labeling rule; no single linear model can label all four clusters. Training
starts with two experts and lets the adaptive process decide how many are
needed. A fixed top-k baseline trained on the same task gives the reference
accuracy.
"""

import numpy as np

from dynmoe.adaptive import AdaptConfig
from dynmoe.harness import TrainConfig, gen_task, run_baseline, train_loop

task = gen_task(n_skills=4, d=16, n_samples=4000, seed=7)
print(f"task: {task.n_skills} skills in {task.d} dims, {task.n_samples} samples")
print(f"  within-skill cosine >= {task.within_cosine_floor:.2f}, "
      f"cross-skill <= {task.cross_cosine_ceiling:.2f} by construction\n")

cfg = TrainConfig(
    steps=2000,
    batch_size=32,
    learning_rate=0.02,
    seed=0,
    eval_every=500,
    hidden=16,
    init_experts=2,
    adapt=AdaptConfig(max_experts=8, check_interval=100),
)

result = train_loop(task, cfg)
print("adaptive run: expert count over time")
for step, counts in result.k_trajectory:
    bar = "#" * sum(counts)
    print(f"  step {step:5d}: K={sum(counts)} {bar}")
print(f"final accuracy {result.final_accuracy:.4f}, "
      f"average experts per token {result.mean_k:.2f}, "
      f"activated params {result.activated_params:.0f}")

print("\nevents the adaptive process logged:")
for event in result.adapt_events[:6]:
    print(f"  step {event['step']:5d}: removed={event['removed_experts']} "
          f"added={event['added']} -> K={event['new_k_total']}")
if len(result.adapt_events) > 6:
    print(f"  ... {len(result.adapt_events) - 6} more")

baseline = run_baseline(task, TrainConfig(steps=2000, seed=0, hidden=16,
                                          eval_every=500, adapt=None),
                        n_experts=4, top_k=2)
print(f"\nfixed K=4, top-2 baseline: accuracy {baseline.final_accuracy:.4f}, "
      f"activated params {baseline.activated_params:.0f}")
print(f"adaptive model found K={sum(result.k_trajectory[-1][1])} for a "
      f"{task.n_skills}-skill task on its own")
