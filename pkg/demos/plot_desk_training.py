"""
A short training run
====================

Trains the graph Q-network for a few minutes on the 2x2 grid and compares
its greedy policy with the fixed-time plans on the same demand draws.
Set EPISODES higher for a longer run; the defaults keep this demo quick.
"""

import os

from dgqn import evaluation, trainer
from dgqn.network import builtin_grid2x2

EPISODES = int(os.environ.get("DEMO_EPISODES", "3"))
EVAL_EPISODES = int(os.environ.get("DEMO_EVAL_EPISODES", "3"))

net = builtin_grid2x2()
config = trainer.RunConfig(network="grid2x2", actors=2, seed=0, out_dir="runs/demo",
                           hyper=trainer.desk_hyper(max_episodes=EPISODES, replay_warm_start=64))


def report(e):
    print(f"actor {e.actor_id} episode {e.episode}: reward {e.mean_reward:+.2f}, "
          f"delay {e.total_delay_h:.1f} h, {e.termination_cause}, eps {e.epsilon:.3f}")


result = trainer.train(config, net, write=False, progress=report)
print("shared updates:", result.shared.updates)

# both controllers see the same perturbed demand in each evaluation episode
learned = evaluation.evaluate(net, EVAL_EPISODES, seed=0, model=result.model,
                              params=result.shared.incumbent.params)
fixed = evaluation.evaluate(net, EVAL_EPISODES, seed=0)
for r in (learned, fixed):
    agg = r.aggregates()
    print(f"{r.model:>6}: mean delay {agg['mean_total_delay_h']:.1f} h, "
          f"mean max queue {agg['mean_max_queue_m']:.0f} m, {agg['termination_causes']}")
