"""
A tour of the queue simulator
=============================

Runs the 15-intersection testbed under its fixed-time plans and looks at
what one episode produces: per-interval delay, queue lengths and the
vehicle bookkeeping.
"""

import numpy as np

from dgqn import sim
from dgqn.network import builtin_seoul15

net = builtin_seoul15()
print(f"{net.name}: {net.N} lane groups, {net.I} intersections, up to {net.max_phases} phases")

# every episode warms up for 400 s under the fixed plans, then runs 20 s decision intervals
cfg = sim.SimConfig()
state = sim.reset(net, cfg, seed=1)
print("clock after warm-up:", state.clock_s, "s")

delays, queues = [], []
while not sim.is_terminal(state)[0]:
    obs = sim.run_fixed_interval(state)
    delays.append(obs.total_delay_h)
    queues.append(obs.max_queue_m)

print(f"{len(delays)} intervals, ended by {sim.is_terminal(state)[1]}")
print(f"total delay {sum(delays):.1f} veh*h, worst queue {max(queues):.0f} m")

# vehicles are never created or lost inside the network
print("entered", state.total_entered, "= in network", state.in_network, "+ exited", state.total_exited)

# the busiest lane groups at the end of the episode
worst = np.argsort(state.queue_veh)[::-1][:5]
for i in worst:
    lg = net.lane_groups[i]
    print(f"  lane group {i:2d} ({lg.label}) at intersection {lg.intersection_id}: {state.queue_veh[i]} veh")
