"""
Inside the graph Q-network
==========================

Builds the model for the 2x2 desk grid, lists its parameters, and checks
the two properties the rest of the code leans on: learned adjacencies are
row-stochastic on the lane-group graph, and the joint greedy action is a
per-intersection argmax.
"""

import itertools

import numpy as np

from dgqn import baselines, model
from dgqn.network import builtin_grid2x2

net = builtin_grid2x2()
dgqn = baselines.make_model("dgqn", net)
params = dgqn.init_params(seed=0)

d = model.describe(dgqn, params)
for group, n in d["parameter_counts"].items():
    print(f"{group:<10} {n:>8,d}")
print(f"{'total':<10} {d['total_parameters']:>8,d}")

# the two baselines are widened until their size matches
for kind in ("dqn_ogcn", "dqn_fc"):
    other = baselines.make_model(kind, net).init_params(0)
    print(kind, other.num_parameters(), f"({other.num_parameters() / params.num_parameters() - 1:+.2%})")

# zero logits give uniform weights over each lane group's neighbours
A = dgqn.adjacency(params.params, 1, 0)
print("row sums:", np.unique(np.round(A.sum(axis=1), 12)))
print("neighbours of lane group 0:", np.flatnonzero(A[0]), "weights", A[0][A[0] > 0])

# a random state; the value matrix has one row per intersection
rng = np.random.default_rng(0)
S = rng.uniform(size=(net.N, 2, 3))
V = model.q_values(dgqn, S, params.params)
action, q = model.greedy_joint_action(V)
print("value matrix:\n", np.round(V, 3))
print("greedy joint action", action, "q", round(q, 4))

# brute force over all 2^4 joint actions agrees
best = max(itertools.product(range(V.shape[1]), repeat=V.shape[0]), key=lambda a: model.joint_q(V, a))
print("enumeration gives", best, round(model.joint_q(V, best), 4))
