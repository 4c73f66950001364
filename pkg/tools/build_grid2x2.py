"""Regenerate src/dgqn/data/grid2x2.json, the desk-scale arterial grid.

Run from the repository root:  python tools/build_grid2x2.py

Two east-west arterials cross two minor north-south streets. Each
intersection runs two phases (NS, EW). The fixed plan is a Webster timing
computed from the steady-state lane-group flows at average demand.
"""

import math
from pathlib import Path

import numpy as np

from dgqn.network import FixedPlan, RoadNetwork, grid_network, save_network

OUT = Path(__file__).resolve().parents[1] / "src" / "dgqn" / "data" / "grid2x2.json"
DEMAND = {"EB": 800.0, "WB": 800.0, "NB": 350.0, "SB": 350.0}
AMBER_S = 3.0  # lost time per phase change
MIN_GREEN_S = 10


def steady_flows(net: RoadNetwork) -> np.ndarray:
    """Lane-group arrival rates (veh/s) solving x = e + R^T x."""
    e = np.array([lg.entry_volume_vph / 3600.0 for lg in net.lane_groups])
    R = net.turning_matrix()
    return np.linalg.solve(np.eye(net.N) - R.T, e)


def webster(flows: np.ndarray, net: RoadNetwork, x) -> tuple[int, tuple[int, ...]]:
    ratios = [max(flows[g] / net.lane_groups[g].saturation_flow for g in ph.green_lane_groups)
              for ph in x.phases]
    Y = sum(ratios)
    lost = AMBER_S * len(x.phases)
    cycle = (1.5 * lost + 5.0) / (1.0 - Y)
    cycle = int(math.ceil(cycle / 10.0) * 10)
    effective = cycle - lost
    greens = [max(MIN_GREEN_S, int(round(effective * y / Y + AMBER_S))) for y in ratios]
    greens[-1] = cycle - sum(greens[:-1])
    return cycle, tuple(greens)


def main():
    net = grid_network(2, 2, demand_vph=DEMAND, phases_per_intersection=2)
    flows = steady_flows(net)
    intersections = []
    for x in net.intersections:
        cycle, greens = webster(flows, net, x)
        intersections.append(type(x)(x.id, x.phases, FixedPlan(cycle, greens)))
    header = [
        "2x2 arterial grid: one lane group per approach, two phases (NS, EW) per intersection.",
        f"Boundary demand (veh/h): {DEMAND}; turning split 15% left / 70% through / 15% right.",
        "Fixed plans: Webster cycle (1.5L+5)/(1-Y) rounded up to 10 s, greens split by critical flow ratio.",
        "Critical flow ratios use steady-state lane-group flows at average demand.",
    ]
    out = RoadNetwork(net.lane_groups, tuple(intersections), name="grid2x2", notes=tuple(header))
    save_network(out, OUT)
    for x in out.intersections:
        print(x.id, x.fixed_plan)


if __name__ == "__main__":
    main()
