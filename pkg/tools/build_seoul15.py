"""Regenerate src/dgqn/data/seoul15.json from the published testbed tables.

Run from the repository root:  python tools/build_seoul15.py

The published material gives entry volumes, turning percentages per approach
and fixed signal plans, but neither the map geometry nor the lane-group list.
Everything else below is a documented reconstruction; the rules are copied
into the JSON ``_header`` so the file is self-describing.
"""

import json
import math
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "dgqn" / "data" / "seoul15.json"

APPROACHES = ("EB", "WB", "NB", "SB")
# turning percentages (left, through, right); None where the movement does not exist
TURNING = {
    1: {"EB": (83, None, 17), "WB": (24, None, 76), "NB": (None, 85, 15), "SB": (14, 58, 28)},
    2: {"EB": (4, 80, 16), "WB": (9, 86, 5), "NB": (26, 29, 45), "SB": (59, 23, 18)},
    3: {"EB": (11, 62, 27), "WB": (20, 73, 7), "NB": (65, 10, 25), "SB": (33, 35, 32)},
    4: {"EB": (57, 53, None), "WB": (None, None, None), "NB": (46, 55, None), "SB": (44, None, 56)},
    5: {"EB": (13, 87, None), "WB": (None, 82, 18), "NB": (None, None, None), "SB": (49, None, 51)},
    6: {"EB": (20, 6, 74), "WB": (55, 19, 26), "NB": (43, 46, 11), "SB": (11, 83, 6)},
    7: {"EB": (11, 81, 8), "WB": (93, None, 7), "NB": (None, None, 100), "SB": (35, 14, 51)},
    8: {"EB": (None, 81, 19), "WB": (3, 69, 28), "NB": (37, 23, 40), "SB": (19, 71, 10)},
    9: {"EB": (6, 87, 7), "WB": (7, 87, 6), "NB": (68, None, 32), "SB": (7, None, 93)},
    10: {"EB": (7, 93, None), "WB": (None, 83, 17), "NB": (None, None, None), "SB": (67, None, 33)},
    11: {"EB": (None, 94, 6), "WB": (None, None, None), "NB": (None, 100, None), "SB": (None, 53, 47)},
    12: {"EB": (37, 45, 18), "WB": (26, 32, 42), "NB": (10, 59, 31), "SB": (25, 38, 37)},
    13: {"EB": (71, None, 29), "WB": (None, None, 100), "NB": (16, 70, 14), "SB": (None, 59, 41)},
    14: {"EB": (None, None, 100), "WB": (46, None, 54), "NB": (None, 82, 18), "SB": (15, 82, 3)},
    15: {"EB": (None, 31, 69), "WB": (None, 74, 26), "NB": (11, 73, 16), "SB": (2, 81, 17)},
}
# entry volumes (veh/h) by (intersection, approach); the two unnumbered sources are attached
# to the nearest approach of the matching heading that has no signalised upstream neighbour
ENTRIES = [
    (1, "EB", 81, "intersection 1 east-bound"),
    (1, "SB", 2506, "intersection 1 south-bound"),
    (2, "SB", 259, "intersection 2 south-bound"),
    (3, "SB", 169, "intersection 3 south-bound"),
    (4, "SB", 494, "intersection 4 south-bound"),
    (5, "EB", 2511, "intersection 5 east-bound"),
    (5, "SB", 352, "intersection 5 south-bound"),
    (7, "NB", 13, "intersection 7 north-bound"),
    (9, "NB", 236, "intersection 9 north-bound"),
    (10, "WB", 3107, "intersection 10 west-bound"),
    (12, "WB", 972, "intersection 12 west-bound"),
    (13, "NB", 485, "intersection 13 north-bound"),
    (14, "NB", 871, "intersection 14 north-bound"),
    (15, "WB", 231, "intersection 15 west-bound"),
    (15, "NB", 457, "intersection 15 north-bound"),
    (6, "SB", 183, "fixed-operation signal, south-bound"),
    (11, "NB", 575, "roundabout, north-bound"),
]
# fixed plans: (phase-1 axis, durations); cycle = sum(durations)
PLANS = {
    1: ("NS", (82, 48, 40)),
    2: ("NS", (40, 80)),
    3: ("EW", (45, 20, 37, 18)),
    4: ("NS", (55, 35, 30)),
    5: ("EW", (120, 39, 21)),
    6: ("EW", (37, 56, 51, 36)),
    7: ("EW", (93, 40, 37)),
    8: ("EW", (82, 49, 49)),
    9: ("EW", (109, 25, 26)),
    10: ("EW", (107, 19, 44)),
    11: ("NS", (100, 50, 40)),
    12: ("EW", (45, 25, 40, 25)),
    13: ("NS", (107, 33)),
    14: ("NS", (64, 39, 37)),
    15: ("EW", (30, 55, 25, 30)),
}
CYCLES = {1: 170, 2: 120, 3: 120, 4: 120, 5: 180, 6: 180, 7: 170, 8: 180, 9: 160,
          10: 170, 11: 190, 12: 135, 13: 140, 14: 140, 15: 140}
# (row, col) on a 3 x 5 layout, row 0 to the north
LAYOUT = {5: (0, 0), 1: (0, 1), 2: (0, 2), 3: (0, 3), 4: (0, 4),
          6: (1, 0), 8: (1, 1), 11: (1, 2), 12: (1, 3), 10: (1, 4),
          7: (2, 0), 9: (2, 1), 13: (2, 2), 14: (2, 3), 15: (2, 4)}
HEADING = {"NB": (-1, 0), "SB": (1, 0), "EB": (0, 1), "WB": (0, -1)}  # (drow, dcol)
TURNS = {"NB": ("WB", "NB", "EB"), "SB": ("EB", "SB", "WB"),
         "EB": ("NB", "EB", "SB"), "WB": ("SB", "WB", "NB")}
AXIS = {"EB": "EW", "WB": "EW", "NB": "NS", "SB": "NS"}
N_EXCLUSIVE_LEFT = 21
LANE_SAT_VPS = 0.5
TARGET_VC = 0.70
AMBER_S = 3

HEADER = [
    "Reconstructed 15-intersection testbed; regenerate with tools/build_seoul15.py.",
    "Entry volumes, turning percentages and fixed plans follow the published tables; the map is not "
    "published, so intersections sit on a 3x5 layout (north row 5 1 2 3 4, middle 6 8 11 12 10, "
    "south 7 9 13 14 15).",
    "A movement heading towards a neighbour that has an approach with that heading feeds that approach; "
    "every other movement leaves the network.",
    "Lane groups: one per existing approach (56) plus an exclusive left-turn lane group for the 21 approaches "
    "with the largest left-turn share among approaches that have both a left and a through movement "
    "(ties broken by intersection number, then EB/WB/NB/SB) -> 77 lane groups.",
    "Vehicles joining an approach pick its left lane group with the approach's left-turn share.",
    "Turning percentages are normalised per approach (some published rows do not sum to 100).",
    "Unnumbered sources: the fixed-operation south-bound entry feeds intersection 6 SB, the roundabout "
    "north-bound entry feeds intersection 11 NB.",
    "Fixed plans of intersections 5-8 are realigned so durations sum to the published cycles "
    "(5: 120/39/21, 6: 37/56/51/36, 7: 93/40/37); intersection 8 keeps its 82 s first phase and splits "
    "the remaining 98 s evenly.",
    "Phases: per axis a through group and, if present, a left group; groups are merged "
    "(smallest-flow left group into its axis) or split (largest multi-approach group, by approach) until the "
    "count matches the published number of phases. Published durations are then matched to groups by rank "
    "(longest phase to the group whose busiest lane group carries the most steady-state flow).",
    "Saturation flow: 0.5 veh/s per lane, lanes chosen as the smallest count keeping the fixed plan's "
    "volume/capacity ratio at or below 0.70 (effective green = duration - 3 s amber). Lengths default to 150 m.",
]


def normalised(triple):
    vals = [0.0 if v is None else float(v) for v in triple]
    s = sum(vals)
    return [v / s for v in vals] if s else vals


def main():
    exists = {(k, a): any(v is not None for v in TURNING[k][a]) for k in TURNING for a in APPROACHES}
    reverse = {pos: k for k, pos in LAYOUT.items()}

    def neighbour(k, heading):
        r, c = LAYOUT[k]
        dr, dc = HEADING[heading]
        return reverse.get((r + dr, c + dc))

    candidates = []
    for k in sorted(TURNING):
        for a in APPROACHES:
            left, through, _ = TURNING[k][a]
            if left is not None and through is not None:
                candidates.append((-left, k, APPROACHES.index(a), a))
    candidates.sort()
    exclusive_left = {(k, a) for _, k, _, a in candidates[:N_EXCLUSIVE_LEFT]}

    # lane group table
    lgs = []  # dicts with intersection number, approach, kind, movements
    index = {}
    for k in sorted(TURNING):
        for a in APPROACHES:
            if not exists[(k, a)]:
                continue
            left, through, right = TURNING[k][a]
            if (k, a) in exclusive_left:
                kinds = [("main", ("T", "R")), ("left", ("L",))]
            else:
                kinds = [("main", ("L", "T", "R"))]
            for kind, moves in kinds:
                present = [m for m, v in zip("LTR", (left, through, right)) if v is not None and m in moves]
                index[(k, a, kind)] = len(lgs)
                lgs.append({"k": k, "a": a, "kind": kind, "moves": present})
    assert len(lgs) == 77, len(lgs)

    def approach_split(k, a):
        """Lane-group shares for vehicles joining approach a of intersection k."""
        shares = normalised(TURNING[k][a])
        if (k, a) in exclusive_left:
            return [(index[(k, a, "left")], shares[0]), (index[(k, a, "main")], 1.0 - shares[0])]
        return [(index[(k, a, "main")], 1.0)]

    downstream = []
    for lg in lgs:
        k, a = lg["k"], lg["a"]
        shares = dict(zip("LTR", normalised(TURNING[k][a])))
        total = sum(shares[m] for m in lg["moves"])
        out = {}
        for m in lg["moves"]:
            w = shares[m] / total
            heading = TURNS[a]["LTR".index(m)]
            nb = neighbour(k, heading)
            if nb is not None and exists[(nb, heading)]:
                for to, s in approach_split(nb, heading):
                    out[to] = out.get(to, 0.0) + w * s
            else:
                out[None] = out.get(None, 0.0) + w
        rows = [[to, rate] for to, rate in out.items() if rate > 0]
        drift = 1.0 - sum(r for _, r in rows)
        rows[-1][1] += drift
        downstream.append(rows)

    entry_rows = []
    entry_vph = [0.0] * len(lgs)
    for k, a, vph, label in ENTRIES:
        for to, s in approach_split(k, a):
            v = vph * s
            entry_vph[to] += v
            entry_rows.append({"lane_group": to, "vph": v, "source": label})

    # steady-state flows
    n = len(lgs)
    R = np.zeros((n, n))
    for i, rows in enumerate(downstream):
        for to, rate in rows:
            if to is not None:
                R[i, to] += rate
    flow = np.linalg.solve(np.eye(n) - R.T, np.array(entry_vph))

    # phases
    phases_out = {}
    for k in sorted(TURNING):
        first_axis, durations = PLANS[k]
        axes = [first_axis, "EW" if first_axis == "NS" else "NS"]
        groups = []
        for ax in axes:
            mains = [index[(k, a, "main")] for a in APPROACHES if AXIS[a] == ax and exists[(k, a)]]
            lefts = [index[(k, a, "left")] for a in APPROACHES if AXIS[a] == ax and (k, a) in exclusive_left]
            if mains:
                groups.append({"axis": ax, "kind": "through", "lgs": mains})
            if lefts:
                groups.append({"axis": ax, "kind": "left", "lgs": lefts})
        target = len(durations)
        while len(groups) > target:
            lefts = [g for g in groups if g["kind"] == "left"]
            g = min(lefts, key=lambda g: flow[g["lgs"]].sum())
            host = next(h for h in groups if h["axis"] == g["axis"] and h["kind"] == "through")
            host["lgs"] = host["lgs"] + g["lgs"]
            groups.remove(g)
        while len(groups) < target:
            splittable = [g for g in groups if len({lgs[i]["a"] for i in g["lgs"]}) > 1]
            g = max(splittable, key=lambda g: flow[g["lgs"]].sum())
            apps = sorted({lgs[i]["a"] for i in g["lgs"]}, key=APPROACHES.index)
            first = {"axis": g["axis"], "kind": g["kind"], "lgs": [i for i in g["lgs"] if lgs[i]["a"] == apps[0]]}
            second = {"axis": g["axis"], "kind": g["kind"], "lgs": [i for i in g["lgs"] if lgs[i]["a"] != apps[0]]}
            pos = groups.index(g)
            groups[pos:pos + 1] = [first, second]
        # longest published phase goes to the group with the heaviest lane group, and so on
        by_demand = sorted(groups, key=lambda g: -flow[g["lgs"]].max())
        by_duration = sorted(range(target), key=lambda j: (-durations[j], j))
        ordered = [None] * target
        for j, g in zip(by_duration, by_demand):
            ordered[j] = g
        phases_out[k] = [sorted(g["lgs"]) for g in ordered]
        assert sum(durations) == CYCLES[k], k

    sat = []
    for i, lg in enumerate(lgs):
        k = lg["k"]
        _, durations = PLANS[k]
        green = sum(d - AMBER_S for d, p in zip(durations, phases_out[k]) if i in p)
        g_ratio = green / CYCLES[k]
        lanes = max(1, math.ceil(flow[i] / (TARGET_VC * 3600 * LANE_SAT_VPS * g_ratio)))
        sat.append(LANE_SAT_VPS * lanes)

    kid = {k: j for j, k in enumerate(sorted(TURNING))}
    doc = {
        "name": "seoul15",
        "_header": HEADER,
        "lane_groups": [
            {
                "id": i,
                "intersection": kid[lg["k"]],
                "label": f"I{lg['k']} {lg['a']}-{'left' if lg['kind'] == 'left' else '/'.join(lg['moves'])}",
                "length_m": 150.0,
                "sat_flow_vps": sat[i],
                "downstream": [{"to": to, "rate": rate} for to, rate in downstream[i]],
                "entry_vph": entry_vph[i],
            }
            for i, lg in enumerate(lgs)
        ],
        "intersections": [
            {
                "id": kid[k],
                "label": f"intersection {k}",
                "phases": phases_out[k],
                "fixed_plan": {"cycle_s": CYCLES[k], "durations": list(PLANS[k][1])},
            }
            for k in sorted(TURNING)
        ],
        "entries": entry_rows,
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {OUT} ({len(lgs)} lane groups)")


if __name__ == "__main__":
    main()
