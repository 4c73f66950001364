"""Road-network topology: lane groups, intersections, phases and the adjacency mask.

A network is a directed graph whose nodes are lane groups. Vehicles discharged
from a lane group are routed to its downstream lane groups by turning rate; a
downstream entry whose target is ``None`` leaves the network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

RATE_TOL = 1e-9
DEFAULT_LENGTH_M = 150.0
DEFAULT_SAT_FLOW_VPS = 0.5
MAX_PHASES = 4


class NetworkError(ValueError):
    """A network file could not be parsed or violates a network invariant."""

    def __init__(self, message: str, where: Optional[str] = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class LaneGroup:
    id: int
    intersection_id: int
    label: str
    length_m: float = DEFAULT_LENGTH_M
    saturation_flow: float = DEFAULT_SAT_FLOW_VPS
    # (target lane group or None for an exit, base turning rate)
    downstream: tuple[tuple[Optional[int], float], ...] = ()
    entry_volume_vph: float = 0.0

    @property
    def is_entry(self) -> bool:
        return self.entry_volume_vph > 0.0

    @property
    def is_sink(self) -> bool:
        return len(self.downstream) == 0


@dataclass(frozen=True)
class Phase:
    green_lane_groups: frozenset[int]


@dataclass(frozen=True)
class FixedPlan:
    cycle_s: int
    durations: tuple[int, ...]

    def phase_at(self, clock_s: float) -> int:
        """Index of the phase whose window contains ``clock_s mod cycle``."""
        t = clock_s % self.cycle_s
        start = 0
        for k, d in enumerate(self.durations):
            if t < start + d:
                return k
            start += d
        return len(self.durations) - 1


@dataclass(frozen=True)
class Intersection:
    id: int
    phases: tuple[Phase, ...]
    fixed_plan: Optional[FixedPlan] = None

    @property
    def n_phases(self) -> int:
        return len(self.phases)


@dataclass(frozen=True, eq=False)
class RoadNetwork:
    lane_groups: tuple[LaneGroup, ...]
    intersections: tuple[Intersection, ...]
    name: str = ""
    notes: tuple[str, ...] = ()
    mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        validate(self)
        mask = build_adjacency_mask(self)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def N(self) -> int:
        return len(self.lane_groups)

    @property
    def I(self) -> int:
        return len(self.intersections)

    @property
    def max_phases(self) -> int:
        return max(x.n_phases for x in self.intersections)

    @property
    def entries(self) -> list[int]:
        return [lg.id for lg in self.lane_groups if lg.is_entry]

    def feasibility(self, n_phases: Optional[int] = None) -> np.ndarray:
        """Boolean (I, Φ) matrix marking which phase indices exist per intersection."""
        phi = n_phases or self.max_phases
        feas = np.zeros((self.I, phi), dtype=bool)
        for x in self.intersections:
            feas[x.id, : x.n_phases] = True
        return feas

    def greens_for(self, action) -> frozenset[int]:
        greens: set[int] = set()
        for x, a in zip(self.intersections, action):
            greens |= x.phases[a].green_lane_groups
        return frozenset(greens)

    def turning_matrix(self) -> np.ndarray:
        """(N, N) matrix R with R[i, j] the base rate from lane group i to j (exits dropped)."""
        R = np.zeros((self.N, self.N))
        for lg in self.lane_groups:
            for to, rate in lg.downstream:
                if to is not None:
                    R[lg.id, to] += rate
        return R

    def __eq__(self, other):
        if not isinstance(other, RoadNetwork):
            return NotImplemented
        return (
            self.lane_groups == other.lane_groups
            and self.intersections == other.intersections
            and self.name == other.name
            and self.notes == other.notes
        )

    __hash__ = None


def validate(net: RoadNetwork) -> None:
    n = len(net.lane_groups)
    n_int = len(net.intersections)
    if n == 0 or n_int == 0:
        raise NetworkError("network needs at least one lane group and one intersection")
    for k, lg in enumerate(net.lane_groups):
        where = f"lane_group {lg.id}"
        if lg.id != k:
            raise NetworkError(f"ids must be contiguous from 0, found {lg.id} at position {k}", where)
        if not 0 <= lg.intersection_id < n_int:
            raise NetworkError(f"unknown intersection {lg.intersection_id}", where)
        if lg.length_m <= 0:
            raise NetworkError("length_m must be positive", where)
        if lg.saturation_flow <= 0:
            raise NetworkError("sat_flow_vps must be positive", where)
        if lg.entry_volume_vph < 0:
            raise NetworkError("entry_vph must be non-negative", where)
        total = 0.0
        for to, rate in lg.downstream:
            if to is not None and not 0 <= to < n:
                raise NetworkError(f"downstream target {to} out of range", where)
            if to == lg.id:
                raise NetworkError("lane group cannot feed itself", where)
            if not 0.0 <= rate <= 1.0:
                raise NetworkError(f"turning rate {rate} outside [0, 1]", where)
            total += rate
        if lg.downstream and abs(total - 1.0) > RATE_TOL:
            raise NetworkError(f"turning rates sum to {total:.6g}, expected 1", where)
    seen: dict[int, int] = {}
    for k, x in enumerate(net.intersections):
        where = f"intersection {x.id}"
        if x.id != k:
            raise NetworkError(f"ids must be contiguous from 0, found {x.id} at position {k}", where)
        if not 1 <= x.n_phases <= MAX_PHASES:
            raise NetworkError(f"needs 1..{MAX_PHASES} phases, has {x.n_phases}", where)
        for p, phase in enumerate(x.phases):
            if not phase.green_lane_groups:
                raise NetworkError(f"phase {p} has no green lane groups", where)
            for g in phase.green_lane_groups:
                if not 0 <= g < n or net.lane_groups[g].intersection_id != x.id:
                    raise NetworkError(f"phase {p} lists lane group {g} of another intersection", where)
                seen[g] = x.id
        plan = x.fixed_plan
        if plan is not None:
            if len(plan.durations) != x.n_phases:
                raise NetworkError("fixed_plan needs one duration per phase", where)
            if any(d <= 0 for d in plan.durations):
                raise NetworkError("fixed_plan durations must be positive", where)
            if sum(plan.durations) != plan.cycle_s:
                raise NetworkError(
                    f"fixed_plan durations sum to {sum(plan.durations)}, cycle is {plan.cycle_s}", where
                )


def build_adjacency_mask(net: RoadNetwork) -> np.ndarray:
    """First-order upstream/downstream connections plus self, as a 0/1 float matrix."""
    mask = np.eye(net.N)
    for lg in net.lane_groups:
        for to, _ in lg.downstream:
            if to is not None:
                mask[lg.id, to] = 1.0
                mask[to, lg.id] = 1.0
    return mask


# --------------------------------------------------------------------------- IO


def _get(obj: dict, key: str, where: str, default=...):
    if key in obj:
        return obj[key]
    if default is ...:
        raise NetworkError(f"missing field '{key}'", where)
    return default


def network_from_dict(doc: dict, name: str = "") -> RoadNetwork:
    if not isinstance(doc, dict):
        raise NetworkError("top level must be an object")
    lane_groups = []
    for k, raw in enumerate(_get(doc, "lane_groups", "network")):
        where = f"lane_groups[{k}]"
        try:
            downstream = tuple(
                (None if d["to"] is None else int(d["to"]), float(d["rate"]))
                for d in _get(raw, "downstream", where, [])
            )
            lane_groups.append(
                LaneGroup(
                    id=int(_get(raw, "id", where)),
                    intersection_id=int(_get(raw, "intersection", where)),
                    label=str(raw.get("label", "")),
                    length_m=float(raw.get("length_m", DEFAULT_LENGTH_M)),
                    saturation_flow=float(raw.get("sat_flow_vps", DEFAULT_SAT_FLOW_VPS)),
                    downstream=downstream,
                    entry_volume_vph=float(raw.get("entry_vph", 0.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, NetworkError):
                raise
            raise NetworkError(f"bad field value ({exc})", where) from exc
    intersections = []
    for k, raw in enumerate(_get(doc, "intersections", "network")):
        where = f"intersections[{k}]"
        try:
            phases = tuple(Phase(frozenset(int(g) for g in p)) for p in _get(raw, "phases", where))
            plan = raw.get("fixed_plan")
            fixed = None
            if plan is not None:
                fixed = FixedPlan(int(plan["cycle_s"]), tuple(int(d) for d in plan["durations"]))
            intersections.append(Intersection(int(_get(raw, "id", where)), phases, fixed))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, NetworkError):
                raise
            raise NetworkError(f"bad field value ({exc})", where) from exc
    entries = doc.get("entries", [])
    if entries:
        volume = {}
        for k, e in enumerate(entries):
            lg = int(_get(e, "lane_group", f"entries[{k}]"))
            volume[lg] = volume.get(lg, 0.0) + float(_get(e, "vph", f"entries[{k}]"))
        for lg in lane_groups:
            if abs(volume.get(lg.id, 0.0) - lg.entry_volume_vph) > 1e-6:
                raise NetworkError(
                    f"entries section gives {volume.get(lg.id, 0.0)} veh/h, lane group says "
                    f"{lg.entry_volume_vph}",
                    f"lane_group {lg.id}",
                )
    notes = doc.get("_header", [])
    if isinstance(notes, str):
        notes = [notes]
    return RoadNetwork(tuple(lane_groups), tuple(intersections), name=str(doc.get("name", name)),
                       notes=tuple(notes))


def network_to_dict(net: RoadNetwork, entries: Optional[list[dict]] = None) -> dict:
    doc: dict = {"name": net.name}
    if net.notes:
        doc["_header"] = list(net.notes)
    doc["lane_groups"] = [
        {
            "id": lg.id,
            "intersection": lg.intersection_id,
            "label": lg.label,
            "length_m": lg.length_m,
            "sat_flow_vps": lg.saturation_flow,
            "downstream": [{"to": to, "rate": rate} for to, rate in lg.downstream],
            "entry_vph": lg.entry_volume_vph,
        }
        for lg in net.lane_groups
    ]
    doc["intersections"] = []
    for x in net.intersections:
        row: dict = {"id": x.id, "phases": [sorted(p.green_lane_groups) for p in x.phases]}
        if x.fixed_plan is not None:
            row["fixed_plan"] = {"cycle_s": x.fixed_plan.cycle_s, "durations": list(x.fixed_plan.durations)}
        doc["intersections"].append(row)
    if entries is None:
        entries = [{"lane_group": lg.id, "vph": lg.entry_volume_vph} for lg in net.lane_groups if lg.is_entry]
    doc["entries"] = entries
    return doc


def load_network(path) -> RoadNetwork:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise NetworkError(f"cannot read network file ({exc.strerror})", str(path)) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"invalid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})", str(path)) from exc
    return network_from_dict(doc, name=path.stem)


def save_network(net: RoadNetwork, path, entries: Optional[list[dict]] = None) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net, entries), indent=1) + "\n")


def _data_path(filename: str):
    return resources.files("dgqn").joinpath("data", filename)


def builtin_seoul15() -> RoadNetwork:
    """The shipped 15-intersection testbed (77 lane groups)."""
    with resources.as_file(_data_path("seoul15.json")) as p:
        return load_network(p)


def builtin_grid2x2() -> RoadNetwork:
    with resources.as_file(_data_path("grid2x2.json")) as p:
        return load_network(p)


def resolve_network(spec: str) -> RoadNetwork:
    """Load from a path, or from a shipped name such as ``seoul15`` / ``grid2x2``."""
    p = Path(spec)
    if p.exists():
        return load_network(p)
    stem = p.stem if p.suffix == ".json" else spec
    if stem in ("seoul15", "grid2x2") and not p.parent.name:
        return builtin_seoul15() if stem == "seoul15" else builtin_grid2x2()
    return load_network(p)


# ------------------------------------------------------------------ synthetic grids

# approach index -> (label, heading unit vector) ; headings in (dcol, drow), row grows southward
_APPROACHES = ("NB", "SB", "EB", "WB")
_HEADING = {"NB": (0, -1), "SB": (0, 1), "EB": (1, 0), "WB": (-1, 0)}
_TURNS = {  # heading after left / through / right
    "NB": ("WB", "NB", "EB"),
    "SB": ("EB", "SB", "WB"),
    "EB": ("NB", "EB", "SB"),
    "WB": ("SB", "WB", "NB"),
}


def grid_network(
    rows: int,
    cols: int,
    demand_vph: Union[float, Mapping[str, float]] = 600.0,
    phases_per_intersection: int = 2,
    turning: tuple[float, float, float] = (0.15, 0.7, 0.15),
    green_s: int = 40,
    sat_flow_vps: float = DEFAULT_SAT_FLOW_VPS,
) -> RoadNetwork:
    """Orthogonal grid with one lane group per approach and bidirectional links.

    Every boundary approach receives ``demand_vph``, which may also map the
    approach headings ("NB", "SB", "EB", "WB") to separate volumes. ``turning`` gives the
    (left, through, right) split; movements heading off the grid exit.
    Phases: 1 = all approaches, 2 = NS / EW, 3 = NS / EB / WB, 4 = one per approach.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"grid needs rows, cols >= 1, got {rows}x{cols}")
    if not 1 <= phases_per_intersection <= MAX_PHASES:
        raise ValueError(f"phases_per_intersection must be in 1..{MAX_PHASES}")
    if abs(sum(turning) - 1.0) > RATE_TOL:
        raise ValueError("turning split must sum to 1")
    if isinstance(demand_vph, Mapping):
        if set(demand_vph) - set(_APPROACHES):
            raise ValueError(f"demand headings must be among {_APPROACHES}")
        demand = {a: float(demand_vph.get(a, 0.0)) for a in _APPROACHES}
    else:
        demand = {a: float(demand_vph) for a in _APPROACHES}

    def lg_id(r, c, approach):
        return (r * cols + c) * 4 + _APPROACHES.index(approach)

    lane_groups = []
    for r in range(rows):
        for c in range(cols):
            for approach in _APPROACHES:
                # an approach heading h arrives from the neighbour at -h
                dc, dr = _HEADING[approach]
                boundary = not (0 <= r - dr < rows and 0 <= c - dc < cols)
                downstream: dict[Optional[int], float] = {}
                for rate, heading in zip(turning, _TURNS[approach]):
                    if rate == 0:
                        continue
                    hc, hr = _HEADING[heading]
                    nr, nc = r + hr, c + hc
                    to = lg_id(nr, nc, heading) if 0 <= nr < rows and 0 <= nc < cols else None
                    downstream[to] = downstream.get(to, 0.0) + rate
                lane_groups.append(
                    LaneGroup(
                        id=lg_id(r, c, approach),
                        intersection_id=r * cols + c,
                        label=f"{approach}-all",
                        saturation_flow=sat_flow_vps,
                        downstream=tuple(downstream.items()),
                        entry_volume_vph=demand[approach] if boundary else 0.0,
                    )
                )
    groups = {
        1: (("NB", "SB", "EB", "WB"),),
        2: (("NB", "SB"), ("EB", "WB")),
        3: (("NB", "SB"), ("EB",), ("WB",)),
        4: (("NB",), ("SB",), ("EB",), ("WB",)),
    }[phases_per_intersection]
    intersections = []
    for r in range(rows):
        for c in range(cols):
            phases = tuple(Phase(frozenset(lg_id(r, c, a) for a in g)) for g in groups)
            plan = FixedPlan(green_s * len(phases), (green_s,) * len(phases))
            intersections.append(Intersection(r * cols + c, phases, plan))
    return RoadNetwork(tuple(lane_groups), tuple(intersections), name=f"grid{rows}x{cols}")
