"""Deployment arithmetic and impact runs for a fleet of controlled vehicles.

Covers the hourly contribution of a looping fleet, temporal and spatial
penetration, release schedules with driver breaks covered by reserves,
and paired baseline / with-fleet simulations.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .microsim.engine import AV, HDV, AgentPlan, MeasurementFrame, World, run
from .microsim.models import IdmParams
from .netmodel import Link, Node, Path, Phase, RoadNetwork, SignalPlan, TimeGrids


class AvPlanError(ValueError):
    pass


# -- penetration arithmetic ---------------------------------------------------------


def effective_vehicles_per_hour(loop_minutes: float, fleet_size: float = 1) -> tuple[float, float]:
    """Westbound drives per hour for one vehicle and for the fleet."""
    if not loop_minutes > 0:
        raise AvPlanError("loop_minutes must be > 0")
    per_vehicle = 60.0 / loop_minutes
    return per_vehicle, fleet_size * per_vehicle


def temporal_penetration(fleet_rate: float, background_vph: float, lane_share: float = 1.0) -> float:
    """Share of controlled vehicles among traffic in the lanes the fleet uses."""
    if not background_vph > 0:
        raise AvPlanError("background_vph must be > 0")
    if not 0 < lane_share <= 1:
        raise AvPlanError("lane_share must be in (0, 1]")
    if fleet_rate < 0:
        raise AvPlanError("fleet_rate must be >= 0")
    return fleet_rate / (lane_share * background_vph + fleet_rate)


def spatial_penetration(av_count: int, background_count: float) -> float:
    """Expected background vehicles between consecutive, uniformly spaced AVs."""
    if av_count < 2:
        raise AvPlanError("need at least 2 AVs on the section")
    if background_count < 0:
        raise AvPlanError("background_count must be >= 0")
    return background_count / av_count


def measured_vehicles_between(network: RoadNetwork, plans: Sequence[AgentPlan], grids: TimeGrids,
                              link_ids: Sequence[str], sample_every: float = 30.0, seed: int = 0,
                              dt: float = 0.5) -> tuple[float, float]:
    """Simulated (mean HDVs between consecutive AVs, formula value) on a section.

    Sampled every `sample_every` seconds inside the measurement window,
    at instants with at least two AVs on the section.  The simulated value
    counts HDVs strictly between consecutive AVs in position order along
    the section, whatever their lane.
    """
    links = list(link_ids)
    offset = {}
    acc = 0.0
    for lid in links:
        offset[lid] = acc
        acc += network.links[lid].length
    world = World(network, plans, grids, seed=seed, dt=dt)
    every = max(1, int(round(sample_every / dt)))
    n_steps = int(round(grids.sim_duration / dt))
    between, formula = [], []
    for _ in range(n_steps // every):
        world.advance(every)
        if world.time < grids.warmup:
            continue
        vs = [v for v in world.vehicle_state() if v["link_id"] in offset]
        avs = sorted(offset[v["link_id"]] + v["pos_m"] for v in vs if v["cls"] == AV)
        if len(avs) < 2:
            continue
        hdv = np.array([offset[v["link_id"]] + v["pos_m"] for v in vs if v["cls"] != AV])
        gaps = [np.sum((hdv > a) & (hdv < b)) for a, b in zip(avs, avs[1:])]
        between.append(float(np.mean(gaps)))
        formula.append(spatial_penetration(len(avs), float(hdv.size)))
    if not between:
        raise AvPlanError("never saw two AVs on the section")
    return float(np.mean(between)), float(np.mean(formula))


# -- routes and schedules -----------------------------------------------------------


@dataclass(frozen=True)
class AvRoute:
    """A fleet route: westbound links, optional return links, turnaround signals and permitted lanes.

    Lane 0 is the leftmost (HOV) lane and is left out by default.
    """

    id: str
    westbound: tuple[str, ...]
    eastbound: tuple[str, ...] = ()
    turnaround_nodes: tuple[str, ...] = ()
    lanes: tuple[int, ...] = (1, 2, 3)

    @property
    def links(self) -> tuple[str, ...]:
        return tuple(self.westbound) + tuple(self.eastbound)

    def validate(self, network: RoadNetwork) -> None:
        if not self.westbound:
            raise AvPlanError(f"route {self.id}: empty westbound path")
        if 0 in self.lanes and len(self.lanes) == 1:
            raise AvPlanError(f"route {self.id}: only the HOV lane is permitted")
        links = self.links
        for lid in links:
            if lid not in network.links:
                raise AvPlanError(f"route {self.id}: unknown link {lid!r}")
        for a, b in zip(links, links[1:]):
            if network.links[a].to_node != network.links[b].from_node:
                raise AvPlanError(f"route {self.id}: links {a} and {b} are not consecutive")
        for node in self.turnaround_nodes:
            if node not in network.signals:
                raise AvPlanError(f"route {self.id}: turnaround node {node!r} has no signal")

    def path_in(self, network: RoadNetwork) -> Path:
        lk = self.links
        return Path(f"av:{self.id}", (network.links[lk[0]].from_node, network.links[lk[-1]].to_node), lk)


@dataclass(frozen=True)
class BreakPolicy:
    """Break after every `loops_between` loops, lasting `break_loops` loop times."""

    loops_between: int = 2
    break_loops: float = 1.0

    def __post_init__(self):
        if self.break_loops < 0:
            raise AvPlanError("break length must be >= 0")
        if self.break_loops > 0 and self.loops_between < 1:
            raise AvPlanError("breaks need at least one loop between them")


NO_BREAKS = BreakPolicy(loops_between=1, break_loops=0.0)


@dataclass(frozen=True)
class ScheduleEntry:
    driver_id: int
    route: str
    lane: int
    depart_s: float
    breaks: tuple[tuple[float, float], ...] = ()


@dataclass
class ReleaseSchedule:
    entries: list[ScheduleEntry]
    headway: float
    loop_s: float
    end_s: float  # end of operations
    reserves: int
    cover: dict[tuple[int, int], int] = field(default_factory=dict)  # (driver, break index) -> reserve

    @property
    def fleet_size(self) -> int:
        return len(self.entries)

    @property
    def total_drivers(self) -> int:
        return self.fleet_size + self.reserves

    @property
    def release_end(self) -> float:
        """Time by which every vehicle is on the road."""
        return self.fleet_size * self.headway

    def routes(self) -> set[str]:
        return {e.route for e in self.entries}

    def vehicles_on_road(self, t: float) -> int:
        """Vehicles in service at time t; breaks are covered, so vehicles never idle."""
        return sum(1 for e in self.entries if e.depart_s <= t < self.end_s)

    def counts_at(self, t: float) -> dict[str, int]:
        """Drivers on the road, on break and in reserve at time t.

        Reserve counts idle reserve drivers plus fleet drivers outside their
        shift.  Each category is counted on its own so callers can check
        that they add up and that every vehicle on the road has a driver.
        """
        own, on_break, off = 0, 0, 0
        for e in self.entries:
            if not e.depart_s <= t < self.end_s:
                off += 1
            elif any(lo <= t < hi for lo, hi in e.breaks):
                on_break += 1
            else:
                own += 1
        busy = {r for (d, b), r in self.cover.items() if self._break(d, b)[0] <= t < self._break(d, b)[1]}
        return {"on_road": own + len(busy), "on_break": on_break, "in_reserve": self.reserves - len(busy) + off}

    def _break(self, driver: int, b: int) -> tuple[float, float]:
        return self.entries[driver].breaks[b]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["driver_id", "route", "lane", "depart_s", "break_start_s", "break_end_s"])
            for e in self.entries:
                if not e.breaks:
                    w.writerow([e.driver_id, e.route, e.lane, repr(e.depart_s), "", ""])
                for lo, hi in e.breaks:
                    w.writerow([e.driver_id, e.route, e.lane, repr(e.depart_s), repr(lo), repr(hi)])


def build_schedule(fleet_size: int, headway: float, loop_minutes: float,
                   break_policy: BreakPolicy = BreakPolicy(), routes: Sequence[str] = ("orange", "yellow"),
                   lanes: Sequence[int] = (1, 2, 3), shift_s: float = 4 * 3600.0, seed: int = 0,
                   max_reserves: int | None = None) -> ReleaseSchedule:
    """Staggered releases alternating over `routes`, with breaks and the reserves they need.

    Vehicle i leaves at ``i * headway``.  Its driver hands the vehicle to a
    reserve for each break, so vehicles never stand idle; the reserve count
    is the largest number of overlapping breaks, found by replaying the
    break windows in time order.
    """
    if fleet_size < 0:
        raise AvPlanError("fleet_size must be >= 0")
    if not headway > 0:
        raise AvPlanError("headway must be > 0")
    if not loop_minutes > 0:
        raise AvPlanError("loop_minutes must be > 0")
    if not routes:
        raise AvPlanError("need at least one route")
    rng = np.random.default_rng(seed)
    loop_s = 60.0 * loop_minutes
    work = break_policy.loops_between * loop_s
    rest = break_policy.break_loops * loop_s
    entries = []
    for i in range(fleet_size):
        d = i * headway
        breaks = []
        if rest > 0:
            t = d + work
            while t < shift_s:
                breaks.append((t, min(t + rest, shift_s)))
                t += rest + work
        entries.append(ScheduleEntry(i, routes[i % len(routes)], int(rng.choice(lanes)), d, tuple(breaks)))

    # assign reserves greedily, earliest break first
    events = sorted((lo, hi, i, b) for i, e in enumerate(entries) for b, (lo, hi) in enumerate(e.breaks))
    free: list[tuple[float, int]] = []
    n_res = 0
    cover = {}
    for lo, hi, i, b in events:
        if free and free[0][0] <= lo:
            _, r = heapq.heappop(free)
        else:
            r = n_res
            n_res += 1
        cover[(i, b)] = r
        heapq.heappush(free, (hi, r))
    if max_reserves is not None and n_res > max_reserves:
        raise AvPlanError(f"break policy needs {n_res} reserve drivers, only {max_reserves} available")
    return ReleaseSchedule(entries, float(headway), loop_s, float(shift_s), n_res, cover)


def schedule_plans(schedule: ReleaseSchedule, routes: Mapping[str, AvRoute], network: RoadNetwork,
                   end_s: float, first_id: int = 10_000_000, params: IdmParams | None = None,
                   start_s: float = 0.0, max_loops: int | None = None) -> tuple[RoadNetwork, list[AgentPlan]]:
    """One agent per loop driven before `end_s`; returns the network with AV paths added."""
    unknown = schedule.routes() - set(routes)
    if unknown:
        raise AvPlanError(f"schedule references unknown route(s) {sorted(unknown)}")
    paths = {}
    for rid in sorted(schedule.routes()):
        r = routes[rid]
        r.validate(network)
        paths[rid] = r.path_in(network)
    have = {p.id for p in network.paths}
    extra = [p for p in paths.values() if p.id not in have]
    if extra:
        network = network.with_paths(list(network.paths) + extra)
    plans = []
    nid = first_id
    for e in schedule.entries:
        t = start_s + e.depart_s
        j = 0
        while t <= end_s and (max_loops is None or j < max_loops):
            plans.append(AgentPlan(nid, paths[e.route].id, t, cls=AV, lane=e.lane, params=params))
            nid += 1
            j += 1
            t += schedule.loop_s
    return network, plans


# -- impact ---------------------------------------------------------------------------


def indicators(frame: MeasurementFrame) -> dict[str, float]:
    hdv = frame.mean_travel_time(HDV)
    gs = frame.gap_stats
    return {
        "mean_speed_mps": float(np.nanmean(frame.net_mean_speed)) if np.any(np.isfinite(frame.net_mean_speed)) else 0.0,
        "mean_density": float(np.nanmean(frame.net_density)) if np.any(np.isfinite(frame.net_density)) else 0.0,
        "mean_travel_time_s": hdv if math.isfinite(hdv) else 0.0,
        "gap_mean_m": float(gs.get("mean", 0.0)),
        "gap_var_m2": float(gs.get("variance", 0.0)),
        "gap_min_m": float(gs.get("min", 0.0)),
        "gap_max_m": float(gs.get("max", 0.0)),
    }


@dataclass
class ImpactReport:
    baseline: dict[str, float]
    with_av: dict[str, float]
    queue_baseline: dict[str, int]
    queue_with_av: dict[str, int]
    spillback_baseline: dict[str, bool]
    spillback_with_av: dict[str, bool]
    av_trips: int
    av_mean_travel_time_s: float

    @property
    def deltas(self) -> dict[str, float]:
        return {k: self.with_av[k] - self.baseline[k] for k in self.baseline}

    @property
    def relative_deltas(self) -> dict[str, float]:
        return {k: (self.with_av[k] - b) / b if b else 0.0 for k, b in self.baseline.items()}

    @property
    def max_queue(self) -> int:
        return max(self.queue_with_av.values(), default=0)

    def to_json(self, path=None) -> str:
        doc = asdict(self)
        doc["deltas"] = self.deltas
        doc["relative_deltas"] = self.relative_deltas
        text = json.dumps(doc, indent=2, sort_keys=True, default=float)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def inject_and_compare(network: RoadNetwork, background: Sequence[AgentPlan], grids: TimeGrids,
                       routes: Mapping[str, AvRoute], schedule: ReleaseSchedule, seed: int = 0,
                       dt: float = 0.5, params: IdmParams | None = None, start_s: float = 0.0,
                       max_loops: int | None = None) -> ImpactReport:
    """Simulate with and without the fleet on the same seed and report indicator changes.

    Travel time is averaged over background vehicles only, so the report
    isolates the fleet's effect on everybody else.
    """
    net_av, av_plans = schedule_plans(schedule, routes, network, grids.sim_duration, params=params,
                                      start_s=start_s, max_loops=max_loops)
    ids = {p.id for p in background}
    if any(p.id in ids for p in av_plans):
        raise AvPlanError("AV agent ids collide with background ids")
    base = run(net_av, background, grids, seed=seed, dt=dt)
    withav = run(net_av, list(background) + av_plans, grids, seed=seed, dt=dt)
    av_tt = withav.mean_travel_time(AV)
    return ImpactReport(indicators(base), indicators(withav), dict(base.queue_max), dict(withav.queue_max),
                        dict(base.spillback), dict(withav.spillback), len(av_plans),
                        av_tt if math.isfinite(av_tt) else float("nan"))


# -- turnaround testbed -------------------------------------------------------------------


def turnaround_testbed(lanes: int = 4, link_m: float = 1500.0, ramp_m: float = 300.0, cycle_s: float = 90.0,
                       green_s: float = 30.0, speed_limit: float = 29.0) -> tuple[RoadNetwork, dict[str, AvRoute]]:
    """Freeway pair with two signalized turnarounds.

    Westbound w0 -> w1 -> w2, eastbound e2 -> e1 -> e0.  The orange route
    turns at the first interchange (x_a, signal at ta, u_a), the yellow
    route at the second (x_b, tb, u_b).  Each turnaround signal gives its
    exit ramp `green_s` of every `cycle_s`.
    """
    nodes = [Node(n) for n in ("w_in", "n1", "n2", "w_out", "e_in", "m2", "m1", "e_out", "ta", "tb")]
    L = lambda i, a, b, ln, n, kind="freeway", v=speed_limit: Link(i, a, b, ln, n, v, kind)  # noqa: E731
    links = [
        L("w0", "w_in", "n1", link_m, lanes), L("w1", "n1", "n2", link_m, lanes), L("w2", "n2", "w_out", link_m, lanes),
        L("e2", "e_in", "m2", link_m, lanes), L("e1", "m2", "m1", link_m, lanes), L("e0", "m1", "e_out", link_m, lanes),
        L("x_a", "n1", "ta", ramp_m, 1, "ramp", 15.0), L("u_a", "ta", "m1", ramp_m, 1, "ramp", 15.0),
        L("x_b", "n2", "tb", ramp_m, 1, "ramp", 15.0), L("u_b", "tb", "m2", ramp_m, 1, "ramp", 15.0),
    ]
    signals = [SignalPlan(n, cycle_s, (Phase((x,), green_s), Phase((), cycle_s - green_s)))
               for n, x in (("ta", "x_a"), ("tb", "x_b"))]
    paths = [
        Path("bg:west", ("w_in", "w_out"), ("w0", "w1", "w2")),
        Path("bg:east", ("e_in", "e_out"), ("e2", "e1", "e0")),
        Path("bg:exit_a", ("w_in", "ta"), ("w0", "x_a")),
        Path("bg:exit_b", ("w_in", "tb"), ("w0", "w1", "x_b")),
    ]
    net = RoadNetwork(nodes, links, signals=signals, paths=paths,
                      od_pairs=[("w_in", "w_out"), ("e_in", "e_out"), ("w_in", "ta"), ("w_in", "tb")])
    ln = tuple(range(1, lanes))
    routes = {
        "orange": AvRoute("orange", ("w0", "x_a"), ("u_a", "e0"), ("ta",), ln),
        "yellow": AvRoute("yellow", ("w0", "w1", "x_b"), ("u_b", "e1", "e0"), ("tb",), ln),
    }
    return net, routes


def testbed_background(grids: TimeGrids, through_vph: float = 3000.0, exit_vph: float = 120.0,
                       seed: int = 0) -> list[AgentPlan]:
    """Evenly spaced background departures with a seeded phase on each testbed path."""
    rng = np.random.default_rng(seed)
    plans = []
    nid = 0
    end = grids.sim_duration
    for pid, vph in (("bg:west", through_vph), ("bg:east", through_vph), ("bg:exit_a", exit_vph),
                     ("bg:exit_b", exit_vph)):
        if vph <= 0:
            continue
        h = 3600.0 / vph
        t = rng.uniform(0, h)
        while t < end:
            plans.append(AgentPlan(nid, pid, float(t), warmup=t < grids.warmup))
            nid += 1
            t += h
    return plans
