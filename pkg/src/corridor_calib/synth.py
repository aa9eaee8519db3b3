"""Synthetic corridors with known ground-truth demand.

A scenario is a straight freeway with on/off ramps and an optional lane
drop.  Ground-truth path flows Π* and inflow profiles I* are built from a
demand-rate shape and simulated once.  The simulated speeds become the
"observed" speed targets; flow targets are the link counts Π* implies
through the path incidence, or optionally the counts measured in the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .flowcal import PathFlowSolution, link_flows
from .los import GRADES, LosRow, LosTable
from .microsim.engine import MeasurementFrame
from .microsim.models import IdmParams
from .netmodel import (MPH, Link, Node, ObservationSet, RoadNetwork, TimeGrids, build_path_set)
from .speedcal import InflowProfile, assign_departures, simulate

SHAPES = ("free-flow", "bottleneck", "stop-and-go")
RAMP_LENGTH = 300.0
RAMP_SPEED = 20.0
# per-lane flows the default IDM sustains: free-flowing and after breakdown
LANE_CAPACITY = 1750.0
LANE_DISCHARGE = 1300.0


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """Corridor and demand description.

    ``total_demand`` counts vehicles departing during the measured horizon
    (None picks a shape-dependent level).  ``flow_bias`` understates the
    emitted flow targets by that fraction, mimicking counts that average
    over days while speeds describe one day.

    ``flow_targets="implied"`` emits the link flows the true path flows
    imply through the incidence matrix, which the flow fit can reproduce
    exactly; ``"measured"`` emits the simulated crossing counts, which
    lag departures by the travel time and so are not self-consistent.
    """

    length_km: float = 6.0
    n_on_ramps: int = 2
    n_off_ramps: int = 1
    lanes: int = 3
    shape: str = "free-flow"
    total_demand: float | None = None
    seed: int = 0
    speed_limit: float = 29.0
    lane_drop: int | None = None  # lanes removed near the downstream end; default 1 unless free-flow
    drop_at: float = 0.8  # fraction of the corridor length
    ramp_zone: float = 0.6  # ramps sit in the first part of the corridor
    off_ramp_share: float = 0.1
    on_ramp_vph: float = 150.0
    wave_period_s: float = 800.0
    flow_bias: float = 0.0
    flow_targets: str = "implied"
    grids: TimeGrids = field(default_factory=lambda: TimeGrids(0, 2400, 600, 60, 600))
    dt: float = 0.5

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SynthError(f"unknown demand shape {self.shape!r}; expected one of {SHAPES}")
        if self.length_km <= 0 or self.lanes < 1:
            raise SynthError("length_km > 0 and lanes >= 1 required")
        if self.total_demand is not None and self.total_demand < 0:
            raise SynthError("demand must be >= 0")
        if self.flow_targets not in ("implied", "measured"):
            raise SynthError(f"flow_targets must be 'implied' or 'measured', got {self.flow_targets!r}")
        if not 0 <= self.flow_bias < 1:
            raise SynthError("flow_bias must lie in [0, 1)")
        n_ramps = self.n_on_ramps + self.n_off_ramps
        if n_ramps and self.length_km * 1000 * self.ramp_zone / (n_ramps + 1) < RAMP_LENGTH:
            raise SynthError("ramps do not fit within the corridor at the required spacing")
        if self.drops >= self.lanes:
            raise SynthError("lane drop must leave at least one lane")
        if n_ramps and not self.ramp_zone < self.drop_at < 1:
            raise SynthError("the lane drop must sit downstream of the ramps")

    @property
    def drops(self) -> int:
        if self.lane_drop is not None:
            return self.lane_drop
        return 0 if self.shape == "free-flow" or self.lanes == 1 else 1


@dataclass
class SyntheticScenario:
    """Generated network, ground truth and observations.

    Iterating yields ``(network, flows, inflow, observations)``.
    """

    network: RoadNetwork
    flows: PathFlowSolution
    inflow: InflowProfile
    observations: ObservationSet
    spec: ScenarioSpec
    frame: MeasurementFrame
    mainline_segments: tuple[str, ...]
    true_link_flows: np.ndarray

    def __iter__(self):
        return iter((self.network, self.flows, self.inflow, self.observations))

    def mainline_speeds(self, speeds: np.ndarray | None = None) -> np.ndarray:
        """Rows of a segment-by-minute speed tensor for the mainline, upstream first."""
        speeds = self.observations.speeds if speeds is None else speeds
        idx = [self.network.segment_index[s] for s in self.mainline_segments]
        return speeds[idx]


# -- corridor -------------------------------------------------------------------


def build_corridor(spec: ScenarioSpec) -> RoadNetwork:
    """Mainline links split at every ramp junction and at the lane drop."""
    L = spec.length_km * 1000.0
    n_ramps = spec.n_on_ramps + spec.n_off_ramps
    kinds, ons, offs = [], spec.n_on_ramps, spec.n_off_ramps
    while ons or offs:  # interleave, starting with an on-ramp
        if ons and (len(kinds) % 2 == 0 or not offs):
            kinds.append("on")
            ons -= 1
        else:
            kinds.append("off")
            offs -= 1
    xs = [L * spec.ramp_zone * (i + 1) / (n_ramps + 1) for i in range(n_ramps)]
    breaks = [(x, kind) for x, kind in zip(xs, kinds)]
    if spec.drops:
        breaks.append((L * spec.drop_at, "drop"))
    breaks.sort()
    positions = [0.0] + [b[0] for b in breaks] + [L]
    nodes = [Node(f"n{i}", x, 0.0) for i, x in enumerate(positions)]
    links = []
    lanes = spec.lanes
    for i in range(len(positions) - 1):
        if i > 0 and breaks[i - 1][1] == "drop":
            lanes = spec.lanes - spec.drops
        links.append(Link(f"m{i}", f"n{i}", f"n{i + 1}", positions[i + 1] - positions[i], lanes,
                          spec.speed_limit, "freeway"))
    od = []
    n_on = n_off = 0
    for i, (x, kind) in enumerate(breaks, start=1):
        if kind == "on":
            nid = f"on{n_on}"
            nodes.append(Node(nid, x - RAMP_LENGTH, -100.0))
            links.append(Link(f"r_on{n_on}", nid, f"n{i}", RAMP_LENGTH, 1, RAMP_SPEED, "ramp"))
            n_on += 1
        elif kind == "off":
            nid = f"off{n_off}"
            nodes.append(Node(nid, x + RAMP_LENGTH, -100.0))
            links.append(Link(f"r_off{n_off}", f"n{i}", nid, RAMP_LENGTH, 1, RAMP_SPEED, "ramp"))
            n_off += 1
    last = f"n{len(positions) - 1}"
    origins = ["n0"] + [f"on{i}" for i in range(n_on)]
    dests = [last] + [f"off{i}" for i in range(n_off)]
    x_of = {n.id: n.x for n in nodes}
    for o in origins:
        for d in dests:
            # ramps are placed RAMP_LENGTH off their junction; compare junction positions
            xo = x_of[o] + (RAMP_LENGTH if o.startswith("on") else 0.0)
            xd = x_of[d] - (RAMP_LENGTH if d.startswith("off") else 0.0)
            if xd > xo:
                od.append((o, d))
    return build_path_set(RoadNetwork(nodes, links, od_pairs=od), max_paths=3)


def mainline_segments(network: RoadNetwork) -> tuple[str, ...]:
    """Freeway segment ids in downstream order along the m0, m1, ... chain."""
    mains = sorted((lid for lid in network.link_ids if lid.startswith("m")), key=lambda s: int(s[1:]))
    out = []
    for lid in mains:
        out.extend(s.id for s in sorted(network.segments_of(lid), key=lambda s: s.start_offset))
    return tuple(out)


# -- LOS ------------------------------------------------------------------------------


def simulator_los_table(params: IdmParams = IdmParams(), speed_limits: dict[str, float] | None = None) -> LosTable:
    """LOS rows derived from the IDM fundamental diagram.

    For each road kind, grade boundaries are fractions of the desired speed
    and the grade's maximum flow is the equilibrium flow at its lower speed
    boundary; grade F carries the equilibrium capacity.
    """
    speed_limits = speed_limits or {"freeway": 29.0, "ramp": RAMP_SPEED, "arterial": 15.0}
    fractions = (0.97, 0.93, 0.87, 0.78, 0.6, 0.0)
    rows = []
    for kind, vlim in speed_limits.items():
        v_m = vlim * params.speed_factor
        p = replace(params, v_m=v_m)
        vs = np.linspace(0.2, v_m * 0.999, 600)
        q = np.array([v / (p.equilibrium_gap(v) + p.length) * 3600 for v in vs])
        cap = float(q.max())
        prev = 0.0
        for g, frac in zip(GRADES, fractions):
            v = v_m * frac
            flow = cap if frac == 0.0 else min(cap, v / (p.equilibrium_gap(v) + p.length) * 3600)
            flow = max(flow, prev)
            prev = flow
            rows.append(LosRow(kind, g, round(v / MPH, 3), round(flow, 1)))
    return LosTable(rows)


# -- demand ------------------------------------------------------------------------------


def _rate_shape(spec: ScenarioSpec, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mainline-origin demand (veh/h) at clock times `t` within the horizon."""
    lanes_down = spec.lanes - spec.drops
    H = spec.grids.horizon
    if spec.shape == "free-flow":
        base = 0.42 * spec.lanes * LANE_CAPACITY
        rate = base * (1.0 + 0.25 * np.sin(2 * np.pi * t / H + rng.uniform(0, 2 * np.pi)))
    elif spec.shape == "bottleneck":
        cap = lanes_down * LANE_CAPACITY
        surge = (t >= 0.2 * H) & (t < 0.55 * H)
        rate = np.where(surge, 1.3 * cap, 0.6 * cap)
    else:
        cap = lanes_down * LANE_CAPACITY
        phase = np.pi / 2 + rng.uniform(-0.3, 0.3)
        rate = cap * (0.6 + 0.8 * np.sin(2 * np.pi * t / spec.wave_period_s - phase))
    jitter = 1.0 + 0.05 * rng.standard_normal(t.size)
    return np.maximum(rate * jitter, 0.0)


def _od_weights(network: RoadNetwork, spec: ScenarioSpec) -> dict[str, tuple[str, float]]:
    """For each path: (origin, share of that origin's demand)."""
    mains = {lid for lid in network.link_ids if lid.startswith("m")}
    out = {}
    phi = spec.off_ramp_share
    for p in network.paths:
        o, d = p.od_pair
        # count off-ramps passed before the exit
        junctions = [network.links[lid].to_node for lid in p.links if lid in mains]
        offs_passed = sum(1 for j in junctions for ln in network.out_links(j) if ln.id.startswith("r_off"))
        if d.startswith("off"):
            share = phi * (1 - phi) ** (offs_passed - 1) if offs_passed >= 1 else phi
        else:
            share = (1 - phi) ** offs_passed
        out[p.id] = (o, share)
    return out


def ground_truth(network: RoadNetwork, spec: ScenarioSpec) -> tuple[PathFlowSolution, InflowProfile]:
    """Integer Π* and I* from the demand shape."""
    g = spec.grids
    rng = np.random.default_rng(spec.seed)
    t_mid = (np.arange(g.n_fine) + 0.5) * g.duration_r
    main_rate = _rate_shape(spec, t_mid, rng)
    ramp_rate = np.full(g.n_fine, spec.on_ramp_vph) * (1 + 0.05 * rng.standard_normal(g.n_fine))
    weights = _od_weights(network, spec)
    exp = np.zeros((len(network.paths), g.n_fine))
    for j, p in enumerate(network.paths):
        o, share = weights[p.id]
        rate = main_rate if o == "n0" else ramp_rate
        exp[j] = np.maximum(rate, 0) * share * g.duration_r / 3600.0
    if spec.total_demand is not None:
        tot = exp.sum()
        exp *= spec.total_demand / tot if tot > 0 else 0.0
    per_bin_cap = max(ln.lane_count for ln in network.links.values()) * 2400 * g.duration_r / 3600
    if exp.sum(axis=0).max() > 2 * per_bin_cap:
        raise SynthError("demand infeasible for the network: peak inflow exceeds insertion capacity")
    K = g.n_coarse
    counts = np.zeros((len(network.paths), K), dtype=np.int64)
    shares = np.zeros_like(exp)
    for j in range(len(network.paths)):
        for k in range(K):
            bins = g.fine_bins_of(k)
            e = exp[j, bins.start:bins.stop]
            counts[j, k] = int(round(e.sum()))
            shares[j, bins.start:bins.stop] = counts[j, k] * e / e.sum() if e.sum() > 0 else 0.0
        tot = shares[j].sum()
        shares[j] = shares[j] / tot if tot > 0 else 1.0 / g.n_fine
    path_ids = tuple(p.id for p in network.paths)
    return PathFlowSolution(path_ids, counts), InflowProfile(path_ids, shares)


def generate(spec: ScenarioSpec) -> SyntheticScenario:
    """Build the corridor, sample ground truth, simulate once and emit targets."""
    network = build_corridor(spec)
    flows, inflow = ground_truth(network, spec)
    frame = simulate(network, flows, inflow, spec.grids, spec.seed, spec.dt)
    if spec.flow_targets == "implied":
        true_flows = link_flows(flows.counts, network.incidence_matrix()).astype(float)
    else:
        true_flows = frame.flows.astype(float)
    obs_flows = np.round(true_flows * (1.0 - spec.flow_bias))
    limits = {"freeway": spec.speed_limit, "ramp": RAMP_SPEED, "arterial": 15.0}
    # a cell where every sampled vehicle stood still would otherwise read 0 mph
    speeds = np.maximum(frame.filled_speeds(), 0.5)
    obs = ObservationSet(network.link_ids, network.segment_ids, obs_flows, speeds,
                         simulator_los_table(speed_limits=limits), spec.grids)
    return SyntheticScenario(network, flows, inflow, obs, spec, frame, mainline_segments(network), true_flows)


def replay(scenario: SyntheticScenario) -> MeasurementFrame:
    """Re-simulate the ground truth with the scenario's seed."""
    s = scenario.spec
    return simulate(scenario.network, scenario.flows, scenario.inflow, s.grids, s.seed, s.dt)


# -- noise ---------------------------------------------------------------------------------


def perturb_targets(observations: ObservationSet, noise_level: float, seed: int = 0) -> ObservationSet:
    """Multiplicative lognormal noise exp(sigma * Z) on flows and speeds.

    Flows are rounded to whole vehicles; speeds stay positive by
    construction.  Missing cells stay missing.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    if noise_level == 0:
        return observations
    rng = np.random.default_rng(seed)
    f = observations.flows * np.exp(noise_level * rng.standard_normal(observations.flows.shape))
    s = observations.speeds * np.exp(noise_level * rng.standard_normal(observations.speeds.shape))
    return replace(observations, flows=np.round(f), speeds=np.maximum(s, 1e-3))


# -- wave detection ------------------------------------------------------------------------


@dataclass(frozen=True)
class WaveBand:
    """A connected low-speed region of a (segment x minute) heatmap."""

    segments: tuple[int, ...]
    t_start: int
    t_end: int
    slope: float  # minutes per segment of congestion onset; < 0 runs upstream
    min_speed: float


def detect_wave_bands(speeds: np.ndarray, threshold_mph: float = 40.0, min_segments: int = 2,
                      min_cells: int = 4) -> list[WaveBand]:
    """Backward-propagating low-speed bands.

    `speeds` rows are segments ordered downstream, columns are minutes.
    Cells below the threshold are grouped into 8-connected components; a
    component counts as a band when it covers at least `min_segments`
    segments and the minute congestion sets in, regressed on segment index,
    decreases downstream (so the disturbance travels against traffic).
    """
    low = np.nan_to_num(speeds, nan=np.inf) < threshold_mph
    labels, n = ndimage.label(low, structure=np.ones((3, 3)))
    bands = []
    for lab in range(1, n + 1):
        rows, cols = np.nonzero(labels == lab)
        if rows.size < min_cells:
            continue
        segs = np.unique(rows)
        if segs.size < min_segments:
            continue
        onset = [cols[rows == s].min() for s in segs]
        slope = float(np.polyfit(segs.astype(float), np.asarray(onset, float), 1)[0])
        if slope < 0:
            bands.append(WaveBand(tuple(int(s) for s in segs), int(cols.min()), int(cols.max()), slope,
                                  float(speeds[rows, cols].min())))
    return bands
