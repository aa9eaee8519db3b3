"""Corridor network, observation grids, candidate paths and data ingestion.

Internal units are SI (m, s, m/s).  Speeds are converted from mph only when
reading or writing files.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path as FsPath
from typing import Iterable, Mapping, Sequence

import numpy as np

from .los import LosTable, load_los_csv

MPH = 0.44704  # m/s per mph
HALF_MILE = 804.5
LINK_KINDS = ("freeway", "ramp", "arterial")


class NetworkError(ValueError):
    """Raised for malformed or inconsistent network definitions."""


class NoPathError(NetworkError):
    pass


class ObservationError(ValueError):
    """Raised for malformed observation files."""


@dataclass(frozen=True)
class Node:
    id: str
    x: float = 0.0
    y: float = 0.0


@dataclass(frozen=True)
class Link:
    id: str
    from_node: str
    to_node: str
    length: float
    lane_count: int
    speed_limit: float
    kind: str = "freeway"

    def __post_init__(self):
        if not self.length > 0:
            raise NetworkError(f"link {self.id!r}: length must be > 0, got {self.length}")
        if int(self.lane_count) != self.lane_count or self.lane_count < 1:
            raise NetworkError(f"link {self.id!r}: lane_count must be an integer >= 1")
        if not self.speed_limit > 0:
            raise NetworkError(f"link {self.id!r}: speed_limit must be > 0")
        if self.kind not in LINK_KINDS:
            raise NetworkError(f"link {self.id!r}: unknown kind {self.kind!r}")

    @property
    def free_flow_time(self) -> float:
        return self.length / self.speed_limit


@dataclass(frozen=True)
class Segment:
    id: str
    link_id: str
    start_offset: float
    end_offset: float
    nominal_length: float = HALF_MILE

    @property
    def length(self) -> float:
        return self.end_offset - self.start_offset


@dataclass(frozen=True)
class Phase:
    movements: tuple[str, ...]  # incoming link ids served by this phase
    green: float


@dataclass(frozen=True)
class SignalPlan:
    node_id: str
    cycle_time: float
    phases: tuple[Phase, ...]
    offset: float = 0.0

    def __post_init__(self):
        if not self.phases:
            raise NetworkError(f"signal at {self.node_id!r} has no phases")
        for ph in self.phases:
            if not ph.green > 0:
                raise NetworkError(f"signal at {self.node_id!r}: phase duration must be > 0")
        total = sum(ph.green for ph in self.phases)
        if not math.isclose(total, self.cycle_time, rel_tol=0, abs_tol=1e-6):
            raise NetworkError(
                f"signal at {self.node_id!r}: phases sum to {total}, cycle is {self.cycle_time}"
            )

    def green_windows(self, link_id: str) -> list[tuple[float, float]]:
        """Windows within the cycle, as (start, end) seconds, when `link_id` has green."""
        out, t = [], 0.0
        for ph in self.phases:
            if link_id in ph.movements:
                out.append((t, t + ph.green))
            t += ph.green
        return out

    def is_green(self, link_id: str, t: float) -> bool:
        tc = (t - self.offset) % self.cycle_time
        return any(lo <= tc < hi for lo, hi in self.green_windows(link_id))


@dataclass(frozen=True)
class Path:
    id: str
    od_pair: tuple[str, str]
    links: tuple[str, ...]

    def incidence(self, link_id: str) -> int:
        return int(link_id in self.links)


@dataclass(frozen=True)
class TimeGrids:
    """Coarse (flow) and fine (speed) observation grids over the measured horizon.

    `start` and `end` are clock times in seconds; the simulation clock begins
    `warmup` seconds before `start`.
    """

    start: float = 0.0
    end: float = 7200.0
    duration_k: float = 3600.0
    duration_r: float = 60.0
    warmup: float = 1200.0

    def __post_init__(self):
        h = self.end - self.start
        if not h > 0:
            raise ValueError("horizon end must be after start")
        if not 0 < self.duration_r < self.duration_k:
            raise ValueError("fine interval must be positive and shorter than the coarse one")
        for d in (self.duration_k, self.duration_r):
            if abs(h / d - round(h / d)) > 1e-9:
                raise ValueError(f"horizon {h} s is not divisible by interval {d} s")
        if abs(self.duration_k / self.duration_r - round(self.duration_k / self.duration_r)) > 1e-9:
            raise ValueError("coarse interval must be a multiple of the fine interval")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    @property
    def horizon(self) -> float:
        return self.end - self.start

    @property
    def n_coarse(self) -> int:
        return int(round(self.horizon / self.duration_k))

    @property
    def n_fine(self) -> int:
        return int(round(self.horizon / self.duration_r))

    @property
    def fine_per_coarse(self) -> int:
        return int(round(self.duration_k / self.duration_r))

    @property
    def sim_duration(self) -> float:
        return self.warmup + self.horizon

    def coarse_of_fine(self, r: int) -> int:
        if not 0 <= r < self.n_fine:
            raise IndexError(r)
        return r // self.fine_per_coarse

    def fine_bins_of(self, k: int) -> range:
        f = self.fine_per_coarse
        return range(k * f, (k + 1) * f)


class RoadNetwork:
    """Directed link graph with segments, signals, OD pairs and candidate paths.

    Treated as immutable; `with_paths` returns a new instance.
    """

    def __init__(
        self,
        nodes: Iterable[Node],
        links: Iterable[Link],
        segments: Iterable[Segment] | None = None,
        signals: Iterable[SignalPlan] = (),
        od_pairs: Iterable[tuple[str, str]] = (),
        paths: Iterable[Path] = (),
    ):
        self.nodes: dict[str, Node] = {}
        for n in nodes:
            if n.id in self.nodes:
                raise NetworkError(f"duplicate node id {n.id!r}")
            self.nodes[n.id] = n
        self.links: dict[str, Link] = {}
        for ln in links:
            if ln.id in self.links:
                raise NetworkError(f"duplicate link id {ln.id!r}")
            for end in (ln.from_node, ln.to_node):
                if end not in self.nodes:
                    raise NetworkError(f"link {ln.id!r} references missing node {end!r}")
            self.links[ln.id] = ln
        self.signals: dict[str, SignalPlan] = {}
        for sp in signals:
            if sp.node_id not in self.nodes:
                raise NetworkError(f"signal references missing node {sp.node_id!r}")
            for ph in sp.phases:
                for mv in ph.movements:
                    if mv not in self.links or self.links[mv].to_node != sp.node_id:
                        raise NetworkError(
                            f"signal at {sp.node_id!r}: movement {mv!r} is not an incoming link"
                        )
            self.signals[sp.node_id] = sp
        for ln in self.links.values():
            sp = self.signals.get(ln.to_node)
            if sp is not None and not sp.green_windows(ln.id):
                raise NetworkError(f"signal at {sp.node_id!r} never serves incoming link {ln.id!r}")
        self.od_pairs = tuple(tuple(od) for od in od_pairs)
        for o, d in self.od_pairs:
            for n in (o, d):
                if n not in self.nodes:
                    raise NetworkError(f"od pair references missing node {n!r}")
        if segments is None:
            segments = tile_segments(self.links.values())
        self.segments = tuple(segments)
        _check_segments(self.segments, self.links)
        self.paths = tuple(paths)
        for p in self.paths:
            validate_path(self, p)

        self.link_ids = tuple(self.links)
        self.link_index = {lid: i for i, lid in enumerate(self.link_ids)}
        self.segment_ids = tuple(s.id for s in self.segments)
        self.segment_index = {sid: i for i, sid in enumerate(self.segment_ids)}
        self.path_index = {p.id: i for i, p in enumerate(self.paths)}
        self._out: dict[str, list[Link]] = {n: [] for n in self.nodes}
        for ln in self.links.values():
            self._out[ln.from_node].append(ln)

    def out_links(self, node_id: str) -> list[Link]:
        return self._out[node_id]

    def segments_of(self, link_id: str) -> list[Segment]:
        return [s for s in self.segments if s.link_id == link_id]

    def with_paths(self, paths: Iterable[Path]) -> "RoadNetwork":
        return RoadNetwork(
            self.nodes.values(), self.links.values(), self.segments,
            self.signals.values(), self.od_pairs, paths,
        )

    def incidence_matrix(self, link_ids: Sequence[str] | None = None) -> np.ndarray:
        """λ as an (n_links, n_paths) 0/1 matrix."""
        link_ids = self.link_ids if link_ids is None else link_ids
        lam = np.zeros((len(link_ids), len(self.paths)), dtype=np.int64)
        for j, p in enumerate(self.paths):
            for i, lid in enumerate(link_ids):
                lam[i, j] = p.incidence(lid)
        return lam

    def to_dict(self) -> dict:
        out = {
            "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in self.nodes.values()],
            "links": [
                {
                    "id": ln.id, "from": ln.from_node, "to": ln.to_node,
                    "length_m": ln.length, "lanes": ln.lane_count,
                    "speed_limit_mps": ln.speed_limit, "kind": ln.kind,
                }
                for ln in self.links.values()
            ],
            "signals": [
                {
                    "node": sp.node_id, "cycle_s": sp.cycle_time, "offset_s": sp.offset,
                    "phases": [{"movements": list(ph.movements), "green_s": ph.green} for ph in sp.phases],
                }
                for sp in self.signals.values()
            ],
            "od_pairs": [{"origin": o, "destination": d} for o, d in self.od_pairs],
            "segments": [
                {"id": s.id, "link": s.link_id, "start_m": s.start_offset, "end_m": s.end_offset}
                for s in self.segments
            ],
        }
        if self.paths:
            out["paths"] = [
                {"id": p.id, "origin": p.od_pair[0], "destination": p.od_pair[1], "links": list(p.links)}
                for p in self.paths
            ]
        return out

    def __repr__(self) -> str:
        return (f"RoadNetwork({len(self.nodes)} nodes, {len(self.links)} links, "
                f"{len(self.segments)} segments, {len(self.paths)} paths)")


def tile_segments(links: Iterable[Link], nominal: float = HALF_MILE) -> list[Segment]:
    """Half-mile segments over every freeway link, shorter terminal segment last."""
    segs = []
    for ln in links:
        if ln.kind != "freeway":
            continue
        n_full = int(ln.length // nominal)
        edges = [i * nominal for i in range(n_full + 1)]
        if ln.length - edges[-1] > 1.0:
            edges.append(ln.length)
        else:
            edges[-1] = ln.length
        if len(edges) == 1:
            edges = [0.0, ln.length]
        for i in range(len(edges) - 1):
            segs.append(Segment(f"{ln.id}:s{i}", ln.id, edges[i], edges[i + 1], nominal))
    return segs


def _check_segments(segments: Sequence[Segment], links: Mapping[str, Link]) -> None:
    seen = set()
    by_link: dict[str, list[Segment]] = {}
    for s in segments:
        if s.id in seen:
            raise NetworkError(f"duplicate segment id {s.id!r}")
        seen.add(s.id)
        if s.link_id not in links:
            raise NetworkError(f"segment {s.id!r} references missing link {s.link_id!r}")
        ln = links[s.link_id]
        if not (0 <= s.start_offset < s.end_offset <= ln.length + 1e-9):
            raise NetworkError(f"segment {s.id!r} offsets fall outside link {ln.id!r}")
        by_link.setdefault(s.link_id, []).append(s)
    for lid, segs in by_link.items():
        segs = sorted(segs, key=lambda s: s.start_offset)
        for a, b in zip(segs, segs[1:]):
            if b.start_offset < a.end_offset - 1e-9:
                raise NetworkError(f"segment {b.id!r} overlaps segment {a.id!r} on link {lid!r}")


def validate_path(network: RoadNetwork, path: Path) -> None:
    if not path.links:
        raise NetworkError(f"path {path.id!r} is empty")
    visited = set()
    prev = None
    for lid in path.links:
        if lid not in network.links:
            raise NetworkError(f"path {path.id!r} references missing link {lid!r}")
        ln = network.links[lid]
        if prev is not None and prev.to_node != ln.from_node:
            raise NetworkError(f"path {path.id!r}: links {prev.id!r} and {lid!r} are not adjacent")
        if ln.from_node in visited:
            raise NetworkError(f"path {path.id!r} revisits node {ln.from_node!r}")
        visited.add(ln.from_node)
        prev = ln
    if prev.to_node in visited:
        raise NetworkError(f"path {path.id!r} revisits node {prev.to_node!r}")
    o, d = path.od_pair
    if network.links[path.links[0]].from_node != o or prev.to_node != d:
        raise NetworkError(f"path {path.id!r} does not connect {o!r} to {d!r}")


def incidence(path: Path, link: Link | str) -> int:
    lid = link.id if isinstance(link, Link) else link
    return path.incidence(lid)


def _cost_to_go(network: RoadNetwork, dest: str) -> dict[str, float]:
    rev: dict[str, list[tuple[str, float]]] = {}
    for ln in network.links.values():
        rev.setdefault(ln.to_node, []).append((ln.from_node, ln.free_flow_time))
    dist = {dest: 0.0}
    heap = [(0.0, dest)]
    while heap:
        d, n = heapq.heappop(heap)
        if d > dist.get(n, math.inf):
            continue
        for m, w in rev.get(n, ()):
            nd = d + w
            if nd < dist.get(m, math.inf):
                dist[m] = nd
                heapq.heappush(heap, (nd, m))
    return dist


def enumerate_paths(
    network: RoadNetwork, od_pair: tuple[str, str], max_paths: int = 3, id_prefix: str | None = None
) -> list[Path]:
    """Up to `max_paths` loop-free paths in ascending free-flow time.

    Best-first search over partial paths, guided by the exact cost-to-go, so
    complete paths come off the heap in cost order.  Equal costs are ordered
    by the lexicographic link-id sequence.
    """
    origin, dest = od_pair
    if origin == dest:
        raise NetworkError(f"degenerate od pair: origin equals destination ({origin!r})")
    for n in od_pair:
        if n not in network.nodes:
            raise NetworkError(f"unknown node {n!r}")
    h = _cost_to_go(network, dest)
    if origin not in h:
        raise NoPathError(f"no path from {origin!r} to {dest!r}")
    prefix = id_prefix if id_prefix is not None else f"{origin}->{dest}"
    heap: list[tuple[float, tuple[str, ...], float, str, frozenset]] = [
        (round(h[origin], 9), (), 0.0, origin, frozenset([origin]))
    ]
    found: list[Path] = []
    while heap and len(found) < max_paths:
        f, seq, g, node, visited = heapq.heappop(heap)
        if node == dest:
            found.append(Path(f"{prefix}#{len(found)}", (origin, dest), seq))
            continue
        for ln in network.out_links(node):
            nxt = ln.to_node
            if nxt in visited or nxt not in h:
                continue
            g2 = g + ln.free_flow_time
            heapq.heappush(heap, (round(g2 + h[nxt], 9), seq + (ln.id,), g2, nxt, visited | {nxt}))
    return found


def build_path_set(network: RoadNetwork, max_paths: int = 3) -> RoadNetwork:
    """Enumerate candidate paths for every OD pair and attach them."""
    paths = []
    for od in network.od_pairs:
        paths.extend(enumerate_paths(network, od, max_paths))
    return network.with_paths(paths)


# -- file loading -----------------------------------------------------------

def network_from_dict(doc: Mapping) -> RoadNetwork:
    try:
        nodes = [Node(str(n["id"]), float(n.get("x", 0.0)), float(n.get("y", 0.0))) for n in doc["nodes"]]
        links = [
            Link(
                str(ln["id"]), str(ln["from"]), str(ln["to"]), float(ln["length_m"]),
                int(ln.get("lanes", 1)), float(ln["speed_limit_mps"]), str(ln.get("kind", "freeway")),
            )
            for ln in doc["links"]
        ]
        signals = [
            SignalPlan(
                str(sg["node"]), float(sg["cycle_s"]),
                tuple(Phase(tuple(str(m) for m in ph["movements"]), float(ph["green_s"])) for ph in sg["phases"]),
                float(sg.get("offset_s", 0.0)),
            )
            for sg in doc.get("signals", [])
        ]
        ods = [(str(od["origin"]), str(od["destination"])) for od in doc.get("od_pairs", [])]
        segments = None
        if "segments" in doc:
            segments = [
                Segment(str(s["id"]), str(s["link"]), float(s["start_m"]), float(s["end_m"]),
                        float(s.get("nominal_m", HALF_MILE)))
                for s in doc["segments"]
            ]
    except KeyError as exc:
        raise NetworkError(f"network file is missing field {exc}") from None
    net = RoadNetwork(nodes, links, segments, signals, ods)
    if "paths" in doc:
        paths = [
            Path(str(p["id"]), (str(p["origin"]), str(p["destination"])), tuple(str(x) for x in p["links"]))
            for p in doc["paths"]
        ]
        net = net.with_paths(paths)
    return net


def load_network(network_file) -> RoadNetwork:
    """Parse and validate a JSON network file."""
    with open(network_file, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkError(f"{network_file}: invalid JSON ({exc})") from None
    return network_from_dict(doc)


def save_network(network: RoadNetwork, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(network.to_dict(), fh, indent=1)


@dataclass(frozen=True)
class ObservationSet:
    """Flow targets (veh per coarse interval, NaN = missing) and speed targets (mph)."""

    link_ids: tuple[str, ...]
    segment_ids: tuple[str, ...]
    flows: np.ndarray  # (n_links, K)
    speeds: np.ndarray  # (n_segments, R), mph
    los_table: LosTable | None = None
    grids: TimeGrids = field(default_factory=TimeGrids)

    def __post_init__(self):
        if self.flows.shape != (len(self.link_ids), self.grids.n_coarse):
            raise ObservationError(f"flow tensor shape {self.flows.shape} does not match grids")
        if self.speeds.shape != (len(self.segment_ids), self.grids.n_fine):
            raise ObservationError(f"speed tensor shape {self.speeds.shape} does not match grids")
        if np.any(self.flows[~np.isnan(self.flows)] < 0):
            raise ObservationError("negative flow target")
        if np.any(self.speeds[~np.isnan(self.speeds)] <= 0):
            raise ObservationError("speed targets must be > 0")

    @property
    def flow_mask(self) -> np.ndarray:
        return ~np.isnan(self.flows)

    @property
    def speed_mask(self) -> np.ndarray:
        return ~np.isnan(self.speeds)

    def with_flows(self, flows: np.ndarray) -> "ObservationSet":
        return replace(self, flows=np.asarray(flows, dtype=float))

    def flow(self, link_id: str, k: int) -> float:
        return float(self.flows[self.link_ids.index(link_id), k])


def _read_rows(path, required: Sequence[str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ObservationError(f"{path}: missing columns {missing}")
        return list(reader)


def _interval(raw: str, n: int, what: str, path) -> int:
    try:
        v = float(raw)
    except ValueError:
        raise ObservationError(f"{path}: malformed {what} {raw!r}") from None
    if v != int(v) or not 0 <= v < n:
        raise ObservationError(f"{path}: {what} {raw!r} outside 0..{n - 1}")
    return int(v)


def load_observations(flow_csv, speed_csv, los_csv, grids: TimeGrids, network: RoadNetwork) -> ObservationSet:
    """Read flow, speed and LOS CSVs into dense target tensors.

    Cells absent from the files stay NaN and are excluded from objectives.
    """
    flows = np.full((len(network.link_ids), grids.n_coarse), np.nan)
    for row in _read_rows(flow_csv, ("link_id", "interval_k", "count")):
        lid = row["link_id"]
        if lid not in network.link_index:
            raise ObservationError(f"{flow_csv}: unknown link id {lid!r}")
        k = _interval(row["interval_k"], grids.n_coarse, "interval_k", flow_csv)
        count = float(row["count"])
        if count < 0:
            raise ObservationError(f"{flow_csv}: negative count on link {lid!r}")
        flows[network.link_index[lid], k] = count
    speeds = np.full((len(network.segment_ids), grids.n_fine), np.nan)
    if speed_csv is not None:
        for row in _read_rows(speed_csv, ("segment_id", "interval_r", "speed_mph")):
            sid = row["segment_id"]
            if sid not in network.segment_index:
                raise ObservationError(f"{speed_csv}: unknown segment id {sid!r}")
            r = _interval(row["interval_r"], grids.n_fine, "interval_r", speed_csv)
            v = float(row["speed_mph"])
            if not v > 0:
                raise ObservationError(f"{speed_csv}: speed on segment {sid!r} must be > 0, got {v}")
            speeds[network.segment_index[sid], r] = v
    los = load_los_csv(los_csv) if los_csv is not None else None
    return ObservationSet(network.link_ids, network.segment_ids, flows, speeds, los, grids)


def write_flow_csv(path, link_ids: Sequence[str], flows: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["link_id", "interval_k", "count"])
        for i, lid in enumerate(link_ids):
            for k in range(flows.shape[1]):
                if not np.isnan(flows[i, k]):
                    w.writerow([lid, k, _num(flows[i, k])])


def write_speed_csv(path, segment_ids: Sequence[str], speeds_mph: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "interval_r", "speed_mph"])
        for i, sid in enumerate(segment_ids):
            for r in range(speeds_mph.shape[1]):
                if not np.isnan(speeds_mph[i, r]):
                    w.writerow([sid, r, repr(float(speeds_mph[i, r]))])


def write_observations(obs: ObservationSet, directory) -> dict[str, FsPath]:
    d = FsPath(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = {"flows": d / "flows.csv", "speeds": d / "speeds.csv"}
    write_flow_csv(out["flows"], obs.link_ids, obs.flows)
    write_speed_csv(out["speeds"], obs.segment_ids, obs.speeds)
    if obs.los_table is not None:
        out["los"] = d / "los.csv"
        obs.los_table.to_csv(out["los"])
    return out


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))
