"""Agent-based corridor simulation built on the compiled kernel."""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..netmodel import MPH, RoadNetwork, TimeGrids
from . import kernel as K
from .models import BandoFtlParams, CollisionError, IdmParams

HDV, AV = "HDV", "AV"
DEFAULT_DT = 0.5


class SimulationFault(RuntimeError):
    """Raised when a run cannot continue (collision, bad plan)."""

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


@dataclass(frozen=True)
class AgentPlan:
    id: int
    path_id: str
    departure: float  # simulation clock, s (0 = start of warm-up)
    cls: str = HDV
    lane: int | None = None
    params: IdmParams | BandoFtlParams | None = None
    warmup: bool = False


@dataclass
class MeasurementFrame:
    """Simulated observations and indicators from one run.

    Speeds are mph with NaN where no vehicle was sampled.
    """

    link_ids: tuple[str, ...]
    segment_ids: tuple[str, ...]
    flows: np.ndarray  # (n_links, K) int
    speeds: np.ndarray  # (n_segments, R) mph
    free_flow_mph: np.ndarray  # (n_segments,)
    agent_ids: np.ndarray
    agent_classes: np.ndarray
    travel_times: np.ndarray  # s, NaN if not arrived
    gap_stats: dict
    net_mean_speed: np.ndarray  # (R,) m/s
    net_density: np.ndarray  # (R,) veh/km/lane
    queue_max: dict
    queue_mean: dict
    spillback: dict
    diagnostics: dict
    grids: TimeGrids = field(default_factory=TimeGrids)

    def mean_travel_time(self, cls: str | None = None, warmup: bool | None = None) -> float:
        mask = ~np.isnan(self.travel_times)
        if cls is not None:
            mask &= self.agent_classes == cls
        tt = self.travel_times[mask]
        return float(tt.mean()) if tt.size else float("nan")

    def flow_of(self, link_id: str, k: int) -> int:
        return int(self.flows[self.link_ids.index(link_id), k])

    def filled_speeds(self) -> np.ndarray:
        """Speeds with empty cells replaced by the segment free-flow speed."""
        out = self.speeds.copy()
        miss = np.isnan(out)
        out[miss] = np.broadcast_to(self.free_flow_mph[:, None], out.shape)[miss]
        return out

    def equals(self, other: "MeasurementFrame") -> bool:
        same = (
            np.array_equal(self.flows, other.flows)
            and np.array_equal(self.speeds, other.speeds, equal_nan=True)
            and np.array_equal(self.travel_times, other.travel_times, equal_nan=True)
            and np.array_equal(self.net_mean_speed, other.net_mean_speed, equal_nan=True)
        )
        return bool(same and self.gap_stats == other.gap_stats and self.diagnostics == other.diagnostics)

    def to_csv(self, directory) -> dict:
        """Write flows and speeds in the observation file schemas."""
        from ..netmodel import write_flow_csv, write_speed_csv
        from pathlib import Path as _P

        d = _P(directory)
        d.mkdir(parents=True, exist_ok=True)
        out = {"flows": d / "sim_flows.csv", "speeds": d / "sim_speeds.csv"}
        write_flow_csv(out["flows"], self.link_ids, self.flows.astype(float))
        write_speed_csv(out["speeds"], self.segment_ids, self.speeds)
        return out


class World:
    """Complete simulation state: static network arrays plus vehicle arrays."""

    def __init__(self, network: RoadNetwork, plans: Sequence[AgentPlan], grids: TimeGrids,
                 seed: int = 0, dt: float = DEFAULT_DT):
        self.network = network
        self.grids = grids
        self.dt = float(dt)
        self._build_network(network)
        self._build_vehicles(network, plans, seed)
        L, S = len(network.link_ids), len(network.segments)
        Kc, R = grids.n_coarse, grids.n_fine
        self.cross = np.zeros((L, Kc), dtype=np.int64)
        self.seg_sum = np.zeros((S, R))
        self.seg_cnt = np.zeros((S, R), dtype=np.int64)
        self.net_vsum = np.zeros(R)
        self.net_nsum = np.zeros(R)
        self.net_steps = np.zeros(R, dtype=np.int64)
        self.gapst = np.array([0.0, 0.0, 0.0, np.inf, -np.inf])
        self.q_max = np.zeros(L, dtype=np.int64)
        self.q_sum = np.zeros(L)
        self.q_steps = np.zeros(L, dtype=np.int64)
        self.spill = np.zeros(L, dtype=np.int64)
        self.diag = np.zeros(K.ND, dtype=np.int64)
        self.fault = np.zeros(4)
        self.state = np.zeros(3, dtype=np.int64)

    # -- construction ------------------------------------------------------
    def _build_network(self, net: RoadNetwork) -> None:
        L = len(net.link_ids)
        self.lf = np.zeros((L, 4))
        self.li = np.zeros((L, K.NLI), dtype=np.int64)
        max_gw = 1
        for sp in net.signals.values():
            max_gw = max(max_gw, len(sp.phases))
        self.gw = np.zeros((L, max_gw, 2))
        seg_pos = {}
        for s_idx, s in enumerate(net.segments):
            seg_pos.setdefault(s.link_id, []).append(s_idx)
        # kernel expects each link's segments contiguous and ordered
        order = []
        for lid in net.link_ids:
            idx = sorted(seg_pos.get(lid, []), key=lambda i: net.segments[i].start_offset)
            order.extend(idx)
        self.seg_order = np.array(order, dtype=np.int64)
        self.seg_bounds = np.zeros((len(order), 2))
        cursor = 0
        for i, lid in enumerate(net.link_ids):
            ln = net.links[lid]
            self.lf[i, K.LF_LEN] = ln.length
            self.lf[i, K.LF_VLIM] = ln.speed_limit
            self.li[i, K.LI_LANES] = ln.lane_count
            self.li[i, K.LI_RAMP] = int(ln.kind == "ramp")
            segs = sorted(seg_pos.get(lid, []), key=lambda j: net.segments[j].start_offset)
            self.li[i, K.LI_SEG0] = cursor
            self.li[i, K.LI_NSEG] = len(segs)
            for j in segs:
                self.seg_bounds[cursor] = (net.segments[j].start_offset, net.segments[j].end_offset)
                cursor += 1
            sp = net.signals.get(ln.to_node)
            if sp is not None:
                self.lf[i, K.LF_CYCLE] = sp.cycle_time
                self.lf[i, K.LF_OFFSET] = sp.offset
                windows = sp.green_windows(lid)
                self.li[i, K.LI_NGW] = len(windows)
                for g, (lo, hi) in enumerate(windows):
                    self.gw[i, g] = (lo, hi)
        if net.paths:
            maxlen = max(len(p.links) for p in net.paths)
        else:
            maxlen = 1
        self.path_links = np.full((max(len(net.paths), 1), maxlen + 1), -1, dtype=np.int64)
        self.path_n = np.zeros(max(len(net.paths), 1), dtype=np.int64)
        for j, p in enumerate(net.paths):
            self.path_n[j] = len(p.links)
            for q, lid in enumerate(p.links):
                self.path_links[j, q] = net.link_index[lid]

    def _build_vehicles(self, net: RoadNetwork, plans: Sequence[AgentPlan], seed: int) -> None:
        rng = np.random.default_rng(seed)
        plans = list(plans)
        ids = [p.id for p in plans]
        if len(set(ids)) != len(ids):
            raise SimulationFault("duplicate agent ids in plans")
        tie = rng.permutation(len(plans))
        order = sorted(range(len(plans)), key=lambda i: (plans[i].departure, tie[i], plans[i].id))
        self.plans = [plans[i] for i in order]
        N = len(self.plans)
        self.vf = np.zeros((N, K.NF))
        self.vi = np.zeros((N, K.NI), dtype=np.int64)
        self.vi[:, K.I_FIXED] = -1
        self.act = np.zeros(N, dtype=np.int64)
        sim_end = self.grids.sim_duration
        default = IdmParams()
        for n, pl in enumerate(self.plans):
            if pl.path_id not in net.path_index:
                raise SimulationFault(f"agent {pl.id}: unknown path {pl.path_id!r}", agent=pl.id)
            if not 0 <= pl.departure <= sim_end:
                raise SimulationFault(f"agent {pl.id}: departure {pl.departure} outside simulated span", agent=pl.id)
            prm = pl.params or default
            self.vf[n, K.F_DEPART] = pl.departure
            self.vf[n, K.F_TARR] = np.nan
            self.vf[n, K.F_TENTER] = np.nan
            self.vi[n, K.I_PATH] = net.path_index[pl.path_id]
            if pl.lane is not None:
                if pl.lane < 0:
                    raise SimulationFault(f"agent {pl.id}: negative lane", agent=pl.id)
                self.vi[n, K.I_FIXED] = pl.lane
            if isinstance(prm, BandoFtlParams):
                self.vi[n, K.I_MODEL] = K.MODEL_BANDO
                self.vf[n, [K.F_ALPHA, K.F_BETA, K.F_VMAX, K.F_D0, K.F_LEN, K.F_BMAX]] = (
                    prm.alpha, prm.beta, prm.v_max, prm.d0, prm.length, prm.b_max)
                self.vf[n, [K.F_S0, K.F_T, K.F_SF]] = (2.0, 1.0, 1.0)
            else:
                self.vi[n, K.I_MODEL] = K.MODEL_IDM
                self.vf[n, [K.F_A, K.F_B, K.F_T, K.F_S0, K.F_SF, K.F_DELTA, K.F_LEN, K.F_BMAX]] = (
                    prm.a, prm.b, prm.T, prm.s_m, prm.speed_factor, prm.delta, prm.length, prm.b_max)

    # -- state access ------------------------------------------------------
    @property
    def time(self) -> float:
        return self.state[K.S_STEP] * self.dt

    @property
    def active(self) -> np.ndarray:
        return self.act[: self.state[K.S_NACT]].copy()

    def vehicle_state(self) -> list[dict]:
        """Snapshot of active vehicles: id, link, lane, position, speed, gap."""
        out = []
        net = self.network
        act = self.active
        for k in act:
            lidx = self.path_links[self.vi[k, K.I_PATH], self.vi[k, K.I_PIDX]]
            out.append({
                "agent_id": self.plans[k].id, "link_id": net.link_ids[lidx],
                "lane": int(self.vi[k, K.I_LANE]), "pos_m": float(self.vf[k, K.F_POS]),
                "speed_mps": float(self.vf[k, K.F_SPD]), "cls": self.plans[k].cls,
            })
        # same-lane gaps
        groups: dict[tuple, list[dict]] = {}
        for row in out:
            groups.setdefault((row["link_id"], row["lane"]), []).append(row)
        by_id = {p.id: p for p in self.plans}
        for rows in groups.values():
            rows.sort(key=lambda r: r["pos_m"])
            for a, b in zip(rows, rows[1:]):
                prm = by_id[b["agent_id"]].params or IdmParams()
                a["gap_m"] = b["pos_m"] - prm.length - a["pos_m"]
            rows[-1]["gap_m"] = float("nan")
        return out

    def copy(self) -> "World":
        w = copy.copy(self)
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                setattr(w, name, val.copy())
        return w

    def advance(self, n_steps: int) -> None:
        g = self.grids
        status = K.advance(
            int(n_steps), self.dt, g.warmup, g.horizon, g.duration_k, g.duration_r, g.start - g.warmup,
            self.vf, self.vi, self.state, self.act, self.lf, self.li, self.gw, self.seg_bounds,
            self.path_links, self.path_n,
            self.cross, self.seg_sum, self.seg_cnt, self.net_vsum, self.net_nsum, self.net_steps, self.gapst,
            self.q_max, self.q_sum, self.q_steps, self.spill, self.diag, self.fault,
        )
        if status != 0:
            t, f, l, gap = self.fault
            fa, la = self.plans[int(f)].id, self.plans[int(l)].id
            raise SimulationFault(
                f"collision at t={t:.2f}s: agent {fa} reached leader {la} (gap {gap:.3f} m)",
                time=t, follower=fa, leader=la, gap=gap,
            )

    # -- results -----------------------------------------------------------
    def frame(self) -> MeasurementFrame:
        net, g = self.network, self.grids
        n_seg = len(net.segments)
        speeds_sorted = np.where(self.seg_cnt > 0, self.seg_sum / np.maximum(self.seg_cnt, 1), np.nan) / MPH
        speeds = np.full((n_seg, g.n_fine), np.nan)
        speeds[self.seg_order] = speeds_sorted
        ff = np.array([
            net.links[s.link_id].speed_limit * IdmParams().speed_factor / MPH for s in net.segments
        ])
        tt = self.vf[:, K.F_TARR] - self.vf[:, K.F_DEPART]
        nst = np.maximum(self.net_steps, 1)
        lane_km = sum(ln.length * ln.lane_count for ln in net.links.values()) / 1000.0
        cnt, s1, s2, mn, mx = self.gapst
        gap_stats = {
            "count": int(cnt),
            "mean": s1 / cnt if cnt else float("nan"),
            "variance": max(s2 / cnt - (s1 / cnt) ** 2, 0.0) if cnt else float("nan"),
            "min": float(mn) if cnt else float("nan"),
            "max": float(mx) if cnt else float("nan"),
        }
        sig_links = [net.link_ids[i] for i in range(len(net.link_ids)) if self.lf[i, K.LF_CYCLE] > 0]
        li = net.link_index
        n_act = int(self.state[K.S_NACT])
        pending = int(np.sum(self.vi[:, K.I_STATUS] == K.PENDING))
        diagnostics = {
            "departed": int(self.diag[K.D_DEPARTED]),
            "arrived": int(self.diag[K.D_ARRIVED]),
            "in_network": n_act,
            "pending": pending,
            "deferred": int(self.diag[K.D_DEFERRED]) + pending,
            "entry_holds": int(self.diag[K.D_HOLDS]),
            "merge_yields": int(self.diag[K.D_MERGE_YIELDS]),
            "lane_changes": int(self.diag[K.D_LANE_CHANGES]),
        }
        return MeasurementFrame(
            link_ids=net.link_ids,
            segment_ids=net.segment_ids,
            flows=self.cross.copy(),
            speeds=speeds,
            free_flow_mph=ff,
            agent_ids=np.array([p.id for p in self.plans], dtype=np.int64),
            agent_classes=np.array([p.cls for p in self.plans], dtype=object),
            travel_times=tt,
            gap_stats=gap_stats,
            net_mean_speed=np.where(self.net_nsum > 0, self.net_vsum / np.maximum(self.net_nsum, 1), np.nan),
            net_density=self.net_nsum / nst / lane_km,
            queue_max={lid: int(self.q_max[li[lid]]) for lid in sig_links},
            queue_mean={lid: float(self.q_sum[li[lid]] / max(self.q_steps[li[lid]], 1)) for lid in sig_links},
            spillback={lid: bool(self.spill[li[lid]]) for lid in sig_links},
            diagnostics=diagnostics,
            grids=g,
        )


def step(world: World, dt: float | None = None) -> World:
    """Return the world advanced by one time step; the input is left untouched."""
    w = world.copy()
    if dt is not None:
        if not dt > 0:
            raise ValueError("dt must be > 0")
        if w.state[K.S_STEP] != 0 and dt != w.dt:
            raise ValueError("dt cannot change after the first step")
        w.dt = float(dt)
    w.advance(1)
    return w


def run(network: RoadNetwork, plans: Iterable[AgentPlan], grids: TimeGrids, seed: int = 0,
        dt: float = DEFAULT_DT, trajectory_file=None, trajectory_every: float = 1.0) -> MeasurementFrame:
    """Simulate warm-up plus horizon and return the measured frame.

    Measurements cover the horizon only; the warm-up loads the network.
    """
    world = World(network, list(plans), grids, seed, dt)
    n_total = int(round(grids.sim_duration / dt))
    if trajectory_file is None:
        world.advance(n_total)
    else:
        every = max(1, int(round(trajectory_every / dt)))
        with open(trajectory_file, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "agent_id", "link_id", "lane", "pos_m", "speed_mps", "gap_m"])
            done = 0
            while done < n_total:
                n = min(every, n_total - done)
                world.advance(n)
                done += n
                for row in world.vehicle_state():
                    w.writerow([f"{world.time:.2f}", row["agent_id"], row["link_id"], row["lane"],
                                f"{row['pos_m']:.3f}", f"{row['speed_mps']:.3f}", f"{row['gap_m']:.3f}"])
    return world.frame()


__all__ = ["AgentPlan", "MeasurementFrame", "SimulationFault", "World", "run", "step", "HDV", "AV",
           "CollisionError", "DEFAULT_DT"]
