"""Outer loop: flow calibration, SPSA, quality gate and LOS feedback on flow targets.

The upper level fits integer path flows to the current link-flow targets;
the lower level fits departure-time profiles to segment speeds.  When the
simulated speeds disagree with the data, the feedback rule retargets the
flow of one edge (using the LOS table the first time, then gradient
steps) and the loop repeats.  Sequential mode is the same pipeline run
once with no feedback.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .flowcal import FlowCalOptions, FlowObjectiveReport, PathFlowSolution, calibrate_flow
from .los import DEFAULT_LOS, LosError, LosTable
from .microsim.engine import AgentPlan, MeasurementFrame, SimulationFault
from .netmodel import ObservationSet, RoadNetwork
from .speedcal import (InflowProfile, SpeedObjectiveReport, SpsaFault, SpsaOptions, assign_departures,
                       spsa_calibrate)

__all__ = [
    "LosTable", "BilevelError", "BilevelOptions", "FeedbackOptions", "FeedbackState", "FeedbackEvent",
    "feedback_adjust", "quality_gate", "run_bilevel", "rmsn", "CalibratedScenario", "write_audit_jsonl",
    "read_audit_jsonl", "write_heatmap_csv", "read_heatmap_csv",
]

CONVERGED = "converged"
FEEDBACK = "feedback"
CONTINUE = "continue"
ITERATION_LIMIT = "iteration-limit"


class BilevelError(RuntimeError):
    """A module fault, tagged with the outer iteration it happened in."""

    def __init__(self, message, outer: int, inner: int | None = None):
        super().__init__(message)
        self.outer = outer
        self.inner = inner


def rmsn(sim, target) -> float:
    """Normalized RMSE sqrt(N * sum (s - t)^2) / sum t over cells where both exist."""
    s = np.asarray(sim, dtype=float)
    t = np.asarray(target, dtype=float)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {t.shape}")
    m = np.isfinite(s) & np.isfinite(t)
    n = int(m.sum())
    if n == 0:
        raise ValueError("no overlapping cells")
    denom = float(t[m].sum())
    if denom == 0:
        raise ValueError("target speeds sum to zero")
    return float(np.sqrt(n * np.sum((s[m] - t[m]) ** 2)) / denom)


# -- feedback ------------------------------------------------------------------


@dataclass(frozen=True)
class FeedbackOptions:
    max_consecutive: int = 5
    initial_step: float = 15.0  # veh/h per lane per mph of speed error
    shrink: float = 0.5
    growth: float = 1.2
    max_relative_change: float = 0.2  # per modification and interval

    def __post_init__(self):
        if self.max_relative_change <= 0:
            raise ValueError("max_relative_change must be > 0")
        if self.max_consecutive < 1:
            raise ValueError("max_consecutive must be >= 1")
        if self.initial_step <= 0 or not 0 < self.shrink < 1 or self.growth < 1:
            raise ValueError("need initial_step > 0, 0 < shrink < 1, growth >= 1")


@dataclass
class FeedbackState:
    """Mutable state of the feedback rule, owned by the outer loop."""

    m: int
    targets: np.ndarray  # (n_links, K) counts, NaN = no data
    counters: dict[str, int] = field(default_factory=dict)
    steps: dict[str, float] = field(default_factory=dict)
    last_sign: dict[str, int] = field(default_factory=dict)
    last_edge: str | None = None
    flow_errors: list[float] = field(default_factory=list)
    speed_mse: list[float] = field(default_factory=list)

    @classmethod
    def initial(cls, observations: ObservationSet) -> "FeedbackState":
        return cls(0, observations.flows.astype(float).copy())


@dataclass(frozen=True)
class FeedbackEvent:
    edge: str
    speed_error: float  # length-weighted mean of (simulated - target), mph
    delta: np.ndarray  # change per interval
    used_los: bool
    ranking: tuple[str, ...]

    @property
    def target_delta(self) -> float:
        return float(np.nansum(self.delta))


def _edge_errors(network: RoadNetwork, observations: ObservationSet, sim_speeds: np.ndarray):
    """Per observed edge: (mean |err|, signed mean err, per-interval |err|, per-interval target speed)."""
    g = observations.grids
    err = np.asarray(sim_speeds, dtype=float) - observations.speeds
    seg_row = {sid: i for i, sid in enumerate(observations.segment_ids)}
    out = {}
    for i, lid in enumerate(observations.link_ids):
        if not np.any(np.isfinite(observations.flows[i])):
            continue
        segs = [s for s in network.segments_of(lid) if s.id in seg_row]
        rows, w = [], []
        for s in segs:
            e = err[seg_row[s.id]]
            if np.any(np.isfinite(e)):
                rows.append(seg_row[s.id])
                w.append(s.length)
        if not rows:
            continue
        w = np.asarray(w) / np.sum(w)
        E = err[rows]
        T = observations.speeds[rows]
        abs_seg = np.array([np.nanmean(np.abs(e)) for e in E])
        sgn_seg = np.array([np.nanmean(e) for e in E])
        per_k_abs = np.full(g.n_coarse, np.nan)
        per_k_spd = np.full(g.n_coarse, np.nan)
        for k in range(g.n_coarse):
            cols = list(g.fine_bins_of(k))
            a = [np.nanmean(np.abs(e[cols])) if np.any(np.isfinite(e[cols])) else np.nan for e in E]
            t = [np.nanmean(r[cols]) if np.any(np.isfinite(r[cols])) else np.nan for r in T]
            a, t = np.asarray(a), np.asarray(t)
            ok = np.isfinite(a)
            if ok.any():
                per_k_abs[k] = float(np.sum(w[ok] * a[ok]) / np.sum(w[ok]))
            ok = np.isfinite(t)
            if ok.any():
                per_k_spd[k] = float(np.sum(w[ok] * t[ok]) / np.sum(w[ok]))
        out[lid] = (float(np.sum(w * abs_seg)), float(np.sum(w * sgn_seg)), per_k_abs, per_k_spd)
    return out


def feedback_adjust(state: FeedbackState, sim_speeds: np.ndarray, observations: ObservationSet,
                    network: RoadNetwork, los_table: LosTable | None = None,
                    opts: FeedbackOptions = FeedbackOptions()) -> FeedbackEvent:
    """Retarget the flow of the edge with the largest speed error; updates `state` in place.

    Simulated speeds above the data mean too little traffic, so the target
    rises; below the data, it falls.  The first change to an edge jumps to
    the LOS flow for the observed speed when that moves the right way,
    later changes take gradient steps whose size halves whenever the
    error changes sign and grows otherwise.  Every change is clipped to
    `max_relative_change` of the current target.  An edge chosen
    `max_consecutive` times in a row yields to the runner-up.
    """
    los = los_table or observations.los_table or DEFAULT_LOS
    errs = _edge_errors(network, observations, sim_speeds)
    ranking = sorted((lid for lid in errs if errs[lid][0] > 0), key=lambda lid: -errs[lid][0])
    if not ranking:
        raise ValueError("no observed edge has a speed discrepancy")
    edge = ranking[0]
    if state.counters.get(edge, 0) >= opts.max_consecutive:
        if len(ranking) < 2:
            raise ValueError(f"edge {edge} hit the consecutive-modification limit and has no runner-up")
        state.counters[edge] = 0
        edge = ranking[1]
    link = network.links[edge]
    if link.kind not in los.kinds:
        raise LosError(f"edge {edge}: no LOS rows for road kind {link.kind!r}")
    _, signed, per_k_abs, per_k_spd = errs[edge]
    sign = int(np.sign(signed))
    row = observations.link_ids.index(edge)
    old = state.targets[row].copy()
    to_count = link.lane_count * observations.grids.duration_k / 3600.0
    first = edge not in state.steps
    if first:
        state.steps[edge] = opts.initial_step
    elif sign != state.last_sign.get(edge, sign):
        state.steps[edge] *= opts.shrink
    else:
        state.steps[edge] *= opts.growth
    step = state.steps[edge]
    new = old.copy()
    used_los = False
    for k in np.nonzero(np.isfinite(old))[0]:
        mag = per_k_abs[k] if np.isfinite(per_k_abs[k]) else abs(signed)
        cand = old[k] + sign * step * mag * to_count
        if first and np.isfinite(per_k_spd[k]):
            q = los.flow_per_lane(link.kind, per_k_spd[k]) * to_count
            if sign * (q - old[k]) > 0:
                cand = q
                used_los = True
        bound = opts.max_relative_change * max(old[k], 1.0)
        new[k] = max(0.0, min(old[k] + bound, max(old[k] - bound, cand)))
    state.targets[row] = new
    for other in list(state.counters):
        if other != edge:
            state.counters[other] = 0
    state.counters[edge] = state.counters.get(edge, 0) + 1
    state.last_sign[edge] = sign
    state.last_edge = edge
    return FeedbackEvent(edge, signed, new - old, used_los, tuple(ranking))


# -- quality gate ----------------------------------------------------------------


@dataclass(frozen=True)
class BilevelOptions:
    mode: str = "bilevel"  # or "sequential"
    max_outer: int = 10
    flow_tolerance: float = 0.10  # max per-link relative error
    speed_mse_threshold: float = 25.0  # mph^2 per cell
    minor_change: float = 0.05  # max relative target mutation still counted as minor
    spsa: SpsaOptions = SpsaOptions()
    flowcal: FlowCalOptions = FlowCalOptions()
    feedback: FeedbackOptions = FeedbackOptions()
    seed: int = 0
    dt: float = 0.5
    workers: int | None = None

    def __post_init__(self):
        if self.mode not in ("bilevel", "sequential"):
            raise ValueError(f"mode must be 'bilevel' or 'sequential', got {self.mode!r}")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")


def quality_gate(flow_report: FlowObjectiveReport, speed_report: SpeedObjectiveReport, mutation: float,
                 m: int, opts: BilevelOptions = BilevelOptions()) -> str:
    """Verdict for outer pass `m`.

    ``iteration-limit`` on the last allowed pass, ``converged`` when flows,
    speeds and the last target mutation are all within limits, ``feedback``
    when flows or speeds are off, otherwise ``continue`` (re-solve with
    the targets unchanged).
    """
    if m >= opts.max_outer - 1:
        return ITERATION_LIMIT
    rel = flow_report.relative_errors
    flow_ok = not np.any(rel[np.isfinite(rel)] > opts.flow_tolerance)
    speed_ok = speed_report.cell_mse <= opts.speed_mse_threshold
    if flow_ok and speed_ok and mutation <= opts.minor_change:
        return CONVERGED
    if not flow_ok or not speed_ok:
        return FEEDBACK
    return CONTINUE


def _mutation(old: np.ndarray, new: np.ndarray) -> float:
    m = np.isfinite(old)
    if not m.any():
        return 0.0
    return float(np.max(np.abs(new[m] - old[m]) / np.maximum(np.abs(old[m]), 1.0)))


# -- orchestration -------------------------------------------------------------------


@dataclass
class CalibratedScenario:
    flows: PathFlowSolution
    inflow: InflowProfile
    frame: MeasurementFrame
    rmsn: float
    verdict: str
    reason: str
    audit: list[dict]
    best_pass: int
    mode: str
    seed: int
    targets: np.ndarray  # flow targets of the returned pass
    flow_report: FlowObjectiveReport | None = None
    speed_report: SpeedObjectiveReport | None = None
    traces: list[list[dict]] = field(default_factory=list)
    target_history: list[np.ndarray] = field(default_factory=list)  # flow targets used by each pass

    def plans(self) -> list[AgentPlan]:
        return assign_departures(self.flows, self.inflow, self.frame.grids, self.seed)


def run_bilevel(network: RoadNetwork, observations: ObservationSet,
                opts: BilevelOptions = BilevelOptions()) -> CalibratedScenario:
    """Run the calibration loop and return the pass with the lowest speed RMSN.

    Each pass re-solves the flows against the current targets, restarts
    SPSA (fresh gain schedule, warm-started from the previous profile) and
    passes the result through the gate.  Sequential mode stops after the
    first pass whatever the gate says.
    """
    state = FeedbackState.initial(observations)
    los = observations.los_table or DEFAULT_LOS
    inflow: InflowProfile | None = None
    mutation = 0.0
    audit: list[dict] = []
    traces: list[list[dict]] = []
    history: list[np.ndarray] = []
    best = None
    verdict, reason = ITERATION_LIMIT, "outer iteration limit reached"
    n_outer = 1 if opts.mode == "sequential" else opts.max_outer
    for m in range(n_outer):
        state.m = m
        targets_m = state.targets.copy()
        history.append(targets_m)
        try:
            sol, frep = calibrate_flow(targets_m, network, opts.flowcal, iteration=m)
        except Exception as exc:
            raise BilevelError(f"flow calibration failed at outer iteration {m}: {exc}", m) from exc
        spsa_opts = _reseed(opts.spsa, opts.spsa.seed + m)
        try:
            sc = spsa_calibrate(sol, inflow, network, observations, spsa_opts, seed=opts.seed, dt=opts.dt,
                                workers=opts.workers)
        except SpsaFault as exc:
            raise BilevelError(f"outer iteration {m}, SPSA iteration {exc.iteration}: {exc}", m,
                               exc.iteration) from exc
        except SimulationFault as exc:
            raise BilevelError(f"simulation fault at outer iteration {m}: {exc}", m) from exc
        inflow = sc.inflow
        traces.append(sc.trace)
        speeds = sc.frame.filled_speeds()
        score = rmsn(speeds, observations.speeds)
        state.flow_errors.append(float(np.nanmax(frep.relative_errors)))
        state.speed_mse.append(sc.report.cell_mse)
        gate_opts = opts if opts.mode == "bilevel" else _no_limit(opts)
        v = quality_gate(frep, sc.report, mutation, m, gate_opts)
        rec = {"m": m, "flow_mse": frep.objective, "speed_mse": sc.report.cell_mse, "rmsn": score,
               "modified_edge": None, "target_delta": 0.0, "verdict": v, "edge_speed_error": None,
               "spsa_seed": spsa_opts.seed, "sim_seed": opts.seed, "spsa_iters": len(sc.trace),
               "max_flow_rel_error": state.flow_errors[-1], "mutation": mutation}
        if best is None or score < best[0]:
            best = (score, m, sol, sc, targets_m, frep)
        if opts.mode == "sequential":
            audit.append(rec)
            verdict = CONVERGED if v == CONVERGED else "sequential"
            reason = "gate passed" if v == CONVERGED else "single pass without feedback"
            break
        if v in (CONVERGED, ITERATION_LIMIT):
            audit.append(rec)
            verdict = v
            reason = "flow, speed and target mutation within limits" if v == CONVERGED \
                else "outer iteration limit reached"
            break
        if v == FEEDBACK:
            try:
                ev = feedback_adjust(state, speeds, observations, network, los, opts.feedback)
            except ValueError as exc:
                audit.append(rec)
                verdict, reason = v, f"feedback impossible: {exc}"
                break
            rec.update(modified_edge=ev.edge, target_delta=ev.target_delta, edge_speed_error=ev.speed_error,
                       used_los=ev.used_los)
        mutation = _mutation(targets_m, state.targets)
        audit.append(rec)
    score, bm, sol, sc, targets_b, frep = best
    return CalibratedScenario(sol, sc.inflow, sc.frame, score, verdict, reason, audit, bm, opts.mode, opts.seed,
                              targets_b, frep, sc.report, traces, history)


def _reseed(o: SpsaOptions, seed: int) -> SpsaOptions:
    return replace(o, seed=seed)


def _no_limit(o: BilevelOptions) -> BilevelOptions:
    return replace(o, max_outer=10**9)


# -- exports ----------------------------------------------------------------------------


def write_audit_jsonl(path, audit: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in audit:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_audit_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_heatmap_csv(path, segment_ids: Sequence[str], speeds: np.ndarray) -> None:
    """Segments x fine intervals of mean speed in mph; empty cells are left blank."""
    speeds = np.asarray(speeds, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id"] + [str(r) for r in range(speeds.shape[1])])
        for sid, row in zip(segment_ids, speeds):
            w.writerow([sid] + ["" if np.isnan(v) else repr(float(v)) for v in row])


def read_heatmap_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    ids = [r[0] for r in rows[1:]]
    data = np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows[1:]], dtype=float)
    return ids, data.reshape(len(ids), len(rows[0]) - 1)
