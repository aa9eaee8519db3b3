"""Lower level: per-path departure-time distributions fitted to segment speeds by SPSA.

Path flows Π are held fixed.  The decision variable is one probability
vector per path over the fine bins of the horizon; agents of interval k
are spread over the bins of k in proportion to that vector.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .flowcal import PathFlowSolution
from .microsim.engine import AgentPlan, MeasurementFrame, SimulationFault, run
from .netmodel import ObservationSet, RoadNetwork, TimeGrids


class SpeedCalError(ValueError):
    pass


class SpsaFault(RuntimeError):
    """A simulation failed during the search; carries the offending point."""

    def __init__(self, message, iteration, which, perturbation, point):
        super().__init__(message)
        self.iteration = iteration
        self.which = which
        self.perturbation = perturbation
        self.point = point


def max_workers() -> int:
    """Concurrency cap for simulations, from CORRIDOR_CALIB_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("CORRIDOR_CALIB_THREADS", "1")))
    except ValueError:
        return 1


# -- simplex -----------------------------------------------------------------


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based).

    Works on a vector or row-wise on a matrix.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim == 2:
        return np.stack([project_simplex(row) for row in v]) if len(v) else v.copy()
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project non-finite values")
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, n + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    w = np.maximum(v - theta, 0.0)
    # clean up rounding so the row sums to one as tightly as floating point allows
    s = w.sum()
    if s != 1.0:
        j = int(np.argmax(w))
        w[j] = max(0.0, w[j] + (1.0 - s))
    return w


@dataclass
class InflowProfile:
    """Share of each path's agents departing in each fine bin; rows are simplexes."""

    path_ids: tuple[str, ...]
    shares: np.ndarray  # (n_paths, n_fine)

    def __post_init__(self):
        self.shares = np.asarray(self.shares, dtype=float)
        if self.shares.shape[0] != len(self.path_ids):
            raise SpeedCalError("one row of shares per path required")
        if np.any(self.shares < -1e-12) or np.any(np.abs(self.shares.sum(axis=1) - 1.0) > 1e-9):
            raise SpeedCalError("each path's shares must lie on the probability simplex")

    @classmethod
    def uniform(cls, path_ids: Sequence[str], n_bins: int) -> "InflowProfile":
        return cls(tuple(path_ids), np.full((len(path_ids), n_bins), 1.0 / n_bins))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "bin", "share"])
            for pid, row in zip(self.path_ids, self.shares):
                for b, s in enumerate(row):
                    w.writerow([pid, b, repr(float(s))])

    @classmethod
    def from_csv(cls, path, path_ids: Sequence[str], n_bins: int) -> "InflowProfile":
        shares = np.zeros((len(path_ids), n_bins))
        index = {p: j for j, p in enumerate(path_ids)}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["path_id"] not in index:
                    raise SpeedCalError(f"{path}: unknown path id {row['path_id']!r}")
                shares[index[row["path_id"]], int(row["bin"])] = float(row["share"])
        return cls(tuple(path_ids), shares)


# -- departures ----------------------------------------------------------------


def largest_remainder(n: int, weights: np.ndarray) -> np.ndarray:
    """Integer apportionment of `n` by largest remainder; ties go to the lower index."""
    w = np.asarray(weights, dtype=float)
    q = n * w / w.sum()
    base = np.floor(q + 1e-9).astype(np.int64)
    short = n - int(base.sum())
    if short > 0:
        frac = np.round(q - base, 9)
        order = np.lexsort((np.arange(len(w)), -frac))
        base[order[:short]] += 1
    return base


def assign_departures(flows: PathFlowSolution, inflow: InflowProfile, grids: TimeGrids, seed: int = 0,
                      warmup_agents: bool = True) -> list[AgentPlan]:
    """Turn (Π, I) into agent plans on the simulation clock (0 = start of warm-up).

    Within a bin the agents are evenly spaced with a seeded phase.  When
    `warmup_agents` is set, each path also receives ``π[j, 0]`` prorated
    over the warm-up period, flagged ``warmup=True`` and outside Π.
    """
    if flows.path_ids != inflow.path_ids:
        raise SpeedCalError("Π and I must list the same paths in the same order")
    if inflow.shares.shape[1] != grids.n_fine or flows.counts.shape[1] != grids.n_coarse:
        raise SpeedCalError("Π or I does not match the time grids")
    rng = np.random.default_rng(seed)
    dr, w0 = grids.duration_r, grids.warmup
    plans: list[AgentPlan] = []

    def spread(pid, count, t0, width, warm):
        if count <= 0:
            return
        phase = rng.random()
        for i in range(count):
            plans.append(AgentPlan(len(plans), pid, t0 + (i + phase) / count * width, warmup=warm))

    if warmup_agents and w0 > 0 and grids.n_coarse:
        for j, pid in enumerate(flows.path_ids):
            n_w = int(round(flows.counts[j, 0] * w0 / grids.duration_k))
            spread(pid, n_w, 0.0, w0, True)
    for j, pid in enumerate(flows.path_ids):
        for k in range(grids.n_coarse):
            n = int(flows.counts[j, k])
            if n == 0:
                continue
            bins = grids.fine_bins_of(k)
            w = inflow.shares[j, bins.start:bins.stop]
            if w.sum() <= 0:
                warnings.warn(f"path {pid} has no inflow mass in interval {k}; spreading uniformly")
                w = np.ones(len(bins))
            for b, c in zip(bins, largest_remainder(n, w)):
                spread(pid, int(c), w0 + b * dr, dr, False)
    return plans


# -- objective -------------------------------------------------------------------


@dataclass
class SpeedObjectiveReport:
    """Speed fit.

    ``objective`` sums squared errors over observed cells and divides by the
    number of segments; ``cell_mse`` is the plain per-cell mean.  Empty
    simulated cells take the segment's free-flow speed.
    """

    squared_errors: np.ndarray  # (n_seg, R), NaN where no target
    errors: np.ndarray  # simulated minus target, NaN where no target
    n_segments: int
    objective: float = field(init=False)
    cell_mse: float = field(init=False)

    def __post_init__(self):
        m = ~np.isnan(self.squared_errors)
        self.objective = float(self.squared_errors[m].sum()) / self.n_segments
        self.cell_mse = float(self.squared_errors[m].mean())

    def percentile(self, q: float) -> float:
        e = np.abs(self.errors[~np.isnan(self.errors)])
        return float(np.percentile(e, q))

    @property
    def p70(self) -> float:
        return self.percentile(70)

    @property
    def p90(self) -> float:
        return self.percentile(90)

    def histogram(self, bins=20):
        """Histogram of signed speed errors (mph)."""
        e = self.errors[~np.isnan(self.errors)]
        counts, edges = np.histogram(e, bins=bins)
        return edges, counts


def speed_objective(frame: MeasurementFrame | np.ndarray, targets, free_flow_mph=None) -> SpeedObjectiveReport:
    """Compare simulated segment speeds with targets (both mph).

    `frame` may be a MeasurementFrame or a dense simulated array whose NaN
    cells are filled from `free_flow_mph`.
    """
    tgt = targets.speeds if isinstance(targets, ObservationSet) else np.asarray(targets, dtype=float)
    if isinstance(frame, MeasurementFrame):
        sim = frame.filled_speeds()
    else:
        sim = np.array(frame, dtype=float)
        if free_flow_mph is not None:
            miss = np.isnan(sim)
            sim[miss] = np.broadcast_to(np.asarray(free_flow_mph, float)[:, None], sim.shape)[miss]
    if sim.shape != tgt.shape:
        raise SpeedCalError(f"simulated speeds {sim.shape} and targets {tgt.shape} differ in shape")
    mask = ~np.isnan(tgt) & ~np.isnan(sim)
    if not mask.any():
        raise SpeedCalError("no overlapping speed cells; the speed objective is undefined")
    err = np.where(mask, sim - np.nan_to_num(tgt), np.nan)
    return SpeedObjectiveReport(err**2, err, tgt.shape[0])


# -- SPSA --------------------------------------------------------------------------


@dataclass(frozen=True)
class SpsaOptions:
    """Gain schedule a_t = a0/(A+t+1)^alpha, c_t = c0/(t+1)^gamma.

    ``a0=None`` picks a0 so the first step moves the largest coordinate by
    ``first_step``; ``A=None`` means ``0.1 * max_iters``.  The search stops
    early once the best per-cell MSE drops below ``mse_threshold``.
    """

    a0: float | None = None
    A: float | None = None
    alpha: float = 0.602
    c0: float = 0.02
    gamma: float = 0.101
    max_iters: int = 50
    mse_threshold: float = 0.0
    seed: int = 0
    smoothing: int = 2
    first_step: float = 0.05

    def __post_init__(self):
        if self.a0 is not None and self.a0 <= 0:
            raise ValueError("a0 must be > 0")
        if self.c0 <= 0:
            raise ValueError("c0 must be > 0")
        if not 0 < self.gamma < self.alpha <= 1:
            raise ValueError("need 0 < gamma < alpha <= 1")
        if self.max_iters < 0 or self.smoothing < 1:
            raise ValueError("max_iters >= 0 and smoothing >= 1 required")


@dataclass
class SpsaResult:
    x: np.ndarray
    f: float
    trace: list[dict]
    evaluations: int
    converged: bool
    f0: float = float("nan")


def spsa_minimize(f: Callable[[np.ndarray], float], x0: np.ndarray, opts: SpsaOptions = SpsaOptions(),
                  workers: int = 1) -> SpsaResult:
    """SPSA over a matrix whose rows are probability vectors.

    Each iteration evaluates the two perturbed points and the updated
    iterate; the incumbent is the best point evaluated so far, perturbed
    points included.  The gradient is the mean of the last
    ``opts.smoothing`` raw estimates.
    """
    rng = np.random.default_rng(opts.seed)
    x = project_simplex(np.atleast_2d(np.asarray(x0, dtype=float)))
    A = 0.1 * opts.max_iters if opts.A is None else opts.A
    a0 = opts.a0
    f0 = f(x)
    best_x, best_f = x.copy(), f0
    evals = 1
    history: list[np.ndarray] = []
    trace: list[dict] = []
    pool = ThreadPoolExecutor(2) if workers > 1 else None

    def evaluate(points):
        if pool is not None:
            return list(pool.map(f, points))
        return [f(p) for p in points]

    try:
        for t in range(opts.max_iters):
            if best_f <= opts.mse_threshold:
                break
            c_t = opts.c0 / (t + 1) ** opts.gamma
            delta = rng.choice((-1.0, 1.0), size=x.shape)
            xp = project_simplex(x + c_t * delta)
            xm = project_simplex(x - c_t * delta)
            try:
                fp, fm = evaluate([xp, xm])
            except SimulationFault as exc:
                raise SpsaFault(f"simulation fault at SPSA iteration {t}: {exc}", t, "perturbation",
                                delta, (xp, xm)) from exc
            ghat = (fp - fm) / (2.0 * c_t * delta)
            history.append(ghat)
            g = np.mean(history[-opts.smoothing:], axis=0)
            if a0 is None:
                gmax = float(np.abs(g).max())
                a0 = opts.first_step * (A + 1) ** opts.alpha / gmax if gmax > 0 else opts.first_step
            a_t = a0 / (A + t + 1) ** opts.alpha
            x = project_simplex(x - a_t * g)
            try:
                fx = f(x)
            except SimulationFault as exc:
                raise SpsaFault(f"simulation fault at SPSA iteration {t}: {exc}", t, "update", delta, x) from exc
            evals += 3
            for cand, fc in ((xp, fp), (xm, fm), (x, fx)):
                if fc < best_f:
                    best_x, best_f = cand.copy(), fc
            trace.append({"iter": t, "f_plus": fp, "f_minus": fm, "f_x": fx, "f_best": best_f,
                          "step_a": a_t, "step_c": c_t})
    finally:
        if pool is not None:
            pool.shutdown()
    return SpsaResult(best_x, best_f, trace, evals, best_f <= opts.mse_threshold, f0)


def write_trace_csv(path, trace: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "f_plus", "f_minus", "f_best", "step_a", "step_c"])
        for row in trace:
            w.writerow([row["iter"]] + [repr(float(row[c])) for c in ("f_plus", "f_minus", "f_best", "step_a", "step_c")])


@dataclass
class SpeedCalResult:
    inflow: InflowProfile
    report: SpeedObjectiveReport
    frame: MeasurementFrame
    trace: list[dict]
    initial_mse: float
    converged: bool


def simulate(network: RoadNetwork, flows: PathFlowSolution, inflow: InflowProfile, grids: TimeGrids,
             seed: int = 0, dt: float = 0.5) -> MeasurementFrame:
    """One forward run h(Π, I)."""
    return run(network, assign_departures(flows, inflow, grids, seed), grids, seed=seed, dt=dt)


def spsa_calibrate(flows: PathFlowSolution, inflow0: InflowProfile | None, network: RoadNetwork,
                   targets: ObservationSet, opts: SpsaOptions = SpsaOptions(), seed: int = 0,
                   dt: float = 0.5, workers: int | None = None) -> SpeedCalResult:
    """Fit I to the speed targets with Π fixed (uniform start when `inflow0` is None).

    The SPSA objective is the per-cell speed MSE in mph², so thresholds do
    not depend on grid size.
    """
    grids = targets.grids
    inflow0 = inflow0 or InflowProfile.uniform(flows.path_ids, grids.n_fine)
    if not np.any(targets.speed_mask):
        raise SpeedCalError("speed targets are all missing")

    def f(shares):
        frame = simulate(network, flows, InflowProfile(flows.path_ids, shares), grids, seed, dt)
        return speed_objective(frame, targets).cell_mse

    res = spsa_minimize(f, inflow0.shares, opts, workers or max_workers())
    best = InflowProfile(flows.path_ids, res.x)
    frame = simulate(network, flows, best, grids, seed, dt)
    report = speed_objective(frame, targets)
    return SpeedCalResult(best, report, frame, res.trace, res.f0, res.converged)
