"""Upper level: integer path flows fitted to link counts.

Each coarse interval is an independent integer least-squares problem
``min ||A pi - b||^2, pi >= 0 integer`` where ``A`` is the link/path
incidence restricted to links with a target.  The continuous relaxation is
solved with NNLS; the integer solution comes from rounding plus a ±1
neighbourhood descent, and for small path counts from an exact
branch-and-bound over box-constrained least-squares relaxations.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import lsq_linear, nnls

from .netmodel import ObservationSet, RoadNetwork

_TOL = 1e-7


class FlowCalError(ValueError):
    pass


@dataclass(frozen=True)
class FlowCalOptions:
    """Solver knobs.

    ``exact_max_paths``: intervals with at most this many active paths are
    solved to integer optimality by branch-and-bound; larger ones use
    rounding plus descent only.  ``init_seed`` randomizes the descent start
    (used to check solver consistency across initializations).
    """

    exact_max_paths: int = 8
    max_nodes: int = 20000
    init_seed: int | None = None
    workers: int = 1


@dataclass
class PathFlowSolution:
    """Integer agents per path (rows) and coarse interval (columns)."""

    path_ids: tuple[str, ...]
    counts: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != len(self.path_ids):
            raise FlowCalError("counts must be (n_paths, K)")
        if np.any(self.counts < 0):
            raise FlowCalError("path flows must be nonnegative")

    @property
    def n_intervals(self) -> int:
        return self.counts.shape[1]

    def of(self, path_id: str) -> np.ndarray:
        return self.counts[self.path_ids.index(path_id)]

    def od_matrix(self, network: RoadNetwork) -> dict[tuple[str, str], np.ndarray]:
        """Demand per OD pair and interval (the marginal of Π over paths)."""
        out: dict[tuple[str, str], np.ndarray] = {}
        for pid, row in zip(self.path_ids, self.counts):
            od = network.paths[network.path_index[pid]].od_pair
            out[od] = out.get(od, 0) + row
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "interval_k", "count"])
            for pid, row in zip(self.path_ids, self.counts):
                for k, c in enumerate(row):
                    w.writerow([pid, k, int(c)])

    @classmethod
    def from_csv(cls, path, path_ids: Sequence[str], n_intervals: int) -> "PathFlowSolution":
        counts = np.zeros((len(path_ids), n_intervals), dtype=np.int64)
        index = {p: j for j, p in enumerate(path_ids)}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["path_id"] not in index:
                    raise FlowCalError(f"{path}: unknown path id {row['path_id']!r}")
                k = int(row["interval_k"])
                if not 0 <= k < n_intervals:
                    raise FlowCalError(f"{path}: interval {k} out of range")
                counts[index[row["path_id"]], k] = int(row["count"])
        return cls(tuple(path_ids), counts)


@dataclass
class FlowObjectiveReport:
    """Fit of link flows to targets.

    ``objective`` is the squared error summed over links and intervals and
    divided by the number of links.  Missing targets are NaN in the
    per-cell arrays and excluded everywhere.
    """

    link_ids: tuple[str, ...]
    flows: np.ndarray  # (n_links, K) implied by Π
    targets: np.ndarray
    objective: float
    relaxation_objective: float = float("nan")
    squared_errors: np.ndarray = field(init=False)
    relative_errors: np.ndarray = field(init=False)

    def __post_init__(self):
        mask = ~np.isnan(self.targets)
        diff = np.where(mask, self.flows - np.nan_to_num(self.targets), np.nan)
        self.squared_errors = diff**2
        self.relative_errors = np.abs(diff) / np.maximum(np.nan_to_num(self.targets), 1.0)

    @property
    def per_link_squared_error(self) -> np.ndarray:
        return np.nansum(self.squared_errors, axis=1)

    @property
    def max_relative_error(self) -> float:
        r = self.relative_errors
        return float(np.nanmax(r)) if np.any(~np.isnan(r)) else 0.0


def link_flows(counts: np.ndarray, incidence: np.ndarray) -> np.ndarray:
    """x[i, k] = sum_j lambda[i, j] * pi[j, k]."""
    return np.asarray(incidence) @ np.asarray(counts)


def flow_objective(flows: np.ndarray, targets: np.ndarray) -> float:
    mask = ~np.isnan(targets)
    d = (flows - np.nan_to_num(targets))[mask]
    return float(d @ d) / targets.shape[0]


# -- per-interval integer least squares ----------------------------------------


def _sse(A, b, x) -> float:
    r = A @ x - b
    return float(r @ r)


def _descent(A, b, x, order, hi) -> np.ndarray:
    """Best-improvement ±1 moves until none improves; ties go to the first path in `order`."""
    x = x.astype(np.int64).copy()
    r = A @ x - b
    # change in SSE for x_j += s is 2 s (A_j . r) + s^2 |A_j|^2
    col2 = np.einsum("ij,ij->j", A, A)
    while True:
        g = A.T @ r
        best, bj, bs = -_TOL, -1, 0
        for j in order:
            for s in (-1, 1):
                if not 0 <= x[j] + s <= hi:
                    continue
                d = 2 * s * g[j] + col2[j]
                if d < best:
                    best, bj, bs = d, j, s
        if bj < 0:
            return x
        x[bj] += bs
        r = r + bs * A[:, bj]


def _relax(A, b, lo, hi):
    """Box-constrained least squares with some coordinates possibly fixed."""
    free = lo < hi
    x = lo.astype(float).copy()
    if free.any():
        rhs = b - A[:, ~free] @ lo[~free]
        Af = A[:, free]
        if Af.any():
            res = lsq_linear(Af, rhs, bounds=(lo[free], hi[free]), method="bvls")
            x[free] = res.x
        else:
            x[free] = lo[free]
    return x, _sse(A, b, x)


def _branch_and_bound(A, b, hi, incumbent, order, max_nodes):
    n = A.shape[1]
    best_x = incumbent.copy()
    best = _sse(A, b, best_x)
    stack = [(np.zeros(n), np.full(n, float(hi)))]
    nodes = 0
    while stack and best > _TOL:
        lo, up = stack.pop()
        nodes += 1
        if nodes > max_nodes:
            raise FlowCalError("branch-and-bound node limit reached")
        x, val = _relax(A, b, lo, up)
        if val >= best - _TOL:
            continue
        xr = np.clip(np.rint(x), lo, up)
        cand = _descent(A, b, xr, order, hi)
        # descent may leave the box; it is still a feasible point of the full problem
        cv = _sse(A, b, cand)
        if cv < best - _TOL:
            best, best_x = cv, cand
        frac = np.abs(x - np.rint(x))
        j = int(np.argmax(frac))
        if frac[j] < 1e-6:
            continue
        f = math.floor(x[j])
        down_up = up.copy()
        down_up[j] = f
        up_lo = lo.copy()
        up_lo[j] = f + 1
        children = [(lo, down_up), (up_lo, up)]
        if x[j] - f > 0.5:
            children.reverse()
        for c in reversed(children):  # explore the nearer side first
            if np.all(c[0] <= c[1]):
                stack.append(c)
    return best_x


def solve_interval(A: np.ndarray, b: np.ndarray, opts: FlowCalOptions = FlowCalOptions(),
                   order: Sequence[int] | None = None, rng: np.random.Generator | None = None):
    """Integer least squares for one interval.

    Returns ``(pi, relaxation_sse, integer_sse)``.  Paths are searched up
    to the bound ``sum(b)``.
    """
    n = A.shape[1]
    order = list(range(n)) if order is None else list(order)
    if A.shape[0] == 0 or n == 0:
        return np.zeros(n, dtype=np.int64), 0.0, 0.0
    hi = int(math.ceil(b.sum()))
    xc, _ = nnls(A, b)
    xc = np.minimum(xc, hi)
    relax = _sse(A, b, xc)
    x0 = np.clip(np.rint(xc), 0, hi)
    if rng is not None:
        x0 = np.clip(x0 + rng.integers(-2, 3, size=n), 0, hi)
    x = _descent(A, b, x0, order, hi)
    active = np.flatnonzero(A.any(axis=0))
    if 0 < len(active) <= opts.exact_max_paths and _sse(A, b, x) > _TOL:
        pos = {j: i for i, j in enumerate(active)}
        sub_order = [pos[j] for j in order if j in pos]
        sub = _branch_and_bound(A[:, active], b, hi, x[active], sub_order, opts.max_nodes)
        x = np.zeros(n, dtype=np.int64)
        x[active] = sub
    x[~A.any(axis=0)] = 0
    return x.astype(np.int64), relax, _sse(A, b, x)


def calibrate_flow(targets, network: RoadNetwork, opts: FlowCalOptions | None = None,
                   iteration: int = 0) -> tuple[PathFlowSolution, FlowObjectiveReport]:
    """Fit Π to link-flow targets, one independent problem per coarse interval.

    Args:
        targets: an ObservationSet, or an (n_links, K) array aligned with
            ``network.link_ids`` (NaN = missing).
        network: must carry its candidate paths.
    """
    opts = opts or FlowCalOptions()
    X = targets.flows if isinstance(targets, ObservationSet) else np.asarray(targets, dtype=float)
    if not network.paths:
        raise FlowCalError("empty path set")
    if X.shape[0] != len(network.link_ids):
        raise FlowCalError("targets must have one row per network link")
    if not np.any(~np.isnan(X)):
        raise FlowCalError("all flow targets are missing")
    if np.any(X[~np.isnan(X)] < 0):
        raise FlowCalError("flow targets must be nonnegative")
    lam = network.incidence_matrix().astype(float)
    path_ids = tuple(p.id for p in network.paths)
    order = sorted(range(len(path_ids)), key=lambda j: path_ids[j])
    K = X.shape[1]
    rng = np.random.default_rng(opts.init_seed) if opts.init_seed is not None else None
    seeds = [None] * K if rng is None else [np.random.default_rng(s) for s in rng.integers(0, 2**32, K)]

    def one(k):
        m = ~np.isnan(X[:, k])
        return solve_interval(lam[m], X[m, k], opts, order, seeds[k])

    if opts.workers > 1:
        with ThreadPoolExecutor(opts.workers) as ex:
            results = list(ex.map(one, range(K)))
    else:
        results = [one(k) for k in range(K)]
    counts = np.stack([r[0] for r in results], axis=1) if K else np.zeros((len(path_ids), 0), np.int64)
    relax = sum(r[1] for r in results) / X.shape[0]
    flows = link_flows(counts, lam)
    report = FlowObjectiveReport(network.link_ids, flows, X, flow_objective(flows, X), relax)
    return PathFlowSolution(path_ids, counts, iteration), report


def report_for(solution: PathFlowSolution, targets: np.ndarray, network: RoadNetwork) -> FlowObjectiveReport:
    """Recompute the objective report from scratch for a given Π."""
    flows = link_flows(solution.counts, network.incidence_matrix())
    return FlowObjectiveReport(network.link_ids, flows, targets, flow_objective(flows, targets))


def flow_error_histogram(report: FlowObjectiveReport, bins=10):
    """Histogram of per-link squared error (summed over intervals).

    Returns ``(edges, counts)``.  With an integer `bins` the range starts
    at 0 and ends at the largest error (or 1 when every link fits exactly).
    """
    err = report.per_link_squared_error
    if np.isscalar(bins):
        top = float(err.max()) if err.size and err.max() > 0 else 1.0
        bins = np.linspace(0.0, top, int(bins) + 1)
    counts, edges = np.histogram(err, bins=bins)
    return edges, counts


def write_histogram_csv(path, edges, counts) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
