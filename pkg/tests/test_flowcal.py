import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corridor_calib.flowcal import (FlowCalError, FlowCalOptions, PathFlowSolution, calibrate_flow,
                                    flow_error_histogram, flow_objective, link_flows, report_for,
                                    solve_interval, write_histogram_csv)
from corridor_calib.netmodel import Link, Node, RoadNetwork, build_path_set


def brute_force(A, b):
    """Smallest integer SSE over every pi in [0, max(b)]^n."""
    top = int(max(b.max(), 0))
    best = np.inf
    for pi in itertools.product(range(top + 1), repeat=A.shape[1]):
        best = min(best, float(np.sum((A @ np.array(pi) - b) ** 2)))
    return best


def instance(rng):
    n_links, n_paths = rng.integers(1, 5), rng.integers(1, 4)
    A = rng.integers(0, 2, size=(n_links, n_paths)).astype(float)
    b = rng.integers(0, 13, size=n_links).astype(float)
    return A, b


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        A, b = instance(rng)
        pi, _, sse = solve_interval(A, b)
        assert pi.min() >= 0
        assert sse == pytest.approx(float(np.sum((A @ pi - b) ** 2)))
        assert sse == pytest.approx(brute_force(A, b), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_consistent_targets_are_fit_exactly(data):
    n_links, n_paths = data.draw(st.integers(1, 4)), data.draw(st.integers(1, 3))
    A = np.array(data.draw(st.lists(st.lists(st.integers(0, 1), min_size=n_paths, max_size=n_paths),
                                    min_size=n_links, max_size=n_links)), dtype=float)
    pi_true = np.array(data.draw(st.lists(st.integers(0, 4), min_size=n_paths, max_size=n_paths)))
    b = A @ pi_true
    pi, _, sse = solve_interval(A, b)
    assert sse == 0.0
    assert np.array_equal(A @ pi, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_integer_objective_bounded_below_by_relaxation(seed):
    A, b = instance(np.random.default_rng(seed))
    _, relax, sse = solve_interval(A, b)
    assert relax <= sse + 1e-9


def corridor():
    nodes = [Node(n) for n in ("o", "a", "b", "d", "r")]
    links = [Link("oa", "o", "a", 1000, 3, 29.0), Link("ab", "a", "b", 1000, 3, 29.0),
             Link("bd", "b", "d", 1000, 3, 29.0), Link("ra", "r", "a", 300, 1, 20.0, "ramp"),
             Link("br", "b", "r", 300, 1, 20.0, "ramp")]
    net = RoadNetwork(nodes, links, od_pairs=[("o", "d"), ("r", "d"), ("o", "r")])
    return build_path_set(net, 3)


def test_calibrate_recovers_consistent_counts():
    net = corridor()
    lam = net.incidence_matrix()
    truth = np.array([[40, 10], [5, 7], [3, 0]])[: len(net.paths)]
    X = link_flows(truth, lam).astype(float)
    sol, rep = calibrate_flow(X, net)
    assert rep.objective == 0.0
    assert np.array_equal(link_flows(sol.counts, lam), X)
    assert rep.max_relative_error == 0.0


def test_missing_targets_are_ignored():
    net = corridor()
    X = link_flows(np.array([[40], [5], [3]]), net.incidence_matrix()).astype(float)
    X[1, 0] = np.nan
    sol, rep = calibrate_flow(X, net)
    assert rep.objective == 0.0
    assert np.isnan(rep.squared_errors[1, 0])


def test_objective_normalized_by_link_count():
    flows = np.array([[1.0, 2.0], [3.0, 4.0]])
    targets = np.array([[0.0, 2.0], [np.nan, 1.0]])
    assert flow_objective(flows, targets) == pytest.approx((1 + 0 + 9) / 2)


def test_random_starts_agree():
    net = corridor()
    rng = np.random.default_rng(5)
    X = rng.integers(0, 60, size=(len(net.link_ids), 3)).astype(float)
    base = calibrate_flow(X, net)[1].objective
    for s in range(4):
        assert calibrate_flow(X, net, FlowCalOptions(init_seed=s))[1].objective == pytest.approx(base)


def test_report_for_matches():
    net = corridor()
    X = np.full((len(net.link_ids), 1), 7.0)
    sol, rep = calibrate_flow(X, net)
    assert report_for(sol, X, net).objective == pytest.approx(rep.objective)


@pytest.mark.parametrize("bad,match", [
    (np.full((5, 1), np.nan), "missing"), (np.full((5, 1), -1.0), "nonnegative"), (np.ones((4, 1)), "one row"),
])
def test_calibrate_rejects(bad, match):
    with pytest.raises(FlowCalError, match=match):
        calibrate_flow(bad, corridor())


def test_empty_path_set():
    net = corridor().with_paths([])
    with pytest.raises(FlowCalError, match="empty path set"):
        calibrate_flow(np.ones((5, 1)), net)


def test_solution_validation_and_csv(tmp_path):
    with pytest.raises(FlowCalError):
        PathFlowSolution(("a",), np.array([[-1]]))
    sol = PathFlowSolution(("a", "b"), np.array([[1, 2], [3, 4]]))
    sol.to_csv(tmp_path / "p.csv")
    back = PathFlowSolution.from_csv(tmp_path / "p.csv", ("a", "b"), 2)
    assert np.array_equal(back.counts, sol.counts)
    with pytest.raises(FlowCalError, match="unknown path"):
        PathFlowSolution.from_csv(tmp_path / "p.csv", ("a",), 2)


def test_histogram(tmp_path):
    net = corridor()
    rng = np.random.default_rng(1)
    X = rng.integers(0, 30, size=(len(net.link_ids), 2)).astype(float)
    _, rep = calibrate_flow(X, net)
    edges, counts = flow_error_histogram(rep, bins=4)
    assert counts.sum() == len(net.link_ids) and len(edges) == 5
    write_histogram_csv(tmp_path / "h.csv", edges, counts)
    assert (tmp_path / "h.csv").read_text().startswith("bin_lo,bin_hi,count")
