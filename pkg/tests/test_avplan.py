import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from corridor_calib.avplan import (NO_BREAKS, AvPlanError, AvRoute, BreakPolicy, build_schedule,
                                   effective_vehicles_per_hour, inject_and_compare, measured_vehicles_between,
                                   schedule_plans, spatial_penetration, temporal_penetration, turnaround_testbed)
from corridor_calib.microsim import AV, AgentPlan, run
from corridor_calib.netmodel import Link, Node, Path, RoadNetwork, TimeGrids


@pytest.mark.parametrize("minutes,n,expect,tol", [(42, 1, 1.43, 0.01), (34, 100, 176.0, 1.0), (60, 1, 1.0, 1e-12)])
def test_effective_rates(minutes, n, expect, tol):
    assert effective_vehicles_per_hour(minutes, n)[1] == pytest.approx(expect, abs=tol)


@given(st.floats(0.01, 1000), st.integers(0, 500))
def test_rate_identity(x, n):
    per, fleet = effective_vehicles_per_hour(60 / x, n)
    assert per == pytest.approx(x) and fleet == pytest.approx(n * x)


def test_temporal_penetration_examples():
    assert temporal_penetration(143, 4000, 0.75) == pytest.approx(143 / 3143)
    assert temporal_penetration(0, 4000) == 0.0
    assert temporal_penetration(500, 500) == pytest.approx(0.5)
    with pytest.raises(AvPlanError):
        temporal_penetration(10, 0)


@given(st.floats(0.1, 5000), st.floats(1, 10000), st.floats(0.05, 1.0), st.floats(1.01, 3.0))
def test_temporal_penetration_bounds_and_monotonicity(f, bg, share, k):
    p = temporal_penetration(f, bg, share)
    assert 0 < p < 1
    assert temporal_penetration(f * k, bg, share) > p
    assert temporal_penetration(f, bg * k, share) < p


def test_spatial_penetration():
    assert spatial_penetration(10, 100) == 10
    assert spatial_penetration(2, 0) == 0
    with pytest.raises(AvPlanError):
        spatial_penetration(1, 10)


def test_two_vehicle_schedule():
    s = build_schedule(2, 20.0, 34, NO_BREAKS)
    assert [(e.depart_s, e.route) for e in s.entries] == [(0.0, "orange"), (20.0, "yellow")]
    assert s.reserves == 0


def test_full_fleet_released_on_time():
    s = build_schedule(100, 20.0, 34)
    assert s.release_end == 2000.0
    assert s.vehicles_on_road(s.release_end) == 100
    assert s.vehicles_on_road(s.entries[-1].depart_s - 1) == 99
    assert s.reserves > 0


def test_zero_length_breaks_need_no_reserves():
    s = build_schedule(50, 20.0, 34, BreakPolicy(loops_between=2, break_loops=0.0))
    assert s.reserves == 0 and all(not e.breaks for e in s.entries)


def test_same_route_releases_keep_a_headway():
    s = build_schedule(30, 15.0, 34, routes=("a", "b", "c"))
    for r in s.routes():
        t = sorted(e.depart_s for e in s.entries if e.route == r)
        assert np.all(np.diff(t) >= s.headway)


@given(st.integers(1, 60), st.floats(5, 60), st.integers(1, 4), st.floats(0.25, 2.0), st.floats(0, 15000))
def test_drivers_are_conserved(n, headway, between, rest, t):
    s = build_schedule(n, headway, 34, BreakPolicy(between, rest))
    c = s.counts_at(t)
    assert c["on_road"] + c["on_break"] + c["in_reserve"] == s.total_drivers
    # every vehicle in service has somebody driving it
    assert c["on_road"] == s.vehicles_on_road(t)


def test_reserve_cap():
    with pytest.raises(AvPlanError, match="reserve"):
        build_schedule(100, 20.0, 34, max_reserves=3)


def test_schedule_csv(tmp_path):
    s = build_schedule(3, 20.0, 10, shift_s=3600)
    s.to_csv(tmp_path / "s.csv")
    with open(tmp_path / "s.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["driver_id", "route", "lane", "depart_s", "break_start_s", "break_end_s"]
    assert {r["driver_id"] for r in rows} == {"0", "1", "2"}


def test_lanes_skip_hov_by_default():
    s = build_schedule(200, 5.0, 34, NO_BREAKS)
    assert {e.lane for e in s.entries} <= {1, 2, 3}


def test_route_validation():
    net, routes = turnaround_testbed()
    routes["orange"].validate(net)
    with pytest.raises(AvPlanError, match="not consecutive"):
        AvRoute("bad", ("w0", "w2")).validate(net)
    with pytest.raises(AvPlanError, match="no signal"):
        AvRoute("bad", ("w0", "x_a"), turnaround_nodes=("n1",)).validate(net)
    with pytest.raises(AvPlanError, match="HOV"):
        AvRoute("bad", ("w0",), lanes=(0,)).validate(net)


def test_schedule_plans_loops_and_unknown_routes():
    net, routes = turnaround_testbed()
    s = build_schedule(4, 20.0, 10, NO_BREAKS)
    net2, plans = schedule_plans(s, routes, net, end_s=1300.0)
    assert {"av:orange", "av:yellow"} <= {p.id for p in net2.paths}
    assert all(p.cls == AV for p in plans)
    # 600 s loops: releases at 0..60 loop at most three times before 1300 s
    assert len(plans) == 12
    _, one = schedule_plans(s, routes, net, end_s=1300.0, max_loops=1)
    assert len(one) == 4
    with pytest.raises(AvPlanError, match="unknown route"):
        schedule_plans(build_schedule(1, 20.0, 10, routes=("pink",)), routes, net, 100.0)


def _straight(lanes=2):
    nodes = [Node("a"), Node("b", 3000)]
    return RoadNetwork(nodes, [Link("l", "a", "b", 3000.0, lanes, 29.0)], od_pairs=[("a", "b")],
                       paths=[Path("p", ("a", "b"), ("l",))])


def test_av_label_alone_changes_nothing():
    net = _straight()
    g = TimeGrids(0, 600, 300, 60, 120)
    rng = np.random.default_rng(0)
    times = np.sort(rng.uniform(0, 700, 250))
    hdv = [AgentPlan(i, "p", float(t)) for i, t in enumerate(times)]
    mixed = [AgentPlan(p.id, p.path_id, p.departure, cls=AV if p.id % 10 == 0 else p.cls) for p in hdv]
    a, b = run(net, hdv, g, seed=2), run(net, mixed, g, seed=2)
    assert np.array_equal(a.flows, b.flows)
    assert np.array_equal(a.speeds, b.speeds, equal_nan=True)
    assert np.array_equal(a.travel_times, b.travel_times, equal_nan=True)


def test_empty_schedule_has_zero_deltas():
    net, routes = turnaround_testbed()
    g = TimeGrids(0, 600, 300, 60, 120)
    bg = [AgentPlan(i, "bg:west", 4.0 * i) for i in range(150)]
    rep = inject_and_compare(net, bg, g, routes, build_schedule(0, 20.0, 34), seed=0)
    assert rep.av_trips == 0
    assert all(v == 0 for v in rep.deltas.values())
    assert '"relative_deltas"' in rep.to_json()


def test_measured_spacing_tracks_formula():
    net = _straight()
    g = TimeGrids(0, 600, 300, 60, 200)
    plans = [AgentPlan(i, "p", 3.0 * i, cls=AV if i % 5 == 0 else "HDV") for i in range(260)]
    sim, formula = measured_vehicles_between(net, plans, g, ["l"], sample_every=20.0)
    # every fifth vehicle is an AV, so four HDVs sit between neighbours
    assert sim == pytest.approx(4.0, abs=0.5)
    assert formula == pytest.approx(4.0, abs=0.5)
