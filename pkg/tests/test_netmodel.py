import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corridor_calib.los import DEFAULT_LOS, LosError, LosRow, LosTable, load_los_csv
from corridor_calib.netmodel import (HALF_MILE, Link, NetworkError, Node, NoPathError, ObservationError,
                                     ObservationSet, Path, Phase, RoadNetwork, SignalPlan, TimeGrids,
                                     build_path_set, enumerate_paths, load_network, load_observations,
                                     save_network, tile_segments, write_observations)


def diamond():
    nodes = [Node(n) for n in "oabd"]
    links = [
        Link("oa", "o", "a", 1000, 2, 25.0), Link("ob", "o", "b", 1000, 2, 20.0),
        Link("ad", "a", "d", 1000, 2, 25.0), Link("bd", "b", "d", 1000, 2, 25.0),
        Link("ab", "a", "b", 100, 1, 10.0),
    ]
    return RoadNetwork(nodes, links, od_pairs=[("o", "d")])


def test_link_validation():
    with pytest.raises(NetworkError, match="length"):
        Link("x", "a", "b", 0.0, 1, 20.0)
    with pytest.raises(NetworkError, match="lane_count"):
        Link("x", "a", "b", 10.0, 0, 20.0)


def test_missing_node_named():
    with pytest.raises(NetworkError, match="'zz'"):
        RoadNetwork([Node("a")], [Link("x", "a", "zz", 10.0, 1, 20.0)])


def test_signal_must_serve_every_incoming_link():
    nodes = [Node("a"), Node("b"), Node("c")]
    links = [Link("x", "a", "b", 100, 1, 10.0), Link("y", "c", "b", 100, 1, 10.0)]
    with pytest.raises(NetworkError, match="never serves"):
        RoadNetwork(nodes, links, signals=[SignalPlan("b", 60, (Phase(("x",), 30), Phase((), 30)))])


def test_signal_green_windows():
    sp = SignalPlan("b", 60.0, (Phase(("x",), 20.0), Phase(("y",), 40.0)), offset=5.0)
    assert sp.is_green("x", 5.0) and sp.is_green("x", 24.9)
    assert not sp.is_green("x", 25.1)
    assert sp.is_green("y", 30.0) and sp.is_green("x", 66.0)


def test_paths_in_cost_order():
    net = diamond()
    paths = enumerate_paths(net, ("o", "d"), max_paths=3)
    # the two 90 s paths tie and are ordered by their link ids
    assert [p.links for p in paths] == [("oa", "ad"), ("oa", "ab", "bd"), ("ob", "bd")]
    assert paths[0].id == "o->d#0"


def test_no_path_and_degenerate_od():
    net = diamond()
    with pytest.raises(NoPathError):
        enumerate_paths(net, ("d", "o"))
    with pytest.raises(NetworkError, match="degenerate"):
        enumerate_paths(net, ("o", "o"))


def _all_simple_paths(net, o, d):
    out = []

    def dfs(node, seq, seen):
        if node == d:
            out.append(seq)
            return
        for ln in net.out_links(node):
            if ln.to_node not in seen:
                dfs(ln.to_node, seq + (ln.id,), seen | {ln.to_node})

    dfs(o, (), {o})
    return out


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_enumeration_matches_exhaustive_search(data):
    n = data.draw(st.integers(3, 6))
    nodes = [Node(f"v{i}") for i in range(n)]
    links = []
    for i in range(n):
        for j in range(n):
            if i != j and data.draw(st.booleans()):
                links.append(Link(f"e{i}{j}", f"v{i}", f"v{j}", data.draw(st.integers(1, 9)) * 100.0, 1, 10.0))
    net = RoadNetwork(nodes, links)
    exhaustive = _all_simple_paths(net, "v0", f"v{n - 1}")
    cost = lambda seq: round(sum(net.links[x].free_flow_time for x in seq), 9)  # noqa: E731
    if not exhaustive:
        with pytest.raises(NoPathError):
            enumerate_paths(net, ("v0", f"v{n - 1}"))
        return
    got = enumerate_paths(net, ("v0", f"v{n - 1}"), max_paths=3)
    want = sorted(exhaustive, key=lambda s: (cost(s), s))[:3]
    assert [cost(p.links) for p in got] == [cost(s) for s in want]
    assert len({p.links for p in got}) == len(got)


def test_incidence_matrix():
    net = build_path_set(diamond(), 3)
    lam = net.incidence_matrix()
    assert lam.shape == (5, 3)
    assert lam[:, 0].tolist() == [1, 0, 1, 0, 0]
    assert lam.sum(axis=0).tolist() == [2, 3, 2]


def test_tile_segments_half_mile():
    segs = tile_segments([Link("m", "a", "b", 2000.0, 3, 29.0), Link("r", "b", "c", 300.0, 1, 20.0, "ramp")])
    assert [s.link_id for s in segs] == ["m", "m", "m"]
    assert segs[0].length == pytest.approx(HALF_MILE)
    assert segs[-1].end_offset == 2000.0


def test_network_round_trip(tmp_path):
    net = build_path_set(diamond())
    save_network(net, tmp_path / "n.json")
    again = load_network(tmp_path / "n.json")
    assert again.to_dict() == net.to_dict()


def test_network_missing_field(tmp_path):
    p = tmp_path / "n.json"
    p.write_text(json.dumps({"nodes": [{"id": "a"}], "links": [{"id": "x", "from": "a", "to": "a"}]}))
    with pytest.raises(NetworkError, match="length_m"):
        load_network(p)


@pytest.mark.parametrize("args", [(0, 0, 60, 30, 0), (0, 100, 60, 30, 0), (0, 120, 60, 60, 0), (0, 120, 60, 30, -1)])
def test_time_grid_validation(args):
    with pytest.raises(ValueError):
        TimeGrids(*args)


def test_time_grid_mapping():
    g = TimeGrids(0, 7200, 3600, 60, 1200)
    assert (g.n_coarse, g.n_fine, g.fine_per_coarse) == (2, 120, 60)
    assert g.coarse_of_fine(59) == 0 and g.coarse_of_fine(60) == 1
    assert g.fine_bins_of(1) == range(60, 120)
    assert g.sim_duration == 8400


def test_observation_round_trip(tmp_path):
    net = build_path_set(diamond())
    g = TimeGrids(0, 120, 60, 30, 0)
    flows = np.array([[10, np.nan], [3, 4], [0, 1], [2, 2], [5, 5]], dtype=float)
    speeds = np.full((len(net.segment_ids), g.n_fine), 55.0)
    speeds[0, 1] = np.nan
    obs = ObservationSet(net.link_ids, net.segment_ids, flows, speeds, DEFAULT_LOS, g)
    files = write_observations(obs, tmp_path)
    back = load_observations(files["flows"], files["speeds"], files["los"], g, net)
    assert np.array_equal(back.flows, flows, equal_nan=True)
    assert np.array_equal(back.speeds, speeds, equal_nan=True)
    assert back.los_table == DEFAULT_LOS


@pytest.mark.parametrize("row,match", [
    ("zz,0,4", "unknown link"), ("oa,2,4", "outside"), ("oa,0,-1", "negative"), ("oa,x,1", "malformed"),
])
def test_bad_flow_rows(tmp_path, row, match):
    net = diamond()
    p = tmp_path / "f.csv"
    p.write_text("link_id,interval_k,count\n" + row + "\n")
    with pytest.raises(ObservationError, match=match):
        load_observations(p, None, None, TimeGrids(0, 120, 60, 30, 0), net)


@pytest.mark.parametrize("v", ["0", "-3"])
def test_nonpositive_speed_rejected(tmp_path, v):
    net = diamond()
    f, s = tmp_path / "f.csv", tmp_path / "s.csv"
    f.write_text("link_id,interval_k,count\noa,0,1\n")
    s.write_text(f"segment_id,interval_r,speed_mph\n{net.segment_ids[0]},0,{v}\n")
    with pytest.raises(ObservationError, match=net.segment_ids[0]):
        load_observations(f, s, None, TimeGrids(0, 120, 60, 30, 0), net)


def test_los_lookup_and_monotonicity(tmp_path):
    assert DEFAULT_LOS.grade("freeway", 66).grade == "A"
    assert DEFAULT_LOS.flow_per_lane("freeway", 55) == 2400
    assert DEFAULT_LOS.grade("freeway", 10).grade == "F"
    with pytest.raises(LosError):
        DEFAULT_LOS.grade("tunnel", 50)
    with pytest.raises(LosError, match="monotone"):
        LosTable([LosRow("f", "A", 50, 1000), LosRow("f", "B", 60, 1200)])
    DEFAULT_LOS.to_csv(tmp_path / "los.csv")
    assert load_los_csv(tmp_path / "los.csv") == DEFAULT_LOS
