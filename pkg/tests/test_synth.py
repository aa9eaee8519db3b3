import numpy as np
import pytest

from corridor_calib.flowcal import calibrate_flow, link_flows
from corridor_calib.synth import (ScenarioSpec, SynthError, build_corridor, detect_wave_bands, generate,
                                  mainline_segments, perturb_targets, replay, simulator_los_table)


def test_corridor_layout():
    net = build_corridor(ScenarioSpec(shape="bottleneck"))
    mains = [lid for lid in net.link_ids if lid.startswith("m")]
    assert len(mains) == 5  # three ramp junctions and a lane drop
    assert net.links[mains[0]].lane_count == 3 and net.links[mains[-1]].lane_count == 2
    assert {net.links[x].kind for x in net.link_ids if x.startswith("r_")} == {"ramp"}
    assert sum(net.links[x].length for x in mains) == pytest.approx(6000.0)
    assert net.paths


def test_free_flow_has_no_drop():
    net = build_corridor(ScenarioSpec())
    assert {net.links[x].lane_count for x in net.link_ids if x.startswith("m")} == {3}


@pytest.mark.parametrize("kw", [
    {"shape": "gridlock"}, {"lanes": 0}, {"flow_bias": 1.0}, {"length_km": 1.0}, {"lane_drop": 3},
    {"flow_targets": "guessed"},
])
def test_spec_validation(kw):
    with pytest.raises(SynthError):
        ScenarioSpec(**kw)


def test_mainline_segments_ordered(free_flow):
    segs = mainline_segments(free_flow.network)
    links = [s.split(":")[0] for s in segs]
    assert links == sorted(links, key=lambda lid: int(lid[1:]))


def test_ground_truth_is_feasible(stop_and_go):
    sc = stop_and_go
    assert sc.flows.counts.min() >= 0
    assert np.allclose(sc.inflow.shares.sum(axis=1), 1.0)


def test_implied_targets_are_self_consistent(stop_and_go):
    sc = stop_and_go
    assert np.array_equal(sc.observations.flows, link_flows(sc.flows.counts, sc.network.incidence_matrix()))
    assert calibrate_flow(sc.observations, sc.network)[1].objective == 0.0


def test_bias_understates_counts(free_flow):
    biased = generate(ScenarioSpec(seed=1, flow_bias=0.2))
    ratio = biased.observations.flows.sum() / free_flow.observations.flows.sum()
    assert ratio == pytest.approx(0.8, abs=0.01)
    assert np.array_equal(biased.observations.speeds, free_flow.observations.speeds)


def test_measured_targets_come_from_the_run():
    sc = generate(ScenarioSpec(seed=1, flow_targets="measured"))
    assert np.array_equal(sc.observations.flows, sc.frame.flows)


def test_generation_is_deterministic(free_flow):
    again = generate(ScenarioSpec(seed=1))
    assert np.array_equal(again.observations.speeds, free_flow.observations.speeds)
    assert np.array_equal(again.flows.counts, free_flow.flows.counts)
    assert replay(free_flow).equals(free_flow.frame)


def test_speeds_positive(stop_and_go):
    assert stop_and_go.observations.speeds.min() > 0


def test_los_table_is_monotone():
    t = simulator_los_table()
    rows = t.rows["freeway"]
    assert [r.grade for r in rows] == list("ABCDEF")
    assert all(a.max_flow_vph_per_lane <= b.max_flow_vph_per_lane for a, b in zip(rows, rows[1:]))


def test_perturb_targets(free_flow):
    obs = free_flow.observations
    assert perturb_targets(obs, 0.0) is obs
    a, b = perturb_targets(obs, 0.1, seed=3), perturb_targets(obs, 0.1, seed=3)
    assert np.array_equal(a.speeds, b.speeds) and np.array_equal(a.flows, b.flows)
    assert a.speeds.min() > 0 and a.flows.min() >= 0
    assert not np.array_equal(a.speeds, obs.speeds)
    with pytest.raises(ValueError):
        perturb_targets(obs, -0.1)


def test_wave_detection_on_drawn_bands():
    speeds = np.full((8, 40), 60.0)
    for start in (5, 25):
        for seg in range(2, 8):  # congestion reaches upstream rows later
            t0 = start + (7 - seg) * 2
            speeds[seg, t0:t0 + 3] = 15.0
    bands = detect_wave_bands(speeds)
    assert len(bands) == 2
    assert all(b.slope < 0 for b in bands)
    assert bands[0].segments == tuple(range(2, 8))


def test_forward_moving_region_is_not_a_band():
    speeds = np.full((6, 30), 60.0)
    for seg in range(6):
        speeds[seg, 5 + 2 * seg:8 + 2 * seg] = 10.0
    assert detect_wave_bands(speeds) == []


def test_scenario_shapes(free_flow, stop_and_go):
    assert detect_wave_bands(free_flow.mainline_speeds()) == []
    bands = detect_wave_bands(stop_and_go.mainline_speeds())
    assert len(bands) >= 2
    assert all(b.min_speed < 40 for b in bands)
