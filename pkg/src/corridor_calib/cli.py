"""Command-line entry point.

Every subcommand reads an optional JSON config; ``--seed``, ``--mode`` and
``--out`` override the matching config keys, which override built-in
defaults.  Exit status is 0 on success, 2 when calibration stops at the
outer iteration limit and 1 on any fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import avplan, bilevel, synth
from .flowcal import FlowCalOptions, PathFlowSolution, flow_error_histogram, report_for, write_histogram_csv
from .microsim.engine import run
from .netmodel import TimeGrids, load_network, load_observations, save_network, write_observations
from .speedcal import InflowProfile, SpsaOptions, assign_departures, speed_objective, write_trace_csv

log = logging.getLogger("corridor_calib")

EXIT_OK, EXIT_FAULT, EXIT_LIMIT = 0, 1, 2


class ConfigError(ValueError):
    pass


# -- config helpers ---------------------------------------------------------------


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    doc.setdefault("_base", str(p.parent))
    return doc


def _build(cls, doc: dict | None, name: str, **extra):
    """Instantiate a dataclass from a config section, naming unknown keys."""
    doc = dict(doc or {})
    known = {f.name for f in fields(cls)}
    bad = sorted(set(doc) - known)
    if bad:
        raise ConfigError(f"{name}: unknown field(s) {bad}")
    doc.update(extra)
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _file(cfg: dict, key: str, required: bool = True) -> Path | None:
    raw = cfg.get(key)
    if raw is None:
        if required:
            raise ConfigError(f"config field {key!r} is required")
        return None
    p = Path(raw)
    if not p.is_absolute():
        p = Path(cfg.get("_base", ".")) / p
    if not p.exists():
        raise ConfigError(f"{key}: file not found: {p}")
    return p


def _grids(cfg: dict) -> TimeGrids:
    return _build(TimeGrids, cfg.get("grids"), "grids")


def _seed(cfg: dict) -> int:
    if "seed" not in cfg:
        raise ConfigError("a seed is required (config field 'seed' or --seed)")
    return int(cfg["seed"])


def _out(cfg: dict) -> Path:
    out = Path(cfg.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _load_plans_inputs(cfg: dict):
    network = load_network(_file(cfg, "network"))
    grids = _grids(cfg)
    ids = [p.id for p in network.paths]
    flows = PathFlowSolution.from_csv(_file(cfg, "path_flows"), ids, grids.n_coarse)
    inflow_file = _file(cfg, "inflow", required=False)
    inflow = InflowProfile.from_csv(inflow_file, ids, grids.n_fine) if inflow_file \
        else InflowProfile.uniform(ids, grids.n_fine)
    return network, grids, flows, inflow


# -- subcommands --------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    sec = dict(cfg.get("scenario", {}))
    if "grids" in cfg:
        sec["grids"] = _grids(cfg)
    spec = _build(synth.ScenarioSpec, sec, "scenario", seed=_seed(cfg))
    sc = synth.generate(spec)
    out = _out(cfg)
    save_network(sc.network, out / "network.json")
    files = write_observations(sc.observations, out)
    sc.flows.to_csv(out / "true_path_flows.csv")
    sc.inflow.to_csv(out / "true_inflow.csv")
    bilevel.write_heatmap_csv(out / "heatmap_observed.csv", sc.observations.segment_ids, sc.observations.speeds)
    g = spec.grids
    _dump(out / "scenario.json", {
        "network": "network.json", "flows": files["flows"].name, "speeds": files["speeds"].name,
        "los": files["los"].name, "path_flows": "true_path_flows.csv", "inflow": "true_inflow.csv",
        "grids": asdict(g), "seed": spec.seed, "shape": spec.shape,
        "bands": len(synth.detect_wave_bands(sc.mainline_speeds())),
    })
    log.info("wrote scenario to %s", out)
    return EXIT_OK


def cmd_calibrate(cfg: dict) -> int:
    network = load_network(_file(cfg, "network"))
    grids = _grids(cfg)
    obs = load_observations(_file(cfg, "flows"), _file(cfg, "speeds"), _file(cfg, "los", required=False),
                            grids, network)
    seed = _seed(cfg)
    sec = dict(cfg.get("bilevel", {}))
    opts = _build(
        bilevel.BilevelOptions, sec, "bilevel", seed=seed, mode=cfg.get("mode", sec.get("mode", "bilevel")),
        spsa=_build(SpsaOptions, cfg.get("spsa"), "spsa"),
        flowcal=_build(FlowCalOptions, cfg.get("flowcal"), "flowcal"),
        feedback=_build(bilevel.FeedbackOptions, cfg.get("feedback"), "feedback"),
    )
    res = bilevel.run_bilevel(network, obs, opts)
    out = _out(cfg)
    res.flows.to_csv(out / "path_flows.csv")
    res.inflow.to_csv(out / "inflow.csv")
    bilevel.write_audit_jsonl(out / "audit.jsonl", res.audit)
    for m, trace in enumerate(res.traces):
        write_trace_csv(out / f"spsa_trace_m{m}.csv", trace)
    bilevel.write_heatmap_csv(out / "heatmap_observed.csv", obs.segment_ids, obs.speeds)
    bilevel.write_heatmap_csv(out / "heatmap_simulated.csv", obs.segment_ids, res.frame.filled_speeds())
    write_histogram_csv(out / "flow_error_hist.csv", *flow_error_histogram(res.flow_report))
    write_histogram_csv(out / "speed_error_hist.csv", *res.speed_report.histogram())
    _dump(out / "summary.json", {
        "mode": res.mode, "verdict": res.verdict, "reason": res.reason, "rmsn": res.rmsn,
        "best_pass": res.best_pass, "outer_passes": len(res.audit), "seed": seed,
        "speed_mse": res.speed_report.cell_mse, "flow_objective": res.flow_report.objective,
        "speed_error_p70": res.speed_report.p70, "speed_error_p90": res.speed_report.p90,
    })
    log.info("%s: verdict %s, RMSN %.4f", res.mode, res.verdict, res.rmsn)
    return EXIT_LIMIT if res.verdict == bilevel.ITERATION_LIMIT else EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    network, grids, flows, inflow = _load_plans_inputs(cfg)
    seed = _seed(cfg)
    frame = run(network, assign_departures(flows, inflow, grids, seed), grids, seed=seed,
                dt=float(cfg.get("dt", 0.5)))
    out = _out(cfg)
    frame.to_csv(out)
    bilevel.write_heatmap_csv(out / "heatmap_simulated.csv", frame.segment_ids, frame.filled_speeds())
    _dump(out / "indicators.json", {**avplan.indicators(frame), "diagnostics": frame.diagnostics,
                                    "queue_max": frame.queue_max, "spillback": frame.spillback})
    return EXIT_OK


def _schedule(cfg: dict, routes=None) -> avplan.ReleaseSchedule:
    sec = dict(cfg.get("schedule", {}))
    bp = sec.pop("break_policy", None)
    policy = _build(avplan.BreakPolicy, bp, "schedule.break_policy") if bp is not None else avplan.BreakPolicy()
    if routes is not None and "routes" not in sec:
        sec["routes"] = sorted(routes)
    try:
        return avplan.build_schedule(break_policy=policy, seed=_seed(cfg), **sec)
    except TypeError as exc:
        raise ConfigError(f"schedule: {exc}") from exc


def cmd_schedule(cfg: dict) -> int:
    sch = _schedule(cfg)
    out = _out(cfg)
    sch.to_csv(out / "schedule.csv")
    _dump(out / "schedule_summary.json", {
        "fleet_size": sch.fleet_size, "reserves": sch.reserves, "release_end_s": sch.release_end,
        "headway_s": sch.headway, "loop_s": sch.loop_s,
    })
    return EXIT_OK


def cmd_inject(cfg: dict) -> int:
    seed = _seed(cfg)
    if cfg.get("testbed"):
        grids = _grids(cfg)
        network, routes = avplan.turnaround_testbed(**cfg.get("testbed_options", {}))
        background = avplan.testbed_background(grids, seed=seed, **cfg.get("background", {}))
    else:
        network, grids, flows, inflow = _load_plans_inputs(cfg)
        background = assign_departures(flows, inflow, grids, seed)
        routes = {}
        for rid, r in cfg.get("routes", {}).items():
            routes[rid] = avplan.AvRoute(rid, tuple(r["westbound"]), tuple(r.get("eastbound", ())),
                                         tuple(r.get("turnaround_nodes", ())), tuple(r.get("lanes", (1, 2, 3))))
        if not routes:
            raise ConfigError("inject: config field 'routes' is required unless 'testbed' is set")
    sch = _schedule(cfg, routes)
    rep = avplan.inject_and_compare(network, background, grids, routes, sch, seed=seed,
                                    dt=float(cfg.get("dt", 0.5)), max_loops=cfg.get("max_loops"))
    out = _out(cfg)
    sch.to_csv(out / "schedule.csv")
    rep.to_json(out / "impact.json")
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    network = load_network(_file(cfg, "network"))
    grids = _grids(cfg)
    los = _file(cfg, "los", required=False)
    obs = load_observations(_file(cfg, "flows"), _file(cfg, "speeds"), los, grids, network)
    sim = load_observations(_file(cfg, "sim_flows"), _file(cfg, "sim_speeds"), los, grids, network)
    out = _out(cfg)
    bilevel.write_heatmap_csv(out / "heatmap_observed.csv", obs.segment_ids, obs.speeds)
    bilevel.write_heatmap_csv(out / "heatmap_simulated.csv", sim.segment_ids, sim.speeds)
    sp = speed_objective(sim.speeds, obs)
    write_histogram_csv(out / "speed_error_hist.csv", *sp.histogram())
    summary = {"rmsn": bilevel.rmsn(sim.speeds, obs.speeds), "speed_mse": sp.cell_mse,
               "speed_error_p70": sp.p70, "speed_error_p90": sp.p90}
    pf = _file(cfg, "path_flows", required=False)
    if pf is not None:
        sol = PathFlowSolution.from_csv(pf, [p.id for p in network.paths], grids.n_coarse)
        rep = report_for(sol, obs.flows, network)
        write_histogram_csv(out / "flow_error_hist.csv", *flow_error_histogram(rep))
        summary["flow_objective"] = rep.objective
    _dump(out / "report.json", summary)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "calibrate": cmd_calibrate, "simulate": cmd_simulate,
    "inject": cmd_inject, "schedule": cmd_schedule, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="corridor-calib", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name == "calibrate":
            p.add_argument("--mode", choices=("sequential", "bilevel"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        for key in ("seed", "out", "mode"):
            val = getattr(args, key, None)
            if val is not None:
                cfg[key] = val
        return COMMANDS[args.command](cfg)
    except Exception as exc:  # every fault becomes exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
