"""Fleet release experiments on the turnaround testbed.

Compares concentrating the fleet on one turnaround against splitting it
over two, for a range of fleet sizes.

    python scripts/av_impact.py --fleets 25 50 100
"""

import argparse

from corridor_calib.avplan import (NO_BREAKS, build_schedule, inject_and_compare, testbed_background,
                                   turnaround_testbed)
from corridor_calib.netmodel import TimeGrids


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fleets", type=int, nargs="+", default=[25, 50, 100])
    ap.add_argument("--headway", type=float, default=20.0)
    ap.add_argument("--loop-minutes", type=float, default=34.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    net, routes = turnaround_testbed()
    grids = TimeGrids(0, 2400, 600, 60, 600)
    bg = testbed_background(grids, seed=args.seed)
    print("fleet  layout  max_queue  travel_time_change")
    for n in args.fleets:
        for layout, names in (("single", ("orange",)), ("split", ("orange", "yellow"))):
            sched = build_schedule(n, args.headway, args.loop_minutes, NO_BREAKS, routes=names)
            rep = inject_and_compare(net, bg, grids, routes, sched, seed=args.seed)
            tt = rep.relative_deltas["mean_travel_time_s"]
            print(f"{n:5d}  {layout:6s}  {rep.max_queue:9d}  {tt:+.2%}")


if __name__ == "__main__":
    main()
