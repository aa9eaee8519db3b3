"""Stop-and-go waves on a ring road, with and without one smoothing vehicle.

    python scripts/ring_waves.py --vehicles 22 --length 230
"""

import argparse

from corridor_calib.microsim import mean_speed_follower, ring_road


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vehicles", type=int, default=22)
    ap.add_argument("--length", type=float, default=230.0)
    ap.add_argument("--duration", type=float, default=300.0)
    args = ap.parse_args()

    free = ring_road(args.vehicles, args.length, duration=args.duration)
    ctl = ring_road(args.vehicles, args.length, controller=mean_speed_follower(), duration=args.duration)
    print("  t[s]  std_free  std_controlled")
    for i in range(0, len(free.times), max(1, len(free.times) // 15)):
        print(f"{free.times[i]:6.0f}  {free.speed_std[i]:8.4f}  {ctl.speed_std[i]:14.6f}")
    print(f"amplification {free.terminal_std / free.initial_std:.1f}x, "
          f"controller reduction {1 - ctl.terminal_std / free.terminal_std:.1%}")


if __name__ == "__main__":
    main()
