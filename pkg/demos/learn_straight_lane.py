"""Train PPO on the single-agent straight-lane task and report the return.

    python demos/learn_straight_lane.py [seed] [updates]

This is the learning smoke test used by the acceptance suite, with a
configurable update count. About half a second per update on one core.
"""
import sys
from dataclasses import replace

from zipmerge.checks import SmokeTask, train_smoke


def main(seed: int = 0, updates: int = 200) -> None:
    task = replace(SmokeTask(), updates=updates)
    s0, s1, d0, d1 = train_smoke(seed, task)
    print(f"seed {seed}, {updates} updates")
    print(f"  sampling policy:      {s0:8.1f} -> {s1:8.1f}")
    print(f"  deterministic policy: {d0:8.1f} -> {d1:8.1f}")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
