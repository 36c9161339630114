"""Drive one zipper-merge episode with a rule-based ego and dump its observation.

Run from the repository root:

    python demos/one_episode.py [seed]

Prints the outcome and reward breakdown, writes the ego's first raster to
``ego_raster.ppm`` and the full trace to ``episode.csv``.
"""
import sys

from zipmerge.idm_agent import IdmParams
from zipmerge.observation import build_observation, write_ppm
from zipmerge.road_network import default_map
from zipmerge.sim_env import EpisodeConfig, IdmDriver, RewardLedger, reset_world, step_world, trace_to_csv


def main(seed: int = 0) -> None:
    road = default_map()
    cfg = EpisodeConfig(spawn_prob=0.2)
    world = reset_world(road, cfg, seed, ego_controller=IdmDriver(IdmParams()), record_trace=True)
    frame = build_observation(world, world.ego_id)
    write_ppm(frame.raster, "ego_raster.ppm")
    print(f"vector observation: {len(frame.vector)} features")

    ledgers = []
    while not world.closed:
        outcomes, _ = step_world(world, None, cfg)
        ego = outcomes[world.ego_id]
        ledgers.append(ego.ledger)
    episode = RewardLedger.combine(ledgers)
    print(f"ended with {ego.cause!r} after {len(ledgers)} steps, return {episode.total:.1f}")
    print(f"other agents spawned: {world.next_id - 1}")
    trace_to_csv(world.trace, "episode.csv")
    print("wrote ego_raster.ppm and episode.csv")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
