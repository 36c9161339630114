"""Run a short three-stage self-play schedule and evaluate every stage.

    python demos/selfplay_then_eval.py OUT_DIR [updates_per_stage]

Each stage trains against a growing population (IDM only, then IDM plus
frozen earlier stages). Afterwards every snapshot and the rule-based ego
are evaluated on the same seeded trials against the last population.
With a handful of updates per stage the policies are barely trained; the
point is the pipeline, not the numbers.
"""
import sys

from zipmerge.evaluation import evaluate
from zipmerge.observation import ObsSpec
from zipmerge.policy import PolicyArch
from zipmerge.ppo import PpoConfig
from zipmerge.road_network import default_map
from zipmerge.selfplay import PopulationSpec, StageSchedule, StageSpec, run_selfplay
from zipmerge.sim_env import EpisodeConfig


def main(out_dir: str, updates: int = 3) -> None:
    road = default_map()
    env = EpisodeConfig(n_other_agents_max=5, max_steps=300)
    obs = ObsSpec(size=64, mpp=1.0)
    schedule = StageSchedule((
        StageSpec("RL", PopulationSpec.parse("popul1"), updates),
        StageSpec("SP1", PopulationSpec.parse("popul3"), updates),
        StageSpec("SP2", PopulationSpec.parse("popul4"), updates),
    ))
    result = run_selfplay(schedule, road, env, PpoConfig(n_envs=2, horizon=64, batch_size=64), seed=0,
                          out_dir=out_dir, arch=PolicyArch(raster_size=64, init_log_std=-1.0), obs_spec=obs)
    print(f"trained {result.update_index} updates; metrics in {result.metrics_path}")

    pop = PopulationSpec.parse("popul4")
    rows = [evaluate(None, pop, road, n=20, seed=1, config=env, zoo=result.zoo, obs_spec=obs)]
    for tag in result.zoo.tags():
        rows.append(evaluate(result.zoo.load(tag), pop, road, n=20, seed=1, config=env, zoo=result.zoo,
                             policy_tag=tag, obs_spec=obs))
    for rep in rows:
        print(rep.summary())


if __name__ == "__main__":
    if len(sys.argv) < 2:
        sys.exit(__doc__)
    main(sys.argv[1], int(sys.argv[2]) if len(sys.argv) > 2 else 3)
