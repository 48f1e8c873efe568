"""Environment generators, ground-truth models and the step simulator."""

from qmdpnet.domains.core import (
    GAMMA,
    GRASP_ACTIONS,
    GRID_ACTIONS,
    MAZE_ACTIONS,
    NO_ACTION,
    EpisodeState,
    GridEnv,
    InfeasibleTaskError,
    RewardSpec,
    Simulator,
    TaskParams,
    bfs_distances,
    build_ground_truth_pomdp,
    derive_seed,
    distance_to_goal,
    env_step,
    make_theta,
)
from qmdpnet.domains.generators import gen_grid_env, gen_maze_env
from qmdpnet.domains.grasp import gen_grasp_env, object_shape
from qmdpnet.domains.maps import MAP_PRESETS, load_occupancy_map, preset_map, read_pgm, write_pgm
from qmdpnet.domains.tasks import belief_sizes, sample_task

__all__ = [
    "GAMMA", "GRASP_ACTIONS", "GRID_ACTIONS", "MAZE_ACTIONS", "NO_ACTION", "EpisodeState", "GridEnv",
    "InfeasibleTaskError", "RewardSpec", "Simulator", "TaskParams", "bfs_distances",
    "build_ground_truth_pomdp", "derive_seed", "distance_to_goal", "env_step", "make_theta",
    "gen_grid_env", "gen_maze_env", "gen_grasp_env", "object_shape", "MAP_PRESETS",
    "load_occupancy_map", "preset_map", "read_pgm", "write_pgm", "belief_sizes", "sample_task",
]
