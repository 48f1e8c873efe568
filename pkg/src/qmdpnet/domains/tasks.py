"""Random task sampling: start, goal and initial belief for an environment."""

from __future__ import annotations

import numpy as np

from qmdpnet.domains.core import (
    GridEnv,
    InfeasibleTaskError,
    TaskParams,
    build_ground_truth_pomdp,
    bfs_distances,
    make_theta,
)

MAX_TASK_RETRIES = 100


def belief_sizes(n_free: int) -> np.ndarray:
    """Candidate support sizes n_free // 2^k: {..., n_free // 4, n_free // 2, n_free}, down to 1."""
    sizes = [n_free]
    while sizes[-1] > 1:
        sizes.append(sizes[-1] // 2)
    return np.unique(sizes)


def start_candidates(env: GridEnv) -> np.ndarray:
    """Flat state indices where an episode may start."""
    if env.kind == "grasp":
        from qmdpnet.domains.grasp import upper_half

        return np.flatnonzero(np.repeat(upper_half(env).reshape(-1), env.headings))
    return np.flatnonzero(env.free_states())


def sample_task(env: GridEnv, seed: int, belief_size: int | None = None,
                goal: tuple[int, int] | None = None, full_belief: bool = False) -> TaskParams:
    """Draw a feasible (start, goal) pair and a uniform initial belief containing the start.

    ``belief_size`` fixes the support size; by default it is drawn from
    :func:`belief_sizes`. ``full_belief`` spreads the belief over every start
    candidate. Grasping uses the environment's grasp point as goal and starts
    in the upper half of the workspace.
    """
    rng = np.random.default_rng(seed)
    cands = start_candidates(env)
    W, O = env.width, env.headings
    free_cells = np.flatnonzero(env.free_cells().reshape(-1))
    if goal is None and env.grasp_point is not None:
        goal = env.grasp_point
    for _ in range(MAX_TASK_RETRIES):
        start = int(rng.choice(cands))
        start_cell = start // O
        if goal is None:
            options = free_cells[free_cells != start_cell]
            g = int(rng.choice(options))
            task_goal = (g // W, g % W)
        else:
            task_goal = goal
            if task_goal[0] * W + task_goal[1] == start_cell:
                continue
        model = build_ground_truth_pomdp(env, "det", task_goal)
        if (bfs_distances(model, start)[sorted(model.terminal)] < 0).all():
            continue
        n_free = len(cands)
        if full_belief:
            size = n_free
        elif belief_size is None:
            size = int(rng.choice(belief_sizes(n_free)))
        else:
            size = belief_size
        if not 1 <= size <= n_free:
            raise ValueError(f"belief size {size} outside 1..{n_free}")
        others = rng.choice(cands[cands != start], size=size - 1, replace=False)
        b = np.zeros(env.n_states)
        b[start] = 1.0
        b[others] = 1.0
        b /= b.sum()
        return TaskParams(make_theta(env, task_goal, b), start, task_goal)
    raise InfeasibleTaskError(f"no feasible start/goal pair after {MAX_TASK_RETRIES} draws")
