from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qmdpnet.domains import (
    GridEnv,
    Simulator,
    bfs_distances,
    build_ground_truth_pomdp,
    env_step,
    gen_grasp_env,
    gen_grid_env,
    gen_maze_env,
    load_occupancy_map,
    object_shape,
    read_pgm,
    sample_task,
    write_pgm,
)
from qmdpnet.domains.core import DIRS
from qmdpnet.domains.grasp import SIZE, TEST_OBJECTS, TRAIN_OBJECTS, valid_configurations
from qmdpnet.domains.hallway2 import (
    HALLWAY2_CAP,
    MissingModelFileError,
    classify_actions,
    floor_plan,
    hallway2_grid_variant,
    load_hallway2,
    noise_parameters,
)
from qmdpnet.domains.maps import MAP_PRESETS, PGMFormatError, occupancy_grid, preset_map
from qmdpnet.domains.tasks import belief_sizes


def _free_graph(grid):
    free = {(r, c) for r, c in zip(*np.nonzero(grid == 0))}
    edges = {frozenset((p, (p[0] + dr, p[1] + dc))) for p in free for dr, dc in DIRS
             if (p[0] + dr, p[1] + dc) in free}
    return free, edges


def _connected(free, edges):
    adj = {p: [] for p in free}
    for e in edges:
        a, b = tuple(e)
        adj[a].append(b)
        adj[b].append(a)
    start = next(iter(free))
    seen, q = {start}, deque([start])
    while q:
        for nb in adj[q.popleft()]:
            if nb not in seen:
                seen.add(nb)
                q.append(nb)
    return len(seen) == len(free)


# ---------------------------------------------------------------- generators


def test_grid_empty_when_p_zero():
    env = gen_grid_env(6, p_obstacle=0.0, seed=3)
    assert env.obstacles.sum() == 0


def test_grid_obstacle_fraction():
    frac = np.mean([gen_grid_env(30, seed=s).obstacles.mean() for s in range(1000)])
    assert abs(frac - 0.25) < 0.01


def test_grid_deterministic_and_validated():
    np.testing.assert_array_equal(gen_grid_env(10, seed=7).obstacles, gen_grid_env(10, seed=7).obstacles)
    with pytest.raises(ValueError):
        gen_grid_env(3)
    with pytest.raises(ValueError):
        gen_grid_env(8, p_obstacle=1.0)


def test_boundary_is_obstacle():
    env = gen_grid_env(5, p_obstacle=0.0)
    assert env.blocked(np.array([-1, 0, 5, 2]), np.array([0, -1, 2, 5])).all()
    assert not env.blocked(np.array([0]), np.array([0])).any()


@given(st.sampled_from([5, 7, 9, 19]), st.integers(0, 10_000))
def test_maze_is_perfect(n, seed):
    env = gen_maze_env(n, seed=seed)
    free, edges = _free_graph(env.obstacles)
    assert _connected(free, edges)
    assert len(edges) == len(free) - 1
    assert env.headings == 4


def test_maze_deterministic_and_validated():
    np.testing.assert_array_equal(gen_maze_env(19, seed=2).obstacles, gen_maze_env(19, seed=2).obstacles)
    assert gen_maze_env(19).obstacles.shape == (19, 19)
    for n in (4, 3, 10):
        with pytest.raises(ValueError):
            gen_maze_env(n)


def test_maze_same_observation_from_distinct_poses():
    env = gen_maze_env(19, seed=0)
    model = build_ground_truth_pomdp(env, "det", (1, 1))
    valid = np.flatnonzero(env.free_states())
    true_obs = model.Z[0][valid].argmax(axis=1)
    assert np.bincount(true_obs).max() >= 4


def test_maze_rotation_permutes_bits():
    env = gen_maze_env(9, seed=4)
    model = build_ground_truth_pomdp(env, "det", (1, 1))
    obs = model.Z[0].argmax(axis=1)
    bits = (obs[:, None] >> np.arange(4)) & 1
    for s in np.flatnonzero(env.free_states()):
        cell, h = divmod(s, 4)
        right = cell * 4 + (h + 1) % 4
        # turning right: the old right sensor becomes the new front
        np.testing.assert_array_equal(bits[right], np.roll(bits[s], -1))


def test_grasp_library():
    assert len(TRAIN_OBJECTS) == 20 and len(TEST_OBJECTS) == 10
    assert not set(TRAIN_OBJECTS) & set(TEST_OBJECTS)
    for k in range(30):
        shape = object_shape(k)
        assert shape.shape[0] <= 6 and shape.shape[1] <= 6
        assert shape[-1].all()  # rests on the floor
        heights = shape.sum(axis=0)
        assert (heights == heights.max()).sum() == 1
    with pytest.raises(ValueError):
        object_shape(30)


def test_grasp_single_cell_object():
    env = gen_grasp_env(0, seed=5)
    (r, c), = zip(*np.nonzero(env.obstacles))
    assert env.grasp_point == (r - 1, c)
    assert env.obstacles.shape == (SIZE, SIZE)


@pytest.mark.parametrize("k", range(30))
def test_grasp_point_is_reachable(k):
    env = gen_grasp_env(k, seed=k)
    assert valid_configurations(env.obstacles)[env.grasp_point]
    task = sample_task(env, 0)
    model = build_ground_truth_pomdp(env, "stoch")
    assert bfs_distances(model, task.start)[sorted(model.terminal)].max() >= 0
    np.testing.assert_array_equal(gen_grasp_env(k, seed=k).obstacles, env.obstacles)


# ---------------------------------------------------------------- tasks


def test_belief_sizes():
    np.testing.assert_array_equal(belief_sizes(10), [1, 2, 5, 10])
    assert belief_sizes(1).tolist() == [1]


def test_task_invariants_many_samples():
    env = gen_grid_env(8, seed=1)
    free = env.free_states()
    model = build_ground_truth_pomdp(env, "det", (0, 0))
    for seed in range(10_000):
        task = sample_task(env, seed)
        b = task.belief()
        assert b[task.start] > 0
        assert abs(b.sum() - 1.0) < 1e-9
        assert (b[~free] == 0).all()
        support = b[b > 0]
        np.testing.assert_allclose(support, support[0])
        assert task.theta[:, :, 1].sum() == 1
        if seed % 500 == 0:
            m = build_ground_truth_pomdp(env, "det", task.goal)
            assert bfs_distances(m, task.start)[sorted(m.terminal)].max() > 0
    assert model.nS == 64


def test_task_support_extremes():
    env = gen_grid_env(8, seed=1)
    delta = sample_task(env, 0, belief_size=1)
    assert delta.belief()[delta.start] == 1.0
    full = sample_task(env, 0, full_belief=True)
    b = full.belief()
    np.testing.assert_allclose(b[env.free_states()], 1.0 / env.free_states().sum())


def test_grasp_task_starts_upper_half():
    env = gen_grasp_env(3, seed=1)
    for seed in range(50):
        task = sample_task(env, seed)
        assert task.start // SIZE < SIZE // 2
        assert task.goal == env.grasp_point


# ---------------------------------------------------------------- ground-truth models


def test_det_grid_north_moves_up():
    env = GridEnv("grid", np.zeros((5, 5), dtype=np.uint8))
    model = build_ground_truth_pomdp(env, "det", (0, 0))
    s = 2 * 5 + 2
    row = model.T_dense()[0, s]
    assert row[1 * 5 + 2] == 1.0


def test_stoch_grid_numbers():
    env = GridEnv("grid", np.zeros((5, 5), dtype=np.uint8))
    model = build_ground_truth_pomdp(env, "stoch", (0, 0))
    s = 2 * 5 + 2
    T = model.T_dense()
    for a in range(4):
        assert T[a, s, s] == pytest.approx(0.2)
    assert T[4, s, s] == 1.0
    assert model.Z[0, s].max() == pytest.approx(0.9 ** 4)
    assert model.Z.shape[2] == 16


def test_grid_rewards():
    grid = np.zeros((4, 4), dtype=np.uint8)
    grid[0, 1] = 1
    model = build_ground_truth_pomdp(GridEnv("grid", grid), "det", (3, 3))
    assert model.R[0, 0] == -10.0  # north out of the map
    assert model.R[0, 1] == -10.0  # east into the obstacle
    assert model.R[0, 2] == pytest.approx(-0.1)
    assert model.R[3 * 4 + 2, 1] == 20.0
    goal = 3 * 4 + 3
    assert goal in model.terminal
    assert (model.T_dense()[:, goal, goal] == 1.0).all()


def test_grasp_model_alphabet_and_rewards():
    env = gen_grasp_env(4, seed=0)
    model = build_ground_truth_pomdp(env, "det")
    assert model.Z.shape[2] == 64
    assert model.meta["variant"] == "stoch"
    assert set(np.unique(model.R)) <= {0.0, 0.8, 1.0}


# ---------------------------------------------------------------- simulator


def test_env_step_matches_transition_row():
    env, _ = gen_grid_env(6, p_obstacle=0.0, seed=0), None
    model = build_ground_truth_pomdp(env, "stoch", (5, 5))
    sim = Simulator(env, model)
    s, a, n = 2 * 6 + 2, 1, 100_000
    counts = np.zeros(model.nS)
    ep, _ = sim.reset(s, np.random.default_rng(0))
    for _ in range(n):
        ep.state, ep.t, ep.done = s, 0, False
        s2, _, _, _ = env_step(sim, ep, a)
        counts[s2] += 1
    p = model.T_dense()[a, s]
    sigma = np.sqrt(n * p * (1 - p))
    assert (np.abs(counts - n * p) <= 3 * sigma + 1e-9).all()


def test_goal_ends_episode_and_cap():
    env = GridEnv("grid", np.zeros((4, 4), dtype=np.uint8))
    model = build_ground_truth_pomdp(env, "det", (0, 1))
    sim = Simulator(env, model)
    ep, _ = sim.reset(0, np.random.default_rng(0))
    _, _, r, done = env_step(sim, ep, 1)
    assert done and r == 20.0
    ep, _ = sim.reset(0, np.random.default_rng(0))
    for _ in range(env.cap):
        assert not ep.done
        sim.step(ep, 4)
    assert ep.done and ep.t == env.cap == 40
    with pytest.raises(RuntimeError):
        sim.step(ep, 4)


def test_det_episode_reproducible():
    env = gen_grid_env(8, seed=2)
    task = sample_task(env, 2)
    model = build_ground_truth_pomdp(env, "stoch", task.goal)
    sim = Simulator(env, model)

    def run():
        ep, o = sim.reset(task.start, np.random.default_rng(9))
        trace = [o]
        for a in [0, 1, 2, 3] * 5:
            if ep.done:
                break
            trace.append(env_step(sim, ep, a))
        return trace

    assert run() == run()


# ---------------------------------------------------------------- maps


def test_pgm_round_trip_and_errors():
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    np.testing.assert_array_equal(read_pgm(write_pgm(img)), img)
    commented = b"P5\n# a comment\n4 3\n255\n" + img.tobytes()
    np.testing.assert_array_equal(read_pgm(commented), img)
    for bad in (b"P2\n4 3\n255\n" + img.tobytes(), b"P5\n4 3\n255\n" + img.tobytes()[:5],
                b"P5\n4 3\n65535\n", b"P5\n4"):
        with pytest.raises(PGMFormatError):
            read_pgm(bad)


def test_occupancy_thresholds():
    white = write_pgm(np.full((8, 8), 255, dtype=np.uint8))
    black = write_pgm(np.zeros((8, 8), dtype=np.uint8))
    assert occupancy_grid(white, 4, 4).sum() == 0
    assert load_occupancy_map(white, 4, 4).obstacles.sum() == 0
    assert occupancy_grid(black, 4, 4).all()
    # no environment may have fewer than 2 free cells
    with pytest.raises(ValueError):
        load_occupancy_map(black, 4, 4)
    checker = write_pgm(np.array([[0, 255], [255, 0]], dtype=np.uint8))
    assert occupancy_grid(checker, 1, 1).tolist() == [[1]]  # mean 127.5 < 128
    assert occupancy_grid(checker, 1, 1, threshold=127.0).tolist() == [[0]]
    with pytest.raises(ValueError):
        occupancy_grid(white, 0, 4)


def test_map_presets():
    for name, (w, h) in MAP_PRESETS.items():
        env = preset_map(name)
        assert (env.width, env.height) == (w, h)
    with pytest.raises(KeyError):
        preset_map("nowhere")


# ---------------------------------------------------------------- hallway2


def _hallway_like():
    grid = np.ones((8, 8), dtype=np.uint8)
    grid[2, 1:7] = 0
    grid[2:6, 3] = 0
    grid[5, 3:6] = 0
    env = GridEnv("hallway2", grid, headings=4, step_cap=HALLWAY2_CAP)
    return env, build_ground_truth_pomdp(env, "stoch", (5, 5))


def test_hallway2_missing_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("QMDPNET_HALLWAY2", raising=False)
    with pytest.raises(MissingModelFileError):
        load_hallway2(tmp_path / "absent.pomdp")


def test_hallway2_action_roles_and_floor_plan():
    env, model = _hallway_like()
    roles = classify_actions(model)
    assert roles == {"stay": [4], "forward": [0], "turn": [1, 2], "turn_around": [3]}
    grid, pose, goal = floor_plan(model)
    assert grid.shape == (8, 8)
    assert (grid == 0).sum() == (env.obstacles == 0).sum()
    # recovered up to translation and mirror: compare free-cell graph sizes
    free, edges = _free_graph(grid)
    free0, edges0 = _free_graph(env.obstacles)
    assert len(edges) == len(edges0)
    assert grid[goal] == 0


def test_hallway2_noise_recovery_and_variant():
    env, model = _hallway_like()
    p_fail, p_flip = noise_parameters(model)
    assert p_fail == pytest.approx(0.2)
    assert p_flip == pytest.approx(0.1, abs=1e-9)
    g, m = hallway2_grid_variant(3, model=model)
    assert g.obstacles.shape == (8, 8) and g.cap == 251
    assert g.p_move_fail == pytest.approx(0.2)
