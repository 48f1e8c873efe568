"""Hallway2 support: locating the canonical model, recovering its floor plan,
and random 8 x 8 training grids with matching noise.

The floor plan is recovered from the model itself. Turn actions permute the
headings of a cell, so cells are the orbits of the turn actions, and forward
moves fix the relative position of neighbouring cells.
"""

from __future__ import annotations

import os
from collections import deque
from pathlib import Path

import numpy as np

from qmdpnet.domains.core import DIRS, GridEnv
from qmdpnet.pomdp import TabularPOMDP, parse_pomdp_file

ENV_VAR = "QMDPNET_HALLWAY2"
HALLWAY2_CAP = 251
GRID_SIZE = 8


class MissingModelFileError(FileNotFoundError):
    """The canonical hallway2.pomdp file could not be found."""


def locate_hallway2(path: str | os.PathLike | None = None) -> Path:
    candidates = [Path(path)] if path else []
    if os.environ.get(ENV_VAR):
        candidates.append(Path(os.environ[ENV_VAR]))
    candidates += [Path("data/hallway2.pomdp"), Path(__file__).resolve().parents[3] / "data" / "hallway2.pomdp"]
    for c in candidates:
        if c.is_file():
            return c
    raise MissingModelFileError(
        f"hallway2.pomdp not found; pass its path or set {ENV_VAR} (looked in: "
        + ", ".join(str(c) for c in candidates) + ")"
    )


def load_hallway2(path: str | os.PathLike | None = None) -> TabularPOMDP:
    return parse_pomdp_file(locate_hallway2(path).read_text())


def _likely_successors(model: TabularPOMDP) -> np.ndarray:
    return np.stack([np.asarray(t.argmax(axis=1)).ravel() for t in model.T])


def _live_states(model: TabularPOMDP, succ: np.ndarray) -> np.ndarray:
    """Non-goal states some action can leave; goals and padding cells say nothing about roles."""
    idx = np.arange(model.nS)
    return np.array([s not in model.terminal for s in idx]) & (succ != idx).any(axis=0)


def classify_actions(model: TabularPOMDP) -> dict[str, list[int]]:
    """Sort actions into stay / forward / turn / turn_around from their most likely successors."""
    succ = _likely_successors(model)
    idx = np.arange(model.nS)
    live = _live_states(model, succ)
    roles: dict[str, list[int]] = {"stay": [], "forward": [], "turn": [], "turn_around": []}
    for a in range(model.nA):
        f = succ[a]
        if np.array_equal(f[live], idx[live]):
            roles["stay"].append(a)
            continue
        f2 = f[f]
        f4 = f2[f2]
        moved = (f != idx)[live]
        if moved.all() and np.array_equal(f2[live], idx[live]):
            roles["turn_around"].append(a)
        elif moved.all() and np.array_equal(f4[live], idx[live]):
            roles["turn"].append(a)
        else:
            roles["forward"].append(a)
    if len(roles["forward"]) != 1 or len(roles["turn"]) != 2:
        raise ValueError(f"cannot identify forward/turn actions: {roles}")
    return roles


def floor_plan(model: TabularPOMDP, size: int = GRID_SIZE) -> tuple[np.ndarray, dict[int, tuple[int, int, int]], tuple[int, int]]:
    """Embed the model's cells in a ``size`` x ``size`` grid.

    Returns the obstacle map, a map from model state to (row, col, heading)
    and the goal cell. The two turn actions are told apart only up to a
    mirror image, which does not change the navigation problem.
    """
    roles = classify_actions(model)
    succ = _likely_successors(model)
    fwd, right = succ[roles["forward"][0]], succ[roles["turn"][0]]
    live = np.flatnonzero(_live_states(model, succ)).tolist()
    pose: dict[int, tuple[int, int, int]] = {}

    def place(s: int, r: int, c: int, h: int, queue: deque) -> None:
        for k in range(4):
            st = (r, c, (h + k) % 4)
            if s in pose:
                if pose[s] != st:
                    raise ValueError(f"inconsistent floor plan at state {s}")
            else:
                pose[s] = st
                queue.append(s)
            if s in model.terminal:
                break
            s = int(right[s])

    queue: deque = deque()
    place(live[0], 0, 0, 0, queue)
    while queue:
        s = queue.popleft()
        if s in model.terminal:
            continue
        t = int(fwd[s])
        if t != s:
            r, c, h = pose[s]
            place(t, r + DIRS[h][0], c + DIRS[h][1], h, queue)
    missing = sorted(set(live) - set(pose))
    if missing:
        raise ValueError(f"states {missing[:5]} are not connected to the floor plan")
    rows = np.array([p[0] for p in pose.values()])
    cols = np.array([p[1] for p in pose.values()])
    h_, w_ = rows.max() - rows.min() + 1, cols.max() - cols.min() + 1
    if h_ > size or w_ > size:
        raise ValueError(f"floor plan {h_}x{w_} does not fit a {size}x{size} grid")
    dr, dc = -rows.min() + (size - h_) // 2, -cols.min() + (size - w_) // 2
    pose = {s: (int(r + dr), int(c + dc), h) for s, (r, c, h) in pose.items()}
    grid = np.ones((size, size), dtype=np.uint8)
    for r, c, _ in pose.values():
        grid[r, c] = 0
    goals = {pose[s][:2] for s in model.terminal if s in pose}
    if len(goals) != 1:
        raise ValueError(f"expected one goal cell, found {len(goals)}")
    gr, gc = goals.pop()
    return grid, pose, (int(gr), int(gc))


def noise_parameters(model: TabularPOMDP) -> tuple[float, float]:
    """(probability a forward move fails, per-bit flip probability) matching the model's noise."""
    roles = classify_actions(model)
    a = roles["forward"][0]
    succ = _likely_successors(model)[a]
    live = np.array([s not in model.terminal and succ[s] != s for s in range(model.nS)])
    t = model.T[a]
    p_ok = np.array([t[s, succ[s]] for s in np.flatnonzero(live)])
    p_fail = float(1.0 - p_ok.mean())
    p_correct = model.Z[a].max(axis=1)[~np.isin(np.arange(model.nS), list(model.terminal))].mean()
    p_flip = float(1.0 - p_correct ** 0.25)
    return p_fail, p_flip


def hallway2_layout(model: TabularPOMDP) -> tuple[GridEnv, tuple[int, int]]:
    """Evaluation environment that embeds the model's floor plan, and its goal cell."""
    p_fail, p_flip = noise_parameters(model)
    grid, _, goal = floor_plan(model)
    env = GridEnv("hallway2", grid, headings=4, step_cap=HALLWAY2_CAP, p_move_fail=p_fail,
                  p_obs_flip=p_flip, name="hallway2")
    return env, goal


def hallway2_grid_variant(seed: int, model: TabularPOMDP | None = None, p_obstacle: float = 0.25,
                          path: str | os.PathLike | None = None) -> tuple[GridEnv, TabularPOMDP]:
    """Random 8 x 8 grid with Hallway2-style dynamics and the canonical model's noise levels.

    Loads the canonical model when none is given; a missing file raises
    :class:`MissingModelFileError`.
    """
    model = model if model is not None else load_hallway2(path)
    p_fail, p_flip = noise_parameters(model)
    rng = np.random.default_rng(seed)
    while True:
        grid = (rng.random((GRID_SIZE, GRID_SIZE)) < p_obstacle).astype(np.uint8)
        if (grid == 0).sum() >= 2:
            break
    env = GridEnv("hallway2", grid, headings=4, step_cap=HALLWAY2_CAP, p_move_fail=p_fail, p_obs_flip=p_flip)
    return env, model
