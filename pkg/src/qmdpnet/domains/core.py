"""Shared environment types, ground-truth model assembly and the simulator.

State indexing is row-major over the grid with the heading innermost, so a
flat belief vector reshapes directly to the H x W x headings image the
network works on: ``s = (r * W + c) * headings + h``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from qmdpnet.pomdp import TabularPOMDP, sample_observation, sample_transition

GAMMA = 0.99

# world-frame displacements N, E, S, W
DIRS = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)])

GRID_ACTIONS = ("north", "east", "south", "west", "stay")
MAZE_ACTIONS = ("forward", "turn_left", "turn_right", "stay")
HALLWAY_ACTIONS = ("forward", "turn_left", "turn_right", "turn_around", "stay")
GRASP_ACTIONS = ("north", "east", "south", "west")

NO_ACTION = 255  # prior action before the first step when a domain has no stay


class InfeasibleTaskError(RuntimeError):
    pass


def derive_seed(master: int, *keys: int) -> int:
    """Child seed for (master, keys...); used to give every environment its own stream."""
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class RewardSpec:
    step: float = -0.1
    goal: float = 20.0
    bump: float = -10.0
    # multipliers on the step cost, one per action (None = all ones)
    action_scale: tuple[float, ...] | None = None

    def step_costs(self, n_actions: int) -> np.ndarray:
        scale = np.ones(n_actions) if self.action_scale is None else np.asarray(self.action_scale, float)
        if scale.shape != (n_actions,):
            raise ValueError(f"action_scale needs {n_actions} entries")
        return self.step * scale


GRASP_REWARDS = RewardSpec(step=0.0, goal=1.0, bump=0.0)


@dataclass(frozen=True, eq=False)
class GridEnv:
    """A 2-D environment. ``obstacles`` is H x W uint8 with 1 marking an obstacle."""

    kind: str
    obstacles: np.ndarray
    headings: int = 1
    grasp_point: tuple[int, int] | None = None
    object_id: int | None = None
    step_cap: int | None = None
    p_move_fail: float = 0.2
    p_obs_flip: float = 0.1
    name: str | None = None

    def __post_init__(self):
        obs = np.ascontiguousarray(self.obstacles, dtype=np.uint8)
        object.__setattr__(self, "obstacles", obs)
        if obs.ndim != 2:
            raise ValueError("obstacle map must be 2-D")
        if self.kind not in ("grid", "maze", "grasp", "hallway2"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.headings != (4 if self.kind in ("maze", "hallway2") else 1):
            raise ValueError(f"{self.kind} environments need {4 if self.kind in ('maze', 'hallway2') else 1} headings")
        if int(self.free_states().sum()) < 2:
            raise ValueError("environment needs at least 2 free states")

    @property
    def height(self) -> int:
        return self.obstacles.shape[0]

    @property
    def width(self) -> int:
        return self.obstacles.shape[1]

    @property
    def n_states(self) -> int:
        return self.height * self.width * self.headings

    @property
    def n_actions(self) -> int:
        return {"grid": 5, "hallway2": 5, "maze": 4, "grasp": 4}[self.kind]

    @property
    def action_names(self) -> tuple[str, ...]:
        return {"grid": GRID_ACTIONS, "hallway2": HALLWAY_ACTIONS, "maze": MAZE_ACTIONS,
                "grasp": GRASP_ACTIONS}[self.kind]

    @property
    def n_obs_bits(self) -> int:
        return 6 if self.kind == "grasp" else 4

    @property
    def stay_action(self) -> int | None:
        return None if self.kind == "grasp" else self.n_actions - 1

    @property
    def cap(self) -> int:
        if self.step_cap is not None:
            return self.step_cap
        return 10 * max(self.height, self.width)

    def blocked(self, r: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Obstacle or outside the map."""
        r, c = np.asarray(r), np.asarray(c)
        inside = (r >= 0) & (r < self.height) & (c >= 0) & (c < self.width)
        out = np.ones(np.broadcast(r, c).shape, dtype=bool)
        out[inside] = self.obstacles[r[inside], c[inside]] == 1
        return out

    def free_cells(self) -> np.ndarray:
        """H x W mask of cells a robot (or gripper reference point) may occupy."""
        if self.kind == "grasp":
            from qmdpnet.domains.grasp import valid_configurations

            return valid_configurations(self.obstacles)
        return self.obstacles == 0

    def free_states(self) -> np.ndarray:
        return np.repeat(self.free_cells().reshape(-1), self.headings)


@dataclass(frozen=True, eq=False)
class TaskParams:
    """Task image theta (H x W x C) plus the hidden start state and goal cell.

    Channel 0 holds obstacles (the object for grasping), channel 1 the goal,
    the remaining channels the initial belief (one per heading).
    """

    theta: np.ndarray
    start: int
    goal: tuple[int, int]

    @property
    def headings(self) -> int:
        return self.theta.shape[2] - 2

    def belief(self) -> np.ndarray:
        return self.theta[:, :, 2:].reshape(-1).copy()


def make_theta(env: GridEnv, goal: tuple[int, int], belief: np.ndarray) -> np.ndarray:
    H, W, O = env.height, env.width, env.headings
    theta = np.zeros((H, W, 2 + O))
    theta[:, :, 0] = env.obstacles
    theta[goal[0], goal[1], 1] = 1.0
    theta[:, :, 2:] = belief.reshape(H, W, O)
    return theta


# ---------------------------------------------------------------- model assembly


def _bits_to_index(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.int64) << np.arange(bits.shape[-1])).sum(axis=-1)


def obs_likelihood(true_obs: np.ndarray, n_bits: int, p_flip: float) -> np.ndarray:
    """nS x 2^bits matrix of P(o | state) with independent bit flips."""
    alphabet = np.arange(1 << n_bits)
    diff = true_obs[:, None] ^ alphabet[None, :]
    flips = np.zeros(diff.shape, dtype=np.int64)
    for k in range(n_bits):
        flips += (diff >> k) & 1
    return (p_flip ** flips) * ((1.0 - p_flip) ** (n_bits - flips))


@dataclass
class Dynamics:
    """Intended successor per (state, action) and which moves bump."""

    target: np.ndarray  # nS x nA int
    bumps: np.ndarray  # nS x nA bool
    noop: np.ndarray  # nA bool (the stay action never fails)
    true_obs: np.ndarray  # nS int
    n_bits: int
    valid: np.ndarray  # nS bool
    goal_states: np.ndarray  # int indices


def assemble_model(dyn: Dynamics, p_fail: float, p_flip: float, rewards: RewardSpec,
                   gamma: float = GAMMA) -> TabularPOMDP:
    nS, nA = dyn.target.shape
    goal = np.zeros(nS, dtype=bool)
    goal[dyn.goal_states] = True
    idx = np.arange(nS)
    frozen = goal | ~dyn.valid  # absorbing: goal states and unreachable obstacle states
    step = rewards.step_costs(nA)

    T = []
    R = np.zeros((nS, nA))
    succ_reward = np.zeros((nS, nA))
    same_reward = np.zeros((nS, nA))
    for a in range(nA):
        tgt = np.where(frozen | dyn.bumps[:, a], idx, dyn.target[:, a])
        moves = tgt != idx
        fail = 0.0 if dyn.noop[a] else p_fail
        p_stay = np.where(moves, fail, 1.0)
        rows = np.concatenate([idx, idx[moves]])
        cols = np.concatenate([idx, tgt[moves]])
        vals = np.concatenate([p_stay, np.full(int(moves.sum()), 1.0 - fail)])
        T.append(sp.csr_matrix((vals, (rows, cols)), shape=(nS, nS)))
        r_succ = np.where(goal[tgt] & moves, rewards.goal, step[a])
        r_same = np.where(dyn.bumps[:, a], rewards.bump, step[a])
        r_exp = np.where(moves, (1.0 - fail) * r_succ + fail * r_same, r_same)
        R[:, a] = np.where(frozen, 0.0, r_exp)
        succ_reward[:, a] = np.where(frozen, 0.0, r_succ)
        same_reward[:, a] = np.where(frozen, 0.0, r_same)
    Zs = obs_likelihood(dyn.true_obs, dyn.n_bits, p_flip)
    Z = np.broadcast_to(Zs, (nA,) + Zs.shape).copy()
    meta = {"reward_on_move": succ_reward, "reward_on_stay": same_reward, "target": dyn.target,
            "bumps": dyn.bumps, "valid": dyn.valid}
    return TabularPOMDP(T=T, Z=Z, R=R, gamma=gamma, terminal=frozenset(np.flatnonzero(goal).tolist()),
                        meta=meta)


def grid_dynamics(env: GridEnv, goal: tuple[int, int]) -> Dynamics:
    """Five-action world-frame motion (N, E, S, W, stay) with N/E/S/W obstacle bits."""
    H, W = env.height, env.width
    rr, cc = np.divmod(np.arange(H * W), W)
    target = np.empty((H * W, 5), dtype=np.int64)
    bumps = np.zeros((H * W, 5), dtype=bool)
    bits = np.empty((H * W, 4), dtype=bool)
    for a, (dr, dc) in enumerate(DIRS):
        nr, nc = rr + dr, cc + dc
        blk = env.blocked(nr, nc)
        bits[:, a] = blk
        bumps[:, a] = blk
        target[:, a] = np.where(blk, rr * W + cc, nr * W + nc)
    target[:, 4] = np.arange(H * W)
    noop = np.array([False] * 4 + [True])
    valid = env.free_cells().reshape(-1)
    return Dynamics(target, bumps, noop, _bits_to_index(bits), 4, valid,
                    np.array([goal[0] * W + goal[1]]))


def maze_dynamics(env: GridEnv, goal: tuple[int, int], turn_around: bool = False) -> Dynamics:
    """Differential drive: forward, turn left, turn right, [turn around,] stay; body-frame bits."""
    H, W = env.height, env.width
    n = H * W * 4
    nA = 5 if turn_around else 4
    cell, h = np.divmod(np.arange(n), 4)
    rr, cc = np.divmod(cell, W)
    target = np.empty((n, nA), dtype=np.int64)
    bumps = np.zeros((n, nA), dtype=bool)
    fr, fc = rr + DIRS[h, 0], cc + DIRS[h, 1]
    blk = env.blocked(fr, fc)
    bumps[:, 0] = blk
    target[:, 0] = np.where(blk, np.arange(n), (fr * W + fc) * 4 + h)
    target[:, 1] = cell * 4 + (h - 1) % 4
    target[:, 2] = cell * 4 + (h + 1) % 4
    if turn_around:
        target[:, 3] = cell * 4 + (h + 2) % 4
    target[:, -1] = np.arange(n)
    bits = np.empty((n, 4), dtype=bool)
    for k in range(4):  # front, right, back, left
        d = DIRS[(h + k) % 4]
        bits[:, k] = env.blocked(rr + d[:, 0], cc + d[:, 1])
    noop = np.zeros(nA, dtype=bool)
    noop[-1] = True
    valid = env.free_states()
    g = goal[0] * W + goal[1]
    return Dynamics(target, bumps, noop, _bits_to_index(bits), 4, valid, g * 4 + np.arange(4))


def dynamics_for(env: GridEnv, goal: tuple[int, int]) -> Dynamics:
    if env.kind == "grid":
        return grid_dynamics(env, goal)
    if env.kind in ("maze", "hallway2"):
        return maze_dynamics(env, goal, turn_around=env.kind == "hallway2")
    from qmdpnet.domains.grasp import grasp_dynamics

    return grasp_dynamics(env, goal)


def build_ground_truth_pomdp(env: GridEnv, variant: str, goal: tuple[int, int] | None = None,
                             rewards: RewardSpec | None = None) -> TabularPOMDP:
    """Tabular model of ``env`` for a given goal cell.

    ``variant`` is "det" (exact motion and sensing) or "stoch" (motion fails
    with ``env.p_move_fail``, each observation bit flips with
    ``env.p_obs_flip``). Grasping is always stochastic and its goal defaults to
    the environment's grasp point.
    """
    if variant not in ("det", "stoch"):
        raise ValueError(f"variant must be 'det' or 'stoch', got {variant!r}")
    if goal is None:
        if env.grasp_point is None:
            raise ValueError("navigation models need a goal cell")
        goal = env.grasp_point
    if env.kind == "grasp":
        variant = "stoch"
        rewards = rewards or GRASP_REWARDS
    stoch = variant == "stoch"
    dyn = dynamics_for(env, goal)
    model = assemble_model(dyn, env.p_move_fail if stoch else 0.0, env.p_obs_flip if stoch else 0.0,
                           rewards or RewardSpec())
    model.meta["variant"] = variant
    return model


# ---------------------------------------------------------------- feasibility


def bfs_distances(model: TabularPOMDP, sources) -> np.ndarray:
    """Fewest intended moves from any source to every state (-1 = unreachable)."""
    target = model.meta["target"]
    bumps = model.meta["bumps"]
    dist = np.full(model.nS, -1, dtype=np.int64)
    q = deque()
    for s in np.atleast_1d(sources):
        dist[s] = 0
        q.append(int(s))
    while q:
        s = q.popleft()
        for a in range(model.nA):
            if bumps[s, a]:
                continue
            t = int(target[s, a])
            if dist[t] < 0:
                dist[t] = dist[s] + 1
                q.append(t)
    return dist


def distance_to_goal(model: TabularPOMDP) -> np.ndarray:
    """Fewest moves from every state to the nearest goal state (-1 = cannot reach)."""
    target = model.meta["target"]
    bumps = model.meta["bumps"]
    nS, nA = target.shape
    ok = ~bumps & (target != np.arange(nS)[:, None])
    src = np.repeat(np.arange(nS), nA)[ok.reshape(-1)]
    dst = target[ok]
    rev = sp.csr_matrix((np.ones(len(src)), (dst, src)), shape=(nS, nS))
    dist = np.full(nS, -1, dtype=np.int64)
    frontier = np.array(sorted(model.terminal), dtype=np.int64)
    dist[frontier] = 0
    d = 0
    while frontier.size:
        d += 1
        nxt = np.unique(rev[frontier].indices)
        nxt = nxt[dist[nxt] < 0]
        dist[nxt] = d
        frontier = nxt
    return dist


# ---------------------------------------------------------------- simulation


@dataclass
class EpisodeState:
    state: int
    t: int
    rng: np.random.Generator
    done: bool = False
    rewards: list[float] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Simulator:
    env: GridEnv
    model: TabularPOMDP

    def reset(self, start: int, rng: np.random.Generator) -> tuple[EpisodeState, int]:
        """Start an episode; the first observation is drawn as if after staying put."""
        a = self.env.stay_action if self.env.stay_action is not None else 0
        o = sample_observation(self.model, start, a, rng)
        return EpisodeState(start, 0, rng, done=start in self.model.terminal), o

    def step(self, ep: EpisodeState, action: int) -> tuple[int, float, bool]:
        if not 0 <= action < self.model.nA:
            raise ValueError(f"invalid action {action}")
        if ep.done:
            raise RuntimeError("episode already finished")
        s = ep.state
        s2 = sample_transition(self.model, s, action, ep.rng)
        o = sample_observation(self.model, s2, action, ep.rng)
        meta = self.model.meta
        r = float(meta["reward_on_move"][s, action] if s2 != s else meta["reward_on_stay"][s, action])
        ep.state, ep.t = s2, ep.t + 1
        ep.rewards.append(r)
        ep.done = s2 in self.model.terminal or ep.t >= self.env.cap
        return o, r, ep.done


def env_step(sim: Simulator, ep: EpisodeState, action: int) -> tuple[int, int, float, bool]:
    """Advance one step: returns (next state, observation, reward, done)."""
    o, r, done = sim.step(ep, action)
    return ep.state, o, r, done
