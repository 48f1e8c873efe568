"""Expert demonstrations from the reference QMDP policy and their on-disk format.

A dataset directory holds ``manifest.json`` plus QNTD tensor files:

    env_obstacles   uint8   E x H x W          obstacle maps
    env_meta        float32 E x 3              grasp row, grasp col, object id (-1 if none)
    traj_theta      float32 N x H x W x C      task images
    traj_meta       float32 N x 6              env index, start, goal row, goal col, length, success
    traj_steps      uint8   S x 3              (prev action, observation, expert action), concatenated

Integers stored as float32 are exact below 2^24.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from qmdpnet import qntd
from qmdpnet.domains import (
    GridEnv,
    Simulator,
    build_ground_truth_pomdp,
    derive_seed,
    gen_grasp_env,
    gen_grid_env,
    gen_maze_env,
    preset_map,
    sample_task,
)
from qmdpnet.domains.core import TaskParams
from qmdpnet.parallel import ordered_map
from qmdpnet.policies import QMDPPolicy
from qmdpnet.rollout import run_episode

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DOMAINS = ("grid", "maze", "grasp", "hallway2", "map")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainConfig:
    domain: str = "grid"
    n: int = 10
    variant: str = "det"
    p_obstacle: float = 0.25
    fixed_env: bool = False
    object_set: str = "train"
    map_name: str = "intel"
    hallway2_path: str | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.variant not in ("det", "stoch"):
            raise ValueError(f"variant must be 'det' or 'stoch', got {self.variant!r}")
        if self.object_set not in ("train", "test"):
            raise ValueError("object_set must be 'train' or 'test'")

    def make_env(self, seed: int, index: int) -> GridEnv:
        """Environment ``index`` of a dataset with master ``seed`` (index 0 in fixed mode)."""
        if self.fixed_env:
            index = 0
        s = derive_seed(seed, index, 0)
        if self.domain == "grid":
            return gen_grid_env(self.n, self.p_obstacle, s)
        if self.domain == "maze":
            return gen_maze_env(self.n, s)
        if self.domain == "grasp":
            from qmdpnet.domains.grasp import TEST_OBJECTS, TRAIN_OBJECTS

            objs = TRAIN_OBJECTS if self.object_set == "train" else TEST_OBJECTS
            return gen_grasp_env(objs[index % len(objs)], s)
        if self.domain == "hallway2":
            from qmdpnet.domains.hallway2 import hallway2_grid_variant

            env, _ = hallway2_grid_variant(s, _hallway2_model(self.hallway2_path), self.p_obstacle)
            return env
        return preset_map(self.map_name, seed=0)

    @property
    def model_variant(self) -> str:
        return "stoch" if self.domain in ("grasp", "hallway2") else self.variant


@lru_cache(maxsize=4)
def _hallway2_model(path: str | None):
    from qmdpnet.domains.hallway2 import load_hallway2

    return load_hallway2(path)


@dataclass(eq=False)
class Trajectory:
    env_index: int
    theta: np.ndarray  # float32 H x W x C
    start: int
    goal: tuple[int, int]
    prev_actions: np.ndarray  # uint8
    observations: np.ndarray  # uint8
    actions: np.ndarray  # uint8
    success: bool

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def steps(self) -> list[tuple[int, int, int]]:
        return list(zip(self.prev_actions.tolist(), self.observations.tolist(), self.actions.tolist()))

    def task(self) -> TaskParams:
        return TaskParams(self.theta.astype(np.float64), self.start, self.goal)


@dataclass(eq=False)
class Dataset:
    manifest: dict
    envs: list[GridEnv]
    trajectories: list[Trajectory]
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.trajectories)

    def subset(self, idx) -> "Dataset":
        m = copy.deepcopy(self.manifest)
        trajs = [self.trajectories[i] for i in idx]
        m["counts"]["trajectories"] = len(trajs)
        m["counts"]["steps"] = int(sum(t.length for t in trajs))
        return Dataset(m, self.envs, trajs)


# ---------------------------------------------------------------- generation


def expert_trajectory(env: GridEnv, env_index: int, variant: str, task: TaskParams, seed: int) -> Trajectory:
    model = build_ground_truth_pomdp(env, variant, task.goal)
    rec = run_episode(QMDPPolicy(model), Simulator(env, model), task, seed)
    return Trajectory(
        env_index=env_index,
        theta=task.theta.astype(np.float32),
        start=task.start,
        goal=(int(task.goal[0]), int(task.goal[1])),
        prev_actions=np.array(rec.prev_actions, dtype=np.uint8),
        observations=np.array(rec.observations, dtype=np.uint8),
        actions=np.array(rec.actions, dtype=np.uint8),
        success=rec.success,
    )


def generate_expert_data(config: DomainConfig, num_envs: int, trajs_per_env: int, seed: int,
                         keep_failures: bool = False, threads: int = 1) -> Dataset:
    """Roll out the reference QMDP policy on random tasks.

    Training sets (``keep_failures=False``) drop unsuccessful demonstrations;
    test sets keep every trial. Environment ``e`` and trajectory ``j`` draw
    from seeds derived from (seed, e, ...) so any subset can be regenerated.
    """
    if num_envs < 1 or trajs_per_env < 1:
        raise ValueError("need at least one environment and one trajectory per environment")

    def one_env(e: int) -> tuple[GridEnv, list[Trajectory]]:
        env = config.make_env(seed, e)
        out = []
        for j in range(trajs_per_env):
            task = sample_task(env, derive_seed(seed, e, j, 1))
            out.append(expert_trajectory(env, e, config.model_variant, task, derive_seed(seed, e, j, 2)))
        return env, out

    envs: list[GridEnv] = []
    trajs: list[Trajectory] = []
    attempted = succeeded = 0
    for e, (env, batch) in enumerate(ordered_map(one_env, range(num_envs), threads)):
        attempted += len(batch)
        succeeded += sum(t.success for t in batch)
        kept = [t for t in batch if t.success or keep_failures]
        if not kept:
            log.info("environment %d has no successful demonstration; dropped", e)
            continue
        if not (config.fixed_env and envs):
            envs.append(env)
        for t in kept:
            t.env_index = len(envs) - 1
        trajs.extend(kept)
    if not envs:
        raise RuntimeError("no environment produced a usable trajectory")
    H, W = envs[0].height, envs[0].width
    headings = envs[0].headings
    manifest = {
        "format_version": FORMAT_VERSION,
        "domain": asdict(config),
        "env_kind": envs[0].kind,
        "grid": [H, W],
        "headings": headings,
        "n_actions": envs[0].n_actions,
        "n_obs_bits": envs[0].n_obs_bits,
        "env_params": {"p_move_fail": envs[0].p_move_fail, "p_obs_flip": envs[0].p_obs_flip,
                       "step_cap": envs[0].step_cap, "name": envs[0].name},
        "seed": seed,
        "keep_failures": keep_failures,
        "channel_schema": ["obstacles", "goal"] + [f"belief_h{h}" for h in range(headings)],
        "counts": {"envs_requested": num_envs, "trajs_per_env": trajs_per_env, "envs": len(envs),
                   "trajectories": len(trajs), "steps": int(sum(t.length for t in trajs))},
        "expert": {"attempted": attempted, "succeeded": succeeded,
                   "success_rate": succeeded / attempted},
    }
    return Dataset(manifest, envs, trajs)


# ---------------------------------------------------------------- split


def split_train_val(dataset: Dataset, fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``round(fraction * N)`` trajectories go to validation."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("validation fraction must be in (0, 1)")
    n = len(dataset)
    n_val = int(round(fraction * n))
    if n_val < 1 or n - n_val < 1:
        raise ValueError(f"{n} trajectories are too few for a {fraction} validation split")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    dataset.train_idx, dataset.val_idx = train_idx, val_idx
    return dataset.subset(train_idx), dataset.subset(val_idx)


# ---------------------------------------------------------------- persistence


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    trajs, envs = dataset.trajectories, dataset.envs
    tensors = {
        "env_obstacles": (np.stack([e.obstacles for e in envs]), "uint8"),
        "env_meta": (np.array([[*(e.grasp_point or (-1, -1)), -1 if e.object_id is None else e.object_id]
                               for e in envs], dtype=np.float64), "float32"),
        "traj_theta": (np.stack([t.theta for t in trajs]), "float32"),
        "traj_meta": (np.array([[t.env_index, t.start, t.goal[0], t.goal[1], t.length, float(t.success)]
                                for t in trajs], dtype=np.float64), "float32"),
        "traj_steps": (np.concatenate([np.stack([t.prev_actions, t.observations, t.actions], axis=1)
                                       for t in trajs]).reshape(-1, 3), "uint8"),
    }
    if dataset.train_idx is not None:
        tensors["split_train"] = (dataset.train_idx.astype(np.float64), "float32")
        tensors["split_val"] = (dataset.val_idx.astype(np.float64), "float32")
    manifest = copy.deepcopy(dataset.manifest)
    manifest["tensors"] = {}
    for name, (arr, dtype) in tensors.items():
        qntd.save(d / f"{name}.qntd", arr, dtype)
        manifest["tensors"][name] = {"file": f"{name}.qntd", "dtype": dtype, "shape": list(arr.shape)}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return d


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetFormatError(f"no manifest.json in {d}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"dataset format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    arrays = {}
    for name, spec in manifest["tensors"].items():
        try:
            arrays[name] = qntd.load(d / spec["file"], spec["dtype"], tuple(spec["shape"]))
        except qntd.TensorFormatError as exc:
            raise DatasetFormatError(f"{spec['file']}: {exc}") from exc
    kind, headings = manifest["env_kind"], manifest["headings"]
    p = manifest["env_params"]
    envs = []
    for obst, (gr, gc, oid) in zip(arrays["env_obstacles"], arrays["env_meta"].astype(np.int64)):
        envs.append(GridEnv(kind, obst, headings=headings,
                            grasp_point=None if gr < 0 else (int(gr), int(gc)),
                            object_id=None if oid < 0 else int(oid), step_cap=p["step_cap"],
                            p_move_fail=p["p_move_fail"], p_obs_flip=p["p_obs_flip"], name=p["name"]))
    meta = arrays["traj_meta"].astype(np.int64)
    steps = arrays["traj_steps"]
    if int(meta[:, 4].sum()) != len(steps):
        raise DatasetFormatError("trajectory lengths disagree with the step table")
    trajs = []
    off = 0
    for i, (ei, start, gr, gc, length, ok) in enumerate(meta):
        if not 0 <= ei < len(envs):
            raise DatasetFormatError(f"trajectory {i} references missing environment {ei}")
        block = steps[off:off + length]
        off += length
        trajs.append(Trajectory(int(ei), arrays["traj_theta"][i], int(start), (int(gr), int(gc)),
                                block[:, 0].copy(), block[:, 1].copy(), block[:, 2].copy(), bool(ok)))
    manifest = {k: v for k, v in manifest.items() if k != "tensors"}
    ds = Dataset(manifest, envs, trajs)
    if "split_train" in arrays:
        ds.train_idx = arrays["split_train"].astype(np.int64)
        ds.val_idx = arrays["split_val"].astype(np.int64)
    return ds


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Deep structural equality (exact array contents)."""
    if a.manifest != b.manifest or len(a.envs) != len(b.envs) or len(a) != len(b):
        return False
    for e, f in zip(a.envs, b.envs):
        if (e.kind, e.headings, e.grasp_point, e.object_id, e.step_cap, e.p_move_fail, e.p_obs_flip, e.name) != \
                (f.kind, f.headings, f.grasp_point, f.object_id, f.step_cap, f.p_move_fail, f.p_obs_flip, f.name):
            return False
        if not np.array_equal(e.obstacles, f.obstacles):
            return False
    for s, t in zip(a.trajectories, b.trajectories):
        if (s.env_index, s.start, s.goal, s.success) != (t.env_index, t.start, t.goal, t.success):
            return False
        for x, y in ((s.theta, t.theta), (s.prev_actions, t.prev_actions),
                     (s.observations, t.observations), (s.actions, t.actions)):
            if x.dtype != y.dtype or not np.array_equal(x, y):
                return False
    for x, y in ((a.train_idx, b.train_idx), (a.val_idx, b.val_idx)):
        if (x is None) != (y is None) or (x is not None and not np.array_equal(x, y)):
            return False
    return True


def dataset_checksum(dataset: Dataset) -> str:
    """SHA-256 over the manifest, environments, trajectories and split."""
    h = hashlib.sha256(json.dumps(dataset.manifest, sort_keys=True).encode())
    for e in dataset.envs:
        h.update(np.ascontiguousarray(e.obstacles).tobytes())
    for t in dataset.trajectories:
        h.update(repr((t.env_index, t.start, t.goal, t.success)).encode())
        for arr in (t.theta, t.prev_actions, t.observations, t.actions):
            h.update(np.ascontiguousarray(arr).tobytes())
    for idx in (dataset.train_idx, dataset.val_idx):
        if idx is not None:
            h.update(np.asarray(idx, dtype=np.int64).tobytes())
    return h.hexdigest()
