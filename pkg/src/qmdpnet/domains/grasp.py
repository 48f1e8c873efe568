"""Planar grasping with a U-shaped gripper in a 14 x 14 workspace.

The gripper state is its reference cell (r, c), the middle of the palm:

    row r     [F][P][F]        palm cells (r, c-1), (r, c), (r, c+1)
    row r+1   [F]   [F]        finger tips (r+1, c-1), (r+1, c+1); slot (r+1, c)

Each finger tip carries 3 touch sensors reading the cell to its left, the
cell below it and the cell to its right. A sensor fires on an object cell or
the workspace edge. Bits are ordered left to right, left finger first, so the
6 readings map to observation index sum(bit_i << i).

The object library is procedural: skyline shapes up to 6 x 6 whose tallest
column is unique, so the slot can always close around the peak.
"""

from __future__ import annotations

import numpy as np

from qmdpnet.domains.core import DIRS, Dynamics, GridEnv, _bits_to_index, derive_seed

SIZE = 14
N_OBJECTS = 30
TRAIN_OBJECTS = tuple(range(20))
TEST_OBJECTS = tuple(range(20, 30))
GRASP_CAP = 10 * SIZE
_LIBRARY_SEED = 20170401

# gripper body cells relative to the reference cell
BODY = ((0, -1), (0, 0), (0, 1), (1, -1), (1, 1))
# sensor cells, left finger then right finger, each left to right
SENSORS = ((1, -2), (2, -1), (1, 0), (1, 0), (2, 1), (1, 2))


def object_shape(object_id: int) -> np.ndarray:
    """Bitmap (height x width) of library object ``object_id``, bottom row last."""
    if not 0 <= object_id < N_OBJECTS:
        raise ValueError(f"object id {object_id} outside 0..{N_OBJECTS - 1}")
    if object_id == 0:
        return np.ones((1, 1), dtype=np.uint8)
    rng = np.random.default_rng(derive_seed(_LIBRARY_SEED, object_id))
    peak = int(rng.integers(1, 7))
    width = int(rng.integers(1, 7)) if peak > 1 else 1
    peak_col = int(rng.integers(width))
    heights = rng.integers(1, max(peak, 2), size=width)
    heights[peak_col] = peak
    shape = np.zeros((peak, width), dtype=np.uint8)
    for j, h in enumerate(heights):
        shape[peak - h:, j] = 1
    return shape


def valid_configurations(workspace: np.ndarray) -> np.ndarray:
    """H x W mask of reference cells where the gripper body fits without contact."""
    H, W = workspace.shape
    ok = np.zeros((H, W), dtype=bool)
    for r in range(H):
        for c in range(W):
            ok[r, c] = all(
                0 <= r + dr < H and 0 <= c + dc < W and workspace[r + dr, c + dc] == 0 for dr, dc in BODY
            )
    return ok


def gen_grasp_env(object_id: int, seed: int = 0) -> GridEnv:
    """Place library object ``object_id`` on the bottom row at a seeded column."""
    shape = object_shape(object_id)
    h, w = shape.shape
    heights = shape.sum(axis=0)
    peak = int(np.argmax(heights))
    # both fingers must fit beside the peak column
    lo, hi = max(0, 1 - peak), min(SIZE - w, SIZE - 2 - peak)
    col = int(np.random.default_rng(seed).integers(lo, hi + 1))
    ws = np.zeros((SIZE, SIZE), dtype=np.uint8)
    ws[SIZE - h:, col:col + w] = shape
    grasp = (SIZE - int(heights[peak]) - 1, col + peak)
    return GridEnv("grasp", ws, grasp_point=grasp, object_id=object_id, step_cap=GRASP_CAP)


def sensor_bits(workspace: np.ndarray) -> np.ndarray:
    """(H*W) x 6 touch readings for every reference cell."""
    H, W = workspace.shape
    rr, cc = np.divmod(np.arange(H * W), W)
    bits = np.empty((H * W, 6), dtype=bool)
    for k, (dr, dc) in enumerate(SENSORS):
        r, c = rr + dr, cc + dc
        inside = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        hit = np.ones(H * W, dtype=bool)
        hit[inside] = workspace[r[inside], c[inside]] == 1
        bits[:, k] = hit
    return bits


def grasp_dynamics(env: GridEnv, goal: tuple[int, int]) -> Dynamics:
    H, W = env.height, env.width
    valid = env.free_cells().reshape(-1)
    n = H * W
    rr, cc = np.divmod(np.arange(n), W)
    target = np.empty((n, 4), dtype=np.int64)
    bumps = np.zeros((n, 4), dtype=bool)
    for a, (dr, dc) in enumerate(DIRS):
        r, c = rr + dr, cc + dc
        inside = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        ok = np.zeros(n, dtype=bool)
        ok[inside] = valid[(r * W + c)[inside]]
        bumps[:, a] = ~ok
        target[:, a] = np.where(ok, r * W + c, np.arange(n))
    noop = np.zeros(4, dtype=bool)
    obs = _bits_to_index(sensor_bits(env.obstacles))
    return Dynamics(target, bumps, noop, obs, 6, valid, np.array([goal[0] * W + goal[1]]))


def upper_half(env: GridEnv) -> np.ndarray:
    """Mask of valid reference cells in the top half of the workspace."""
    mask = env.free_cells().copy()
    mask[env.height // 2:] = False
    return mask
