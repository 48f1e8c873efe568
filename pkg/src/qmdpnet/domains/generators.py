"""Random grid and maze generators."""

from __future__ import annotations

import numpy as np

from qmdpnet.domains.core import GridEnv

MAX_RETRIES = 100


def gen_grid_env(n: int, p_obstacle: float = 0.25, seed: int = 0) -> GridEnv:
    """n x n grid whose cells are obstacles independently with prob ``p_obstacle``.

    The area outside the grid counts as obstacle for motion and sensing.
    """
    if n < 4:
        raise ValueError("grid size must be at least 4")
    if not 0.0 <= p_obstacle < 1.0:
        raise ValueError("obstacle probability must be in [0, 1)")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RETRIES):
        grid = (rng.random((n, n)) < p_obstacle).astype(np.uint8)
        if (grid == 0).sum() >= 2:
            return GridEnv("grid", grid)
    raise RuntimeError(f"no grid with 2 free cells after {MAX_RETRIES} draws")


def gen_maze_env(n: int, seed: int = 0) -> GridEnv:
    """Perfect maze by randomized Kruskal over rooms at odd coordinates."""
    if n < 5 or n % 2 == 0:
        raise ValueError("maze size must be odd and at least 5")
    rng = np.random.default_rng(seed)
    m = (n - 1) // 2  # rooms per side
    grid = np.ones((n, n), dtype=np.uint8)
    grid[1::2, 1::2] = 0
    walls = [(r, c, r, c + 1) for r in range(m) for c in range(m - 1)]
    walls += [(r, c, r + 1, c) for r in range(m - 1) for c in range(m)]
    order = rng.permutation(len(walls))
    parent = list(range(m * m))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for w in order:
        r1, c1, r2, c2 = walls[w]
        a, b = find(r1 * m + c1), find(r2 * m + c2)
        if a != b:
            parent[a] = b
            grid[r1 + r2 + 1, c1 + c2 + 1] = 0  # knock down the wall between the rooms
    return GridEnv("maze", grid, headings=4)
