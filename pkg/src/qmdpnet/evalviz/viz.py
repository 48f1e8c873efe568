"""Diagnostic images: value map, belief propagation, learned kernels and rewards.

Every image is written as an 8-bit binary PGM plus a CSV mirror with the
unscaled values (row, col, value), and ``manifest.json`` lists them all.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from qmdpnet.domains.core import GridEnv, Simulator, TaskParams, build_ground_truth_pomdp
from qmdpnet.domains.maps import write_pgm
from qmdpnet.net import NetPolicy, QMDPNet
from qmdpnet.policies import QMDPPolicy
from qmdpnet.rollout import first_prior_action
from qmdpnet.tensor import Tensor


def scale_image(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Min-max scale to 0..255; a degenerate range maps to mid-gray 128."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(v.min()) if lo is None else lo
    hi = float(v.max()) if hi is None else hi
    if not hi > lo:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.clip(np.rint(255.0 * (v - lo) / (hi - lo)), 0, 255).astype(np.uint8)


class _Writer:
    def __init__(self, out: Path):
        self.out = out
        self.files: list[dict] = []

    def image(self, name: str, values: np.ndarray, description: str, lo=None, hi=None) -> None:
        values = np.asarray(values, dtype=np.float64)
        (self.out / f"{name}.pgm").write_bytes(write_pgm(scale_image(values, lo, hi)))
        rows = ["row,col,value"]
        rows += [f"{r},{c},{values[r, c]!r}" for r in range(values.shape[0]) for c in range(values.shape[1])]
        (self.out / f"{name}.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        self.files.append({"name": name, "pgm": f"{name}.pgm", "csv": f"{name}.csv",
                           "shape": list(values.shape), "description": description})


def displacement_kernels(net: QMDPNet) -> tuple[np.ndarray, np.ndarray]:
    """(filter, planner) kernels as A x k x k displacement maps, averaged over headings.

    Pixel (c + dr, c + dc) holds the weight of moving by (dr, dc). The
    filter kernel is stored flipped (it gathers mass from the source cell),
    the planner kernel unflipped (it gathers values from the target cell).
    """
    cfg = net.config
    Hd, A = cfg.headings, cfg.n_actions
    ft = net.filter_kernel().data.reshape(cfg.ft_kernel, cfg.ft_kernel, Hd, A, Hd)
    fil = ft.sum(axis=4).mean(axis=2)[::-1, ::-1]  # k x k x A
    tp = net.planner_kernel(0).data.reshape(cfg.ft_kernel, cfg.ft_kernel, Hd, Hd, A)
    plan = tp.sum(axis=2).mean(axis=2)
    return np.moveaxis(fil, 2, 0), np.moveaxis(plan, 2, 0)


def emit_visualizations(net: QMDPNet, env: GridEnv, task: TaskParams, out_dir: str | Path,
                        variant: str = "det", steps: int = 10, seed: int = 0) -> dict:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    w = _Writer(out)
    cfg = net.config
    theta = Tensor(task.theta)
    q = net.planner(theta)
    v = net.value_map(q)[0].max(axis=2)
    w.image("value", v, f"V_K over the map (max over headings), K={cfg.K}")

    r = net.reward_map(theta).data[0].reshape(env.height, env.width, cfg.headings, cfg.n_actions)
    names = env.action_names
    for a in range(cfg.n_actions):
        w.image(f"reward_{names[a]}", r[..., a].mean(axis=2), f"learned R for action {names[a]}")
    fil, plan = displacement_kernels(net)
    for a in range(cfg.n_actions):
        w.image(f"kernel_filter_{names[a]}", fil[a], f"filter transition kernel, action {names[a]}")
        w.image(f"kernel_planner_{names[a]}", plan[a], f"planner transition kernel, action {names[a]}")

    # belief propagation: exact filter on the true model vs the network filter
    model = build_ground_truth_pomdp(env, variant, task.goal)
    sim = Simulator(env, model)
    ep, o = sim.reset(task.start, np.random.default_rng(seed))
    learned, exact = NetPolicy(net), QMDPPolicy(model)
    learned.reset(task)
    exact.reset(task)
    prev = first_prior_action(sim)
    shape = (env.height, env.width, env.headings)
    max_diff = 0.0
    for t in range(steps):
        learned.observe(prev, o)
        exact.observe(prev, o)
        bt = exact.belief.reshape(shape).sum(axis=2)
        bp = learned.b.data[0].sum(axis=2)
        diff = np.abs(bt - bp)
        max_diff = max(max_diff, float(diff.max()))
        top = max(float(bt.max()), float(bp.max()))
        w.image(f"belief_{t:03d}_true", bt, f"exact belief after step {t}", 0.0, top)
        w.image(f"belief_{t:03d}_pred", bp, f"network belief after step {t}", 0.0, top)
        w.image(f"belief_{t:03d}_diff", diff, f"|exact - network| after step {t}", 0.0, top)
        if ep.done:
            break
        a = learned.act()
        o, _, _ = sim.step(ep, a)
        prev = a
    manifest = {"files": w.files, "K": cfg.K, "kind": cfg.kind, "map": [env.height, env.width],
                "goal": list(task.goal), "start": int(task.start), "belief_max_abs_diff": max_diff}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest
