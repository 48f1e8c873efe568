"""Time the compiled and numpy kernel backends on the shapes the network uses.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one row per (kernel, shape) with the median time of each backend and the speedup.
A planner step on a 10x10 batch of 100 is the hot loop during training.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from qmdpnet.kernels import compiled_available, get_backend

# (label, batch, H, W, channels in, channels out, kernel size)
CONV_CASES = [
    ("planner/filter 10x10 B=100", 100, 10, 10, 1, 5, 3),
    ("planner 29x29 maze B=1", 1, 29, 29, 4, 16, 3),
    ("planner 101x100 map B=1", 1, 101, 100, 1, 5, 3),
    ("f_Z 1x1 10x10 B=100", 100, 10, 10, 150, 17, 1),
]
# (label, batch, H, W, groups, per group)
MAX_CASES = [
    ("V=max_a Q 10x10 B=100", 100, 10, 10, 1, 5),
    ("V=max_a Q maze 29x29", 1, 29, 29, 4, 4),
]


def _time(fn, repeat: int) -> float:
    fn()
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def run(repeat: int) -> list[tuple[str, str, float, float]]:
    rng = np.random.default_rng(0)
    py, cc = get_backend("python"), get_backend("compiled")
    rows = []
    for label, B, H, W, ci, co, k in CONV_CASES:
        x = rng.standard_normal((B, H, W, ci))
        kern = rng.standard_normal((k, k, ci, co))
        gy = rng.standard_normal((B, H, W, co))
        for op, args in (("conv fwd", (x, kern)), ("conv bwd input", (gy, kern)),
                         ("conv bwd kernel", (x, gy, k, k))):
            name = {"conv fwd": "conv2d_forward", "conv bwd input": "conv2d_backward_input",
                    "conv bwd kernel": "conv2d_backward_kernel"}[op]
            np.testing.assert_allclose(cc[name](*args), py[name](*args), atol=1e-9)
            rows.append((op, label, _time(lambda: py[name](*args), repeat),
                         _time(lambda: cc[name](*args), repeat)))
    for label, B, H, W, g, per in MAX_CASES:
        x = rng.standard_normal((B, H, W, g * per))
        y, idx = py["group_max_forward"](x, g)
        gy = rng.standard_normal(y.shape)
        rows.append(("group max fwd", label, _time(lambda: py["group_max_forward"](x, g), repeat),
                     _time(lambda: cc["group_max_forward"](x, g), repeat)))
        rows.append(("group max bwd", label, _time(lambda: py["group_max_backward"](gy, idx, g * per), repeat),
                     _time(lambda: cc["group_max_backward"](gy, idx, g * per), repeat)))
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not compiled_available():
        sys.exit("compiled kernels are not built; reinstall with Cython available")
    print(f"{'kernel':<16} {'shape':<26} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for op, label, t_py, t_c in run(args.repeat):
        print(f"{op:<16} {label:<26} {1e3 * t_py:>10.3f} {1e3 * t_c:>12.3f} {t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
