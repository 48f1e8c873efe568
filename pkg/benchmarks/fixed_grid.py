"""Desk-scale learning run on a single fixed 10x10 grid.

Generates 2000 expert trajectories on one environment, trains a K=30 tied net in a single
round with step limit 100, and evaluates the trained policy on 500 fresh start/goal trials.
Writes the model, the training reports and the evaluation report to --out.

    python benchmarks/fixed_grid.py --out artifacts/fixed_grid
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from qmdpnet.dataset import DomainConfig, generate_expert_data
from qmdpnet.evalviz import evaluate, net_policy_factory
from qmdpnet.net import NetConfig, params_checksum, save_model
from qmdpnet.train import TrainConfig, curriculum_train

DATA_SEED = 11
EVAL_SEED = 5011
TRAJECTORIES = 2000
TRAIN_BUDGET = 4 * 3600.0


def run(out: str | Path, time_limit: float = TRAIN_BUDGET - 300.0, trials: int = 500) -> dict:
    out = Path(out)
    dc = DomainConfig("grid", 10, "det", fixed_env=True)
    t0 = time.monotonic()
    ds = generate_expert_data(dc, 1, TRAJECTORIES, seed=DATA_SEED)
    gen_seconds = time.monotonic() - t0
    t0 = time.monotonic()
    net, reports = curriculum_train(ds, NetConfig("grid", 10, 10, K=30),
                                    TrainConfig(seed=0, time_limit=time_limit))
    train_seconds = time.monotonic() - t0
    rep = evaluate(net_policy_factory(net), dc, trials, seed=EVAL_SEED, envs=ds.envs)
    summary = {
        "trajectories": TRAJECTORIES, "expert": ds.manifest["expert"], "K": net.config.K,
        "step_limits": [r.step_limit for r in reports], "epochs": [len(r.train_loss) for r in reports],
        "stop_reasons": [r.stop_reason for r in reports], "gen_seconds": gen_seconds,
        "train_seconds": train_seconds, "checksum": params_checksum(net.params),
        "eval": rep.to_dict(),
    }
    save_model(net, out / "model", {"fixed_grid": True})
    (out / "reports.json").write_text(json.dumps([r.to_dict() for r in reports]))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="artifacts/fixed_grid")
    ap.add_argument("--time-limit", type=float, default=TRAIN_BUDGET - 300.0)
    ap.add_argument("--trials", type=int, default=500)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    s = run(args.out, args.time_limit, args.trials)
    print(json.dumps({k: v for k, v in s.items() if k != "eval"}, indent=2))
    print("success rate", s["eval"]["success_rate"])


if __name__ == "__main__":
    main()
