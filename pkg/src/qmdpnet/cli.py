"""Command-line interface: qmdpnet {gen,train,eval,solve,transfer,viz,gradcheck}.

Each command reads an optional JSON config (``--config file.json``) whose
keys are exactly the command's flags; flags given on the command line
override file values, which override defaults. Reports go to stdout as one
JSON document, logs to stderr. Exit codes: 0 success, 1 runtime error,
2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("qmdpnet")


class ConfigError(ValueError):
    pass


def _opt_int(s: str) -> int | None:
    return None if s.lower() in ("none", "null") else int(s)


def _opt_float(s: str) -> float | None:
    return None if s.lower() in ("none", "null") else float(s)


def _opt_str(s: str) -> str | None:
    return None if s.lower() in ("none", "null") else s


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _opt_bool(s: str) -> bool | None:
    return None if s.lower() in ("none", "null") else _bool(s)


def _int_list(s: str) -> list[int] | None:
    if s.lower() in ("none", "null"):
        return None
    return [int(x) for x in s.split(",") if x]


# key: (default, parser, help). A default of None for "paths" marks a required key where noted.
DOMAIN_KEYS = {
    "domain": ("grid", str, "grid | maze | grasp | hallway2 | map"),
    "n": (10, int, "grid side length"),
    "variant": ("det", str, "det | stoch (grasp and hallway2 are always stoch)"),
    "p_obstacle": (0.25, float, "obstacle probability per cell (grid, hallway2)"),
    "fixed_env": (False, _bool, "reuse one environment for every trajectory"),
    "object_set": ("train", str, "grasp object split: train | test"),
    "map_name": ("intel", str, "LIDAR map preset"),
    "hallway2_path": (None, _opt_str, "path to hallway2.pomdp"),
}
NET_KEYS = {
    "K": (None, _opt_int, "planner iterations (default: domain-specific)"),
    "net_variant": ("tied", str, "tied | untied planner kernels"),
    "fz_activation": ("linear", str, "f_Z hidden activation"),
    "fr_activation": ("relu", str, "f_R hidden activation"),
    "fz_hidden": (150, int, "f_Z hidden filters"),
    "fr_hidden": (150, int, "f_R hidden filters"),
}
TRAIN_KEYS = {
    "batch_size": (100, int, "trajectories per mini-batch"),
    "lr": (None, _opt_float, "learning rate (default 1e-3 tied, 1e-4 untied)"),
    "bptt_window": (4, int, "truncated backpropagation window"),
    "round1_limit": (4, int, "step limit L of round 1"),
    "round2_limit": (100, int, "step limit L of round 2"),
    "patience": (30, int, "epochs without validation improvement before lr decay"),
    "lr_decay": (0.9, float, "learning-rate decay factor"),
    "max_decays": (15, int, "stop after this many decays"),
    "val_fraction": (0.1, float, "validation fraction"),
    "max_epochs": (None, _opt_int, "cap on epochs per round"),
    "clip_norm": (None, _opt_float, "optional global gradient-norm clip"),
    "time_limit": (None, _opt_float, "wall-clock seconds per round"),
    "train_fixed_env": (None, _opt_bool, "force single-round mode (default: from dataset)"),
}

COMMANDS = {
    "gen": {
        **DOMAIN_KEYS,
        "envs": (100, int, "number of environments"),
        "trajs": (5, int, "trajectories per environment"),
        "seed": (0, int, "master seed"),
        "keep_failures": (False, _bool, "keep unsuccessful expert trials"),
        "threads": (1, int, "worker processes for rollouts and generation (results do not depend on it)"),
        "out": (None, str, "output dataset directory (required)"),
    },
    "train": {
        "data": (None, str, "dataset directory (required)"),
        "out": (None, str, "output model directory (required)"),
        "seed": (0, int, "training and initialization seed"),
        **NET_KEYS,
        **TRAIN_KEYS,
    },
    "eval": {
        "model": (None, str, "model directory (required)"),
        **DOMAIN_KEYS,
        "data": (None, _opt_str, "dataset whose environments to reuse (fixed-environment evaluation)"),
        "trials": (500, int, "number of trials"),
        "seed": (0, int, "master seed"),
        "K": (None, _opt_int, "planner iterations at execution (tied only)"),
        "records": (False, _bool, "include per-trial records"),
        "expert_filter": (True, _bool, "also run the reference policy and report SR over trials it solved"),
        "threads": (1, int, "worker processes for rollouts and generation (results do not depend on it)"),
    },
    "solve": {
        **DOMAIN_KEYS,
        "trials": (500, int, "number of trials"),
        "seed": (0, int, "master seed"),
        "records": (False, _bool, "include per-trial records"),
        "threads": (1, int, "worker processes for rollouts and generation (results do not depend on it)"),
    },
    "transfer": {
        "model": (None, str, "model directory (required)"),
        "map": ("intel", str, "map preset name"),
        "pgm": (None, _opt_str, "occupancy PGM to use instead of the synthetic preset"),
        "k": (None, _int_list, "comma-separated planner depths (default K,2K,5K)"),
        "trials": (20, int, "trials per depth"),
        "seed": (0, int, "master seed"),
        "threads": (1, int, "worker processes for rollouts and generation (results do not depend on it)"),
    },
    "viz": {
        "model": (None, _opt_str, "model directory; omit with inject=true for ground-truth weights"),
        "inject": (False, _bool, "use ground-truth weights (grid only)"),
        **DOMAIN_KEYS,
        "seed": (0, int, "environment and task seed"),
        "steps": (10, int, "belief-propagation steps to render"),
        "out": (None, str, "output directory (required)"),
    },
    "gradcheck": {
        "seed": (0, int, "first seed"),
        "configs": (1, int, "number of seeded configurations"),
        "size": (4, int, "grid side length"),
        "K": (3, int, "planner iterations"),
        "tolerance": (1e-3, float, "maximum relative error"),
    },
}
REQUIRED = {"gen": ["out"], "train": ["data", "out"], "eval": ["model"], "transfer": ["model"], "viz": ["out"]}


def default_K(domain: str, n: int) -> int:
    """Planner depth by domain: 3N for grids, 4N for mazes, 20 for grasping, 90 for maps."""
    return {"grid": 3 * n, "hallway2": 3 * n, "maze": 4 * n, "grasp": 20}.get(domain, 90)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmdpnet", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=f"{name} command")
        p.add_argument("--config", default=None, help="JSON file with any of the keys below")
        for key, (default, typ, text) in keys.items():
            p.add_argument(f"--{key}", type=typ, default=argparse.SUPPRESS,
                           help=f"{text} (default: {json.dumps(default)})")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < flags; unknown file keys are rejected."""
    keys = COMMANDS[command]
    cfg = {k: v[0] for k, v in keys.items()}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(data) - set(keys))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        for k, v in data.items():
            parse = keys[k][1]
            if isinstance(v, str) and parse is not str:
                try:
                    v = parse(v)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"bad value for {k}: {exc}") from exc
            cfg[k] = v
    for k in keys:
        if hasattr(args, k):
            cfg[k] = getattr(args, k)
    if cfg.get("threads", 1) < 1:
        raise ConfigError("threads must be at least 1")
    for k in REQUIRED.get(command, []):
        if cfg.get(k) is None:
            raise ConfigError(f"{command} needs --{k}")
    return cfg


def _domain_config(cfg: dict):
    from qmdpnet.dataset import DomainConfig

    try:
        return DomainConfig(cfg["domain"], cfg["n"], cfg["variant"], cfg["p_obstacle"], cfg["fixed_env"],
                            cfg["object_set"], cfg["map_name"], cfg["hallway2_path"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _load_net(path: str):
    from qmdpnet.net import load_model

    try:
        return load_model(path)[0]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_gen(cfg: dict) -> dict:
    from qmdpnet.dataset import dataset_checksum, generate_expert_data, save_dataset

    dc = _domain_config(cfg)
    ds = generate_expert_data(dc, cfg["envs"], cfg["trajs"], cfg["seed"], cfg["keep_failures"], cfg["threads"])
    out = save_dataset(ds, cfg["out"])
    return {"out": str(out), "envs": ds.manifest["counts"]["envs"],
            "trajectories": ds.manifest["counts"]["trajectories"],
            "expert_success_rate": ds.manifest["expert"]["success_rate"], "checksum": dataset_checksum(ds)}


def cmd_train(cfg: dict) -> dict:
    from qmdpnet.dataset import load_dataset
    from qmdpnet.net import NetConfig, params_checksum
    from qmdpnet.train import TrainConfig, curriculum_train, save_checkpoint

    try:
        ds = load_dataset(cfg["data"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    m = ds.manifest
    H, W = m["grid"]
    kind = m["env_kind"]
    domain = m["domain"]["domain"]
    try:
        net_cfg = NetConfig(kind=kind, height=H, width=W, K=cfg["K"] or default_K(domain, max(H, W)),
                            variant=cfg["net_variant"], fz_activation=cfg["fz_activation"],
                            fr_activation=cfg["fr_activation"], fz_hidden=cfg["fz_hidden"],
                            fr_hidden=cfg["fr_hidden"])
        tc = TrainConfig(batch_size=cfg["batch_size"], lr=cfg["lr"], bptt_window=cfg["bptt_window"],
                         round_limits=(cfg["round1_limit"], cfg["round2_limit"]), patience=cfg["patience"],
                         lr_decay=cfg["lr_decay"], max_decays=cfg["max_decays"],
                         val_fraction=cfg["val_fraction"], seed=cfg["seed"], fixed_env=cfg["train_fixed_env"],
                         max_epochs=cfg["max_epochs"], clip_norm=cfg["clip_norm"],
                         time_limit=cfg["time_limit"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    net, reports = curriculum_train(ds, net_cfg, tc)
    save_checkpoint(cfg["out"], net, None, reports, tc)
    return {"out": cfg["out"], "rounds": len(reports), "checksum": params_checksum(net.params),
            "epochs": [len(r.train_loss) for r in reports],
            "best_val_loss": [min(r.val_loss) for r in reports],
            "stop_reasons": [r.stop_reason for r in reports]}


def cmd_eval(cfg: dict) -> dict:
    from qmdpnet.dataset import load_dataset
    from qmdpnet.evalviz import evaluate, net_policy_factory

    net = _load_net(cfg["model"])
    if cfg["K"] is not None and cfg["K"] != net.config.K:
        net = net.expand_K(cfg["K"])
    dc = _domain_config(cfg)
    envs = load_dataset(cfg["data"]).envs if cfg["data"] else None
    rep = evaluate(net_policy_factory(net), dc, cfg["trials"], cfg["seed"], envs=envs,
                   expert_filter=cfg["expert_filter"], threads=cfg["threads"])
    return rep.to_dict(cfg["records"])


def cmd_solve(cfg: dict) -> dict:
    from qmdpnet.evalviz import evaluate, reference_policy_factory

    dc = _domain_config(cfg)
    rep = evaluate(reference_policy_factory(), dc, cfg["trials"], cfg["seed"], threads=cfg["threads"])
    return rep.to_dict(cfg["records"])


def cmd_transfer(cfg: dict) -> dict:
    from qmdpnet.evalviz import transfer_eval
    from qmdpnet.net import UnsupportedVariantError

    net = _load_net(cfg["model"])
    pgm = Path(cfg["pgm"]).read_bytes() if cfg["pgm"] else None
    try:
        reps = transfer_eval(net, cfg["map"], cfg["k"], cfg["trials"], cfg["seed"], pgm=pgm,
                             threads=cfg["threads"])
    except (UnsupportedVariantError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return {"map": cfg["map"], "results": {str(k): r.to_dict(False) for k, r in reps.items()}}


def cmd_viz(cfg: dict) -> dict:
    from qmdpnet.domains.core import build_ground_truth_pomdp, derive_seed
    from qmdpnet.domains.tasks import sample_task
    from qmdpnet.evalviz import emit_visualizations
    from qmdpnet.net import InjectionError, NetConfig, QMDPNet, inject_ground_truth

    dc = _domain_config(cfg)
    env = dc.make_env(cfg["seed"], 0)
    task = sample_task(env, derive_seed(cfg["seed"], 0, 0, 1))
    variant = dc.model_variant
    if cfg["model"]:
        net = _load_net(cfg["model"])
    elif cfg["inject"]:
        nc = NetConfig.for_env(env, fz_activation="relu")
        try:
            net = QMDPNet(nc, inject_ground_truth(nc, build_ground_truth_pomdp(env, variant, task.goal),
                                                  env, task.goal))
        except InjectionError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError("viz needs --model or --inject true")
    man = emit_visualizations(net, env, task, cfg["out"], variant=variant, steps=cfg["steps"], seed=cfg["seed"])
    return {"out": cfg["out"], "files": len(man["files"]), "belief_max_abs_diff": man["belief_max_abs_diff"]}


def cmd_gradcheck(cfg: dict) -> dict:
    from qmdpnet.train import network_grad_check

    results = []
    for s in range(cfg["seed"], cfg["seed"] + cfg["configs"]):
        rep = network_grad_check(s, size=cfg["size"], K=cfg["K"], tolerance=cfg["tolerance"])
        results.append({"seed": s, "max_rel_error": rep.max_rel_error, "per_param": rep.per_param,
                        "checked": rep.checked})
    worst = max(r["max_rel_error"] for r in results)
    return {"ok": worst < cfg["tolerance"], "max_rel_error": worst, "tolerance": cfg["tolerance"],
            "results": results}


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "solve": cmd_solve,
            "transfer": cmd_transfer, "viz": cmd_viz, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        result = HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    if args.command == "gradcheck" and not result["ok"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
