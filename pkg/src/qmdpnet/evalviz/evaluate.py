"""Rollout evaluation of reference and learned policies."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from qmdpnet.dataset import DomainConfig
from qmdpnet.domains.core import (
    GAMMA,
    GridEnv,
    RewardSpec,
    Simulator,
    TaskParams,
    build_ground_truth_pomdp,
    derive_seed,
)
from qmdpnet.domains.maps import preset_map
from qmdpnet.domains.tasks import sample_task
from qmdpnet.net import NetPolicy, QMDPNet
from qmdpnet.parallel import ordered_map
from qmdpnet.policies import QMDPPolicy
from qmdpnet.pomdp import (
    ImpossibleObservationError,
    TabularPOMDP,
    discounted_return,
    sample_observation,
    sample_transition,
)
from qmdpnet.rollout import TrialRecord, run_episode

PolicyFactory = Callable[[GridEnv, TabularPOMDP, TaskParams], object]


@dataclass
class EvalReport:
    domain: str
    trials: int
    successes: int
    success_rate: float
    mean_steps: float | None
    mean_steps_all: float
    mean_discounted_return: float
    records: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    # filled when the reference policy was also run on every trial
    expert_success_rate: float | None = None
    success_rate_expert_solved: float | None = None

    @classmethod
    def from_records(cls, domain: str, records: list[TrialRecord], config: dict | None = None,
                     expert: list[bool] | None = None) -> "EvalReport":
        if not records:
            raise ValueError("no trials")
        wins = [r for r in records if r.success]
        rep = cls(
            domain=domain,
            trials=len(records),
            successes=len(wins),
            success_rate=100.0 * len(wins) / len(records),
            mean_steps=float(np.mean([r.steps for r in wins])) if wins else None,
            mean_steps_all=float(np.mean([r.steps for r in records])),
            mean_discounted_return=float(np.mean([r.discounted_return for r in records])),
            records=[r.summary() for r in records],
            config=config or {},
        )
        if expert is not None:
            solved = [r for r, e in zip(records, expert) if e]
            rep.expert_success_rate = 100.0 * len(solved) / len(records)
            if solved:
                rep.success_rate_expert_solved = 100.0 * sum(r.success for r in solved) / len(solved)
            for d, e in zip(rep.records, expert):
                d["expert_success"] = bool(e)
        return rep

    def to_dict(self, with_records: bool = True) -> dict:
        d = {k: getattr(self, k) for k in ("domain", "trials", "successes", "success_rate", "mean_steps",
                                           "mean_steps_all", "mean_discounted_return", "config",
                                           "expert_success_rate", "success_rate_expert_solved")}
        if with_records:
            d["records"] = self.records
        return d

    def to_json(self, with_records: bool = True) -> str:
        return json.dumps(self.to_dict(with_records), sort_keys=True)


def reference_policy_factory(rewards: RewardSpec | None = None, max_iters: int | None = None) -> PolicyFactory:
    """Reference QMDP; with ``rewards`` it plans on a reward-modified copy of the true model."""

    def make(env: GridEnv, model: TabularPOMDP, task: TaskParams):
        plan = model if rewards is None else build_ground_truth_pomdp(
            env, _variant_of(model), task.goal, rewards)
        return QMDPPolicy(plan, max_iters=max_iters)

    return make


def net_policy_factory(net: QMDPNet, K: int | None = None) -> PolicyFactory:
    def make(env, model, task):
        return NetPolicy(net, K)

    return make


def _variant_of(model: TabularPOMDP) -> str:
    return model.meta["variant"]


def rollout(policy, env: GridEnv, variant: str, task: TaskParams, seed: int,
            model: TabularPOMDP | None = None) -> TrialRecord:
    model = model if model is not None else build_ground_truth_pomdp(env, variant, task.goal)
    return run_episode(policy, Simulator(env, model), task, seed, GAMMA)


def evaluate(make_policy: PolicyFactory, config: DomainConfig, trials: int, seed: int,
             envs: list[GridEnv] | None = None, domain_id: str | None = None,
             task_kw: dict | None = None, expert_filter: bool = False, threads: int = 1) -> EvalReport:
    """Run ``trials`` episodes; trial i uses environment i (or ``envs[i % len(envs)]``).

    Task and episode seeds follow the expert-data generator with one
    trajectory per environment, so the reference policy reproduces the
    generator's success fraction on the same seeds. ``expert_filter`` also
    runs the reference policy on every trial and reports the success rate
    over the trials it solved.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    variant = config.model_variant

    def trial(i: int) -> tuple[TrialRecord, bool | None]:
        env = envs[i % len(envs)] if envs else config.make_env(seed, i)
        task = sample_task(env, derive_seed(seed, i, 0, 1), **(task_kw or {}))
        model = build_ground_truth_pomdp(env, variant, task.goal)
        ep_seed = derive_seed(seed, i, 0, 2)
        rec = rollout(make_policy(env, model, task), env, variant, task, ep_seed, model)
        ok = rollout(QMDPPolicy(model), env, variant, task, ep_seed, model).success if expert_filter else None
        return rec, ok

    out = ordered_map(trial, range(trials), threads)
    records = [r for r, _ in out]
    name = domain_id or f"{config.domain}-{variant}-{config.n}"
    cfg = {"domain": config.domain, "n": config.n, "variant": variant, "seed": seed, "trials": trials,
           "fixed_env": config.fixed_env}
    return EvalReport.from_records(name, records, cfg, [e for _, e in out] if expert_filter else None)


def transfer_eval(net: QMDPNet, map_name: str = "intel", K_exec=None, trials: int = 20, seed: int = 0,
                  pgm: bytes | None = None, env: GridEnv | None = None, threads: int = 1) -> dict[int, EvalReport]:
    """Evaluate a tied model on a building map at several planner depths.

    ``K_exec`` defaults to (K, 2K, 5K) of the trained depth.
    """
    K0 = net.config.K
    Ks = list(K_exec) if K_exec is not None else [K0, 2 * K0, 5 * K0]
    env = env if env is not None else preset_map(map_name, seed=0, pgm=pgm)
    cfg = DomainConfig("map", n=max(env.height, env.width), variant="det", map_name=map_name)
    out = {}
    for K in Ks:
        big = net.expand_K(K)
        rep = evaluate(net_policy_factory(big), cfg, trials, seed, envs=[env], domain_id=f"transfer-{env.name}",
                       threads=threads)
        rep.config.update({"K_exec": K, "K_train": K0, "n_parameters": big.n_parameters(),
                           "map": [env.height, env.width]})
        out[K] = rep
    return out


SHAPING_VARIANTS = {
    "original": None,
    "modified_1": {"stay": 20.0},
    "modified_2": {"stay": 50.0, "turn_right": 10.0},
}


def shaped_rewards(env: GridEnv, scales: dict[str, float] | None) -> RewardSpec:
    mult = np.ones(env.n_actions)
    for name, m in (scales or {}).items():
        mult[env.action_names.index(name)] = m
    return RewardSpec(action_scale=tuple(float(x) for x in mult))


def reward_shaping_experiment(trials: int = 500, seed: int = 0, n: int = 29,
                              config: DomainConfig | None = None, threads: int = 1) -> dict[str, EvalReport]:
    """QMDP planned on original and step-cost-modified maze rewards, all scored on the original rewards."""
    config = config or DomainConfig("maze", n, "det")
    probe = config.make_env(seed, 0)
    out = {}
    for name, scales in SHAPING_VARIANTS.items():
        factory = reference_policy_factory(shaped_rewards(probe, scales) if scales else None)
        rep = evaluate(factory, config, trials, seed, domain_id=f"reward-shaping-{name}", threads=threads)
        rep.config["action_scale"] = list(shaped_rewards(probe, scales).action_scale)
        out[name] = rep
    return out


def evaluate_tabular(model: TabularPOMDP, trials: int, seed: int, cap: int, domain_id: str = "tabular",
                     threads: int = 1) -> EvalReport:
    """Reference QMDP run directly on a tabular model (e.g. a parsed ``.pomdp`` file).

    Each trial draws the hidden start from the model's start distribution
    (uniform if absent), acts on the prior belief, and succeeds on entering a
    terminal state within ``cap`` steps.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if not model.terminal:
        raise ValueError("model has no terminal goal states")
    prior = model.start if model.start is not None else np.full(model.nS, 1.0 / model.nS)
    Q = QMDPPolicy(model).Q

    def trial(i: int) -> TrialRecord:
        ep_seed = derive_seed(seed, i, 0, 2)
        rng = np.random.default_rng(ep_seed)
        s = int(rng.choice(model.nS, p=prior))
        policy = QMDPPolicy(model, Q=Q)
        policy.reset(prior)
        rec = TrialRecord(ep_seed, s in model.terminal, 0, 0.0)
        while not rec.success and rec.steps < cap:
            a = policy.act()
            rec.rewards.append(float(model.R[s, a]))
            s = sample_transition(model, s, a, rng)
            o = sample_observation(model, s, a, rng)
            rec.actions.append(a)
            rec.observations.append(o)
            rec.steps += 1
            rec.success = s in model.terminal
            if not rec.success:
                try:
                    policy.observe(a, o)
                except ImpossibleObservationError as exc:
                    rec.failure = f"impossible observation: {exc}"
                    break
        if not rec.success and rec.failure is None:
            rec.failure = "step cap"
        rec.discounted_return = discounted_return(rec.rewards, GAMMA)
        return rec

    records = ordered_map(trial, range(trials), threads)
    cfg = {"seed": seed, "trials": trials, "cap": cap, "states": model.nS, "gamma": model.gamma}
    return EvalReport.from_records(domain_id, records, cfg)
