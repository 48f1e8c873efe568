"""Run one episode of a policy in the simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from qmdpnet.domains.core import GAMMA, NO_ACTION, Simulator, TaskParams
from qmdpnet.pomdp import ImpossibleObservationError, discounted_return


@dataclass
class TrialRecord:
    seed: int
    success: bool
    steps: int
    discounted_return: float
    prev_actions: list[int] = field(default_factory=list)
    observations: list[int] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    failure: str | None = None

    def summary(self) -> dict:
        return {"seed": self.seed, "success": self.success, "steps": self.steps,
                "discounted_return": self.discounted_return, "failure": self.failure}


def first_prior_action(sim: Simulator) -> int:
    stay = sim.env.stay_action
    return NO_ACTION if stay is None else stay


def run_episode(policy, sim: Simulator, task: TaskParams, seed: int, gamma: float = GAMMA) -> TrialRecord:
    """Simulate ``policy`` from the task's hidden start until the goal or the step cap.

    An observation the policy deems impossible ends the trial as a failure.
    """
    rng = np.random.default_rng(seed)
    ep, o = sim.reset(task.start, rng)
    policy.reset(task)
    prev = first_prior_action(sim)
    rec = TrialRecord(seed, False, 0, 0.0)
    while not ep.done:
        try:
            policy.observe(prev, o)
        except ImpossibleObservationError as exc:
            rec.failure = f"impossible observation: {exc}"
            break
        a = int(policy.act())
        if not 0 <= a < sim.model.nA:
            raise ValueError(f"policy emitted invalid action {a}")
        rec.prev_actions.append(prev)
        rec.observations.append(int(o))
        rec.actions.append(a)
        o, _, _ = sim.step(ep, a)
        prev = a
    rec.steps = ep.t
    rec.rewards = list(ep.rewards)
    rec.success = ep.state in sim.model.terminal
    if not rec.success and rec.failure is None:
        rec.failure = "step cap"
    rec.discounted_return = discounted_return(rec.rewards, gamma)
    return rec
