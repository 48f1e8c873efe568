"""Policies that map action/observation histories to actions.

A policy is reset with the task, then alternates ``observe(prev_action, o)``
and ``act()``. The first observation arrives after a designated prior action
(stay, or NO_ACTION when the domain has none).
"""

from __future__ import annotations

import numpy as np

from qmdpnet.domains.core import NO_ACTION, TaskParams, distance_to_goal
from qmdpnet.pomdp import (
    ImpossibleObservationError,
    TabularPOMDP,
    exact_filter_step,
    qmdp_action,
    value_iteration,
)


def vi_budget(model: TabularPOMDP) -> int | None:
    """Value-iteration cap: twice the largest finite distance to the goal.

    Models without successor metadata (e.g. parsed files) run to convergence.
    """
    if "target" not in model.meta:
        return None
    d = distance_to_goal(model)
    return max(2 * int(d.max()), 1)


class QMDPPolicy:
    """Reference policy: MDP Q-values, exact Bayes filter, belief-weighted greedy action."""

    def __init__(self, model: TabularPOMDP, Q: np.ndarray | None = None, max_iters: int | None = None):
        self.model = model
        if Q is None:
            Q = value_iteration(model, max_iters=max_iters if max_iters is not None else vi_budget(model))
        self.Q = Q
        self.belief: np.ndarray | None = None

    def reset(self, task: TaskParams | np.ndarray) -> None:
        b = task.belief() if isinstance(task, TaskParams) else task
        self.belief = np.asarray(b, dtype=np.float64).copy()

    def observe(self, prev_action: int, observation: int) -> None:
        """Condition on ``observation`` received after ``prev_action`` (NO_ACTION skips prediction)."""
        if prev_action == NO_ACTION:
            post = self.belief * self.model.Z[0, :, observation]
            mass = post.sum()
            if mass < 1e-12:
                raise ImpossibleObservationError("initial observation impossible under the prior")
            self.belief = post / mass
        else:
            self.belief = exact_filter_step(self.model, self.belief, prev_action, observation)

    def act(self) -> int:
        return qmdp_action(self.Q, self.belief)
