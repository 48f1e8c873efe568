"""Policy evaluation, transfer to large maps, reward shaping, and diagnostic images."""

from qmdpnet.evalviz.evaluate import (
    EvalReport,
    evaluate,
    evaluate_tabular,
    net_policy_factory,
    reference_policy_factory,
    reward_shaping_experiment,
    rollout,
    transfer_eval,
)
from qmdpnet.evalviz.viz import emit_visualizations, scale_image

__all__ = [
    "EvalReport", "evaluate", "evaluate_tabular", "net_policy_factory", "reference_policy_factory",
    "reward_shaping_experiment", "rollout", "transfer_eval", "emit_visualizations", "scale_image",
]
