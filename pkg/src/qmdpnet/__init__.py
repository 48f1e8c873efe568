"""QMDP-net: a differentiable POMDP filter and planner trained by imitation."""

__version__ = "0.1.0"
