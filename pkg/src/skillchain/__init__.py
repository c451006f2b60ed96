"""Desk-scale skill chaining: subgoal-conditioned skills, a chaining policy,
and a value function that scores boundary states by whole-task success
probability."""

__version__ = "0.1.0"
