"""Goal-conditioned MDP interface with an explicit ordered subtask
decomposition.

States, goals, subgoals and actions are flat float64 vectors. Rewards are
strictly binary. Episodes terminate at the horizon or as soon as the task
goal is reached, so rollout length is a meaningful efficiency metric.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    out = np.mod(-np.asarray(theta) + np.pi, 2.0 * np.pi)
    return np.pi - out


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with componentwise bounds."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if self.lo.shape != self.hi.shape:
            raise ValueError("box bounds shape mismatch")
        if np.any(self.lo >= self.hi):
            raise ValueError("box needs lo < hi per dim")

    @property
    def dim(self):
        return self.lo.size

    def sample(self, rng):
        return rng.uniform(self.lo, self.hi)

    def contains(self, x, atol=1e-9):
        x = np.asarray(x)
        return bool(np.all(x >= self.lo - atol) and np.all(x <= self.hi + atol))

    def clip(self, x):
        return np.clip(np.asarray(x, dtype=np.float64), self.lo, self.hi)


@dataclass
class SubtaskSpec:
    """One ordered piece of the decomposed task.

    reward(state, action, subgoal) must return exactly 0 or 1 and be a pure
    function of its arguments. achieved_subgoal projects a state onto the
    subgoal space.
    """

    index: int
    horizon: int
    subgoal_space: Box
    initiation_sampler: Callable[[np.random.Generator], np.ndarray]
    reward: Callable[[np.ndarray, np.ndarray, np.ndarray], int]
    achieved_subgoal: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("subtask horizon must be >= 1")
        if self.index < 1:
            raise ValueError("subtask indices are 1-based")


@dataclass
class TaskSpec:
    """The decomposed long-horizon task: K ordered subtasks plus the
    episode-level goal machinery."""

    subtasks: list
    episode_horizon: int
    task_reward: Callable[[np.ndarray, np.ndarray], int]
    goal_sampler: Callable[[np.random.Generator], np.ndarray]
    goal_to_final_subgoal: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if len(self.subtasks) < 2:
            raise ValueError("need K >= 2 subtasks")
        total = sum(s.horizon for s in self.subtasks)
        if self.episode_horizon < total:
            raise ValueError("episode horizon shorter than subtask horizons")
        for want, spec in enumerate(self.subtasks, start=1):
            if spec.index != want:
                raise ValueError("subtask order must be 1..K")

    @property
    def K(self):
        return len(self.subtasks)


@dataclass
class Transition:
    """One low-level step, annotated for hindsight relabeling."""

    state: np.ndarray
    action: np.ndarray
    reward: int
    next_state: np.ndarray
    done: bool
    subgoal: np.ndarray
    achieved_subgoal: np.ndarray

    def __post_init__(self):
        if self.reward not in (0, 1):
            raise ValueError("rewards are strictly binary")


class EpisodeFinished(RuntimeError):
    """Raised when step() is called on a finished episode."""


class GoalEnv:
    """Base class for decomposed goal-conditioned environments.

    Subclasses implement _sample_initial, _transition, and expose a
    TaskSpec. Instances are single-threaded; run one per worker.
    """

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.state = None
        self.goal = None
        self.steps = 0
        self.done = True
        self._rng = None

    # -- subclass hooks ------------------------------------------------

    def _sample_initial(self, rng):
        raise NotImplementedError

    def _transition(self, state, action):
        """Pure-ish dynamics: returns the next state. May draw from the
        episode rng stored on self."""
        raise NotImplementedError

    def _episode_dead(self, state):
        """Optional hook: states from which the task can no longer finish."""
        return False

    # -- episode api -----------------------------------------------------

    def reset(self, rng):
        """Sample a goal and an initial state of subtask 1. The goal stays
        fixed for the whole episode."""
        self._rng = rng
        self.goal = self.spec.goal_sampler(rng)
        self.state = self._sample_initial(rng)
        self.steps = 0
        self.done = False
        return self.state.copy(), self.goal.copy()

    def step(self, action):
        if self.done:
            raise EpisodeFinished("episode finished")
        action = np.asarray(action, dtype=np.float64)
        if np.any(np.abs(action) > 1.0 + 1e-9):
            raise ValueError("action outside [-1, 1]")
        next_state = self._transition(self.state, action)
        self.steps += 1
        reward = int(self.spec.task_reward(next_state, self.goal))
        assert reward in (0, 1)
        self.state = next_state
        self.done = (reward == 1 or self.steps >= self.spec.episode_horizon
                     or self._episode_dead(next_state))
        return next_state.copy(), reward, self.done

    def subtask_reset(self, i, rng):
        """Start an episode from the initiation set of subtask i. For i=1
        this matches reset()'s state marginal."""
        if not 1 <= i <= self.spec.K:
            raise ValueError(f"subtask index {i} out of range")
        self._rng = rng
        self.goal = self.spec.goal_sampler(rng)
        self.state = self.spec.subtasks[i - 1].initiation_sampler(rng)
        self.steps = 0
        self.done = False
        return self.state.copy()

    def restore(self, state, goal, rng):
        """Resume from an explicit state snapshot (states are complete)."""
        self._rng = rng
        self.state = np.asarray(state, dtype=np.float64).copy()
        self.goal = np.asarray(goal, dtype=np.float64).copy()
        self.steps = 0
        self.done = False
        return self.state.copy()

    # -- rewards ---------------------------------------------------------

    def subtask_reward(self, i, state, action, subgoal):
        return int(self.spec.subtasks[i - 1].reward(state, action, subgoal))

    def task_reward(self, state, goal):
        return int(self.spec.task_reward(state, goal))

    def achieved_subgoal(self, i, state):
        return self.spec.subtasks[i - 1].achieved_subgoal(state)


def ball_reached(achieved, target, tol):
    """Closed-ball success test used by the binary reward predicates."""
    a = np.asarray(achieved, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    return float(np.linalg.norm(a - t)) <= tol
