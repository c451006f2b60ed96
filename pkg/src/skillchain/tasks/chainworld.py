"""Scalar hand-off world with fully known success maps.

Each subtask is one abstract step: from hand-off state x the running subtask
succeeds with a known probability p_i(x); on success the skill delivers the
next hand-off state near the instructed target g (bounded move, small
uniform noise). Because the maps are known in closed form, both the optimal
chaining value and the value of a fixed random chaining policy are
computable by grid dynamic programming, which makes this environment the
ground-truth oracle for the chaining critic.

State layout (3): [x, completed_fraction, alive]
Action layout (1): [a] in [-1, 1], mapped to a target g = (a + 1) / 2
Subgoal layout (1): [g] in [0, 1]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..envcore import Box, GoalEnv, SubtaskSpec, TaskSpec

STATE_DIM = 3
ACTION_DIM = 1
SUBGOAL_DIM = 1
GOAL_DIM = 1

X, FRAC, ALIVE = 0, 1, 2

_FAIL_SENTINEL = 2.0


def p_map_value(pmap, x):
    """Evaluate a success-map spec at x.

    kinds: ("const", v) | ("peak", center, slope)
         | ("apeak", center, slope_left, slope_right)
         | ("step", threshold, sign)
    """
    kind = pmap[0]
    x = np.asarray(x, dtype=np.float64)
    if kind == "const":
        return np.broadcast_to(np.float64(pmap[1]), x.shape).copy()
    if kind == "peak":
        _, center, slope = pmap
        return np.clip(1.0 - slope * np.abs(x - center), 0.0, 1.0)
    if kind == "apeak":
        _, center, s_left, s_right = pmap
        d = x - center
        drop = np.where(d < 0, -s_left * d, s_right * d)
        return np.clip(1.0 - drop, 0.0, 1.0)
    if kind == "step":
        _, thresh, sign = pmap
        if sign >= 0:
            return (x >= thresh).astype(np.float64)
        return (x <= thresh).astype(np.float64)
    raise ValueError(f"unknown map kind {kind!r}")


@dataclass
class ChainWorldConfig:
    maps: list = field(default_factory=lambda: [
        ("const", 1.0), ("peak", 0.7, 2.0), ("peak", 0.7, 2.0)])
    reach: float = 1.0
    noise: float = 0.02
    start_range: tuple = (0.45, 0.55)
    init_threshold: float = 0.5   # initiation set of subtask i: {p_i >= thr}
    init_ranges: dict = field(default_factory=dict)  # explicit overrides
    n_init: int = 100
    init_seed: int = 77

    @property
    def K(self):
        return len(self.maps)

    def validate(self):
        if self.K < 2:
            raise ValueError("need K >= 2 subtasks")
        if not 0 < self.noise < 0.1:
            raise ValueError("noise out of range")
        if not 0 < self.reach <= 1.0:
            raise ValueError("reach out of range")
        return self


def conflict_chain_config():
    """Maps where the per-subtask optimum differs from the whole-task one:
    the easiest hand-off for the middle subtask strands the final subtask
    out of reach of its sweet spot, and that spot sits asymmetrically
    inside its own super-level set."""
    return ChainWorldConfig(
        maps=[("const", 1.0), ("peak", 0.2, 0.9), ("apeak", 0.88, 10.0, 5.0)],
        reach=0.4,
        start_range=(0.48, 0.52),
        # the final subtask trains from a right-shifted band of hand-offs,
        # so set membership and success probability deliberately disagree
        init_ranges={3: (0.86, 0.98)},
    )


class ChainWorldEnv(GoalEnv):
    state_dim = STATE_DIM
    action_dim = ACTION_DIM
    subgoal_dim = SUBGOAL_DIM
    goal_dim = GOAL_DIM

    def __init__(self, cfg: ChainWorldConfig):
        cfg.validate()
        self.cfg = cfg
        self.K = cfg.K
        init_rng = np.random.default_rng(cfg.init_seed)
        self._init_sets = {
            i: np.stack([self.sample_initiation_law(i, init_rng)
                         for _ in range(cfg.n_init)])
            for i in range(1, cfg.K + 1)
        }
        super().__init__(self._build_spec())

    def _build_spec(self):
        cfg = self.cfg
        subtasks = []
        for i in range(1, cfg.K + 1):
            subtasks.append(SubtaskSpec(
                index=i,
                horizon=1,
                subgoal_space=Box(np.array([0.0]), np.array([1.0])),
                initiation_sampler=self._make_init_sampler(i),
                reward=self._make_reward(i),
                achieved_subgoal=self._make_achieved(i),
            ))
        return TaskSpec(
            subtasks=subtasks,
            episode_horizon=cfg.K,
            task_reward=self._task_reward,
            goal_sampler=lambda rng: np.zeros(1),
            goal_to_final_subgoal=lambda goal: np.array([0.5]),
        )

    def _make_init_sampler(self, i):
        stored = self._init_sets[i]

        def sampler(rng):
            return stored[rng.integers(len(stored))].copy()

        return sampler

    def _make_achieved(self, i):
        # the hand-off counts as achieved only once stage i has actually
        # run; earlier states report a sentinel far from every target.
        # The final stage has no meaningful hand-off: it reports the pinned
        # goal slot, so its reward is exactly the success draw.
        done_frac = i / self.cfg.K
        final = i == self.cfg.K

        def achieved(state):
            if state[ALIVE] == 1.0 and state[FRAC] >= done_frac - 1e-12:
                return np.array([0.5]) if final else np.array([state[X]])
            return np.array([_FAIL_SENTINEL])

        return achieved

    def _make_reward(self, i):
        tol = self.cfg.noise
        achieved = self._make_achieved(i)

        def reward(state, action, subgoal):
            return int(abs(achieved(state)[0] - subgoal[0]) <= tol + 1e-12)

        return reward

    def _task_reward(self, state, goal):
        return int(state[ALIVE] == 1.0 and state[FRAC] >= 1.0 - 1e-12)

    def sample_initiation_law(self, i, rng):
        cfg = self.cfg
        if i == 1:
            x = rng.uniform(*cfg.start_range)
        elif i in cfg.init_ranges:
            x = rng.uniform(*cfg.init_ranges[i])
        else:
            # uniform over the super-level set {p_i >= threshold}
            for _ in range(10_000):
                x = rng.uniform(0.0, 1.0)
                if p_map_value(cfg.maps[i - 1], x) >= cfg.init_threshold:
                    break
            else:
                raise RuntimeError(f"initiation set of subtask {i} is empty")
        s = np.zeros(STATE_DIM)
        s[X] = x
        s[FRAC] = (i - 1) / cfg.K
        s[ALIVE] = 1.0
        return s

    def _sample_initial(self, rng):
        return self.spec.subtasks[0].initiation_sampler(rng)

    def _transition(self, state, action):
        cfg = self.cfg
        s = state.copy()
        if s[ALIVE] != 1.0:
            return s
        i = int(round(s[FRAC] * cfg.K)) + 1
        p = float(p_map_value(cfg.maps[i - 1], s[X]))
        if self._rng.uniform() >= p:
            s[ALIVE] = 0.0
            return s
        if i == cfg.K:
            # the last stage has no further hand-off to deliver
            s[FRAC] = 1.0
            return s
        g = (float(action[0]) + 1.0) / 2.0
        if abs(g - s[X]) > cfg.reach + 1e-12:
            s[ALIVE] = 0.0
            return s
        eps = self._rng.uniform(-cfg.noise, cfg.noise)
        s[X] = float(np.clip(g + eps, 0.0, 1.0))
        s[FRAC] = i / cfg.K
        return s

    def _episode_dead(self, state):
        return state[ALIVE] != 1.0

    def completed_subtasks(self, states):
        last = states[-1]
        return int(round(last[FRAC] * self.cfg.K))


def make_chain_world(config: ChainWorldConfig | None = None):
    cfg = config if config is not None else ChainWorldConfig()
    return ChainWorldEnv(cfg)


# -- grid dynamic programming oracles ---------------------------------------


def _smeared(values, grid, noise):
    """E[V(clip(g + eps))] for every grid point g, eps ~ U(-noise, noise).

    Exact for piecewise-linear V on the grid up to quadrature of the same
    grid resolution; clipping folds tail mass onto the ends.
    """
    n = grid.size
    out = np.empty(n)
    for j in range(n):
        lo = grid[j] - noise
        hi = grid[j] + noise
        pts = np.linspace(lo, hi, 81)
        vals = np.interp(np.clip(pts, 0.0, 1.0), grid, values)
        out[j] = np.trapezoid(vals, pts) / (hi - lo)
    return out


def dp_optimal_values(cfg: ChainWorldConfig, grid_n=1001):
    """V*(x, i) tables, i = 1..K, on a uniform grid over [0, 1].

    V*(x, i) = p_i(x) * max over reachable g of E[V*(x', i+1)], with
    V*(., K+1) = 1.
    """
    grid = np.linspace(0.0, 1.0, grid_n)
    future = np.ones(grid_n)
    tables = [None] * cfg.K
    for i in range(cfg.K, 0, -1):
        sm = _smeared(future, grid, cfg.noise)
        best = np.empty(grid_n)
        reach_pts = int(round(cfg.reach / (grid[1] - grid[0])))
        for j in range(grid_n):
            lo = max(0, j - reach_pts)
            hi = min(grid_n, j + reach_pts + 1)
            best[j] = sm[lo:hi].max()
        tables[i - 1] = p_map_value(cfg.maps[i - 1], grid) * best
        future = tables[i - 1]
    return grid, tables


def dp_random_policy_values(cfg: ChainWorldConfig, grid_n=1001):
    """V(x, i) under a chaining policy that draws g uniformly from [0, 1].

    Out-of-reach draws end the chain, matching the environment.
    """
    grid = np.linspace(0.0, 1.0, grid_n)
    future = np.ones(grid_n)
    tables = [None] * cfg.K
    for i in range(cfg.K, 0, -1):
        if i == cfg.K:
            # the final stage ignores its target entirely
            tables[i - 1] = p_map_value(cfg.maps[i - 1], grid)
            future = tables[i - 1]
            continue
        sm = _smeared(future, grid, cfg.noise)
        mean_v = np.empty(grid_n)
        reach_pts = int(round(cfg.reach / (grid[1] - grid[0])))
        for j in range(grid_n):
            lo = max(0, j - reach_pts)
            hi = min(grid_n, j + reach_pts + 1)
            # integral of sm over the reachable window; draws outside it
            # break the chain and contribute zero
            mean_v[j] = np.trapezoid(sm[lo:hi], grid[lo:hi])
        tables[i - 1] = p_map_value(cfg.maps[i - 1], grid) * mean_v
        future = tables[i - 1]
    return grid, tables


def dp_optimal_task_success(cfg: ChainWorldConfig, grid_n=1001):
    """Whole-task success probability of the optimal chaining policy from
    the episode start distribution."""
    grid, tables = dp_optimal_values(cfg, grid_n)
    a, b = cfg.start_range
    mask = (grid >= a - 1e-12) & (grid <= b + 1e-12)
    return float(tables[0][mask].mean())
