"""Planar two-arm transfer task.

A block sits on a start peg on the left. Arm 1 picks it up and carries it
into the shared zone, arm 2 takes it over and places it on the target peg.
Kinematic point dynamics: end effectors move by clipped deltas, an attached
block rides its arm exactly, a grasp re-seats the block so its orientation
becomes a fixed function of the grasp height. Placing succeeds only when
that orientation ended up near the goal orientation, so the height at which
the hand-over happens decides the fate of the final subtask.

State layout (11): [bx, by, theta, e1x, e1y, e2x, e2y, jaw1, jaw2, att1, att2]
Action layout (6): [dx1, dy1, djaw1, dx2, dy2, djaw2], all in [-1, 1]
Subgoal layout (4): [block_x, block_y, rel_x, rel_y] where rel is the active
end effector position relative to the block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..envcore import Box, GoalEnv, SubtaskSpec, TaskSpec, ball_reached, wrap_angle

BX, BY, TH, E1X, E1Y, E2X, E2Y, J1, J2, A1, A2 = range(11)

STATE_DIM = 11
ACTION_DIM = 6
SUBGOAL_DIM = 4
GOAL_DIM = 3


@dataclass
class PlanarConfig:
    workspace: tuple = (1.0, 1.0)
    arm1_xrange: tuple = (0.02, 0.62)
    arm2_xrange: tuple = (0.38, 0.98)
    yrange: tuple = (0.02, 0.98)
    speed_free: float = 0.06
    speed_loaded: float = 0.04
    jaw_rate: float = 0.5
    grasp_radius: float = 0.05
    grasp_close: float = 0.25
    release_open: float = 0.75
    min_arm_gap: float = 0.03
    start_peg: tuple = (0.12, 0.25)
    target_peg: tuple = (0.85, 0.75)
    goal_pos_jitter: float = 0.005
    goal_theta_range: float = 0.05
    twist_gain: float = 0.9
    tol: float = 0.02
    angle_tol: float = 0.2
    subtask_horizon: int = 30
    episode_horizon: int = 100
    n_init: int = 100
    init_seed: int = 1000003
    # subgoal boxes (block-position part); rel part is shared
    carry_box: tuple = ((0.16, 0.20), (0.58, 0.80))
    handover_box: tuple = ((0.42, 0.20), (0.62, 0.80))
    place_margin: float = 0.01
    rel_half: float = 0.014
    # initiation-law knobs
    arm2_park: tuple = (0.66, 0.50)
    place_init_xrange: tuple = (0.42, 0.62)
    place_init_yrange: tuple = (0.34, 0.78)

    def validate(self):
        if self.workspace[0] <= 0 or self.workspace[1] <= 0:
            raise ValueError("degenerate workspace")
        if self.arm1_xrange[0] >= self.arm1_xrange[1]:
            raise ValueError("bad arm1 range")
        if self.arm2_xrange[0] >= self.arm2_xrange[1]:
            raise ValueError("bad arm2 range")
        if self.arm2_xrange[0] >= self.arm1_xrange[1]:
            raise ValueError("arm regions must overlap for a hand-over")
        if self.tol <= 0 or self.angle_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.grasp_radius <= self.min_arm_gap:
            raise ValueError("grasp radius must exceed the arm gap")
        if 3 * self.subtask_horizon > self.episode_horizon:
            raise ValueError("episode horizon too short for the subtasks")
        return self


def _twist(cfg, y):
    return cfg.twist_gain * (2.0 * y - 1.0)


class PlanarTransferEnv(GoalEnv):
    """Three-subtask pick / hand-over / place environment."""

    K = 3
    state_dim = STATE_DIM
    action_dim = ACTION_DIM
    subgoal_dim = SUBGOAL_DIM
    goal_dim = GOAL_DIM

    def __init__(self, cfg: PlanarConfig):
        cfg.validate()
        self.cfg = cfg
        init_rng = np.random.default_rng(cfg.init_seed)
        # initiation sets are materialized once and stay fixed
        self._init_sets = {
            i: np.stack([self.sample_initiation_law(i, init_rng)
                         for _ in range(cfg.n_init)])
            for i in (1, 2, 3)
        }
        spec = self._build_spec()
        super().__init__(spec)

    # -- spec assembly -----------------------------------------------------

    def _build_spec(self):
        cfg = self.cfg
        rel = cfg.rel_half
        boxes = {
            1: Box(np.array([cfg.carry_box[0][0], cfg.carry_box[0][1], -rel, -rel]),
                   np.array([cfg.carry_box[1][0], cfg.carry_box[1][1], rel, rel])),
            2: Box(np.array([cfg.handover_box[0][0], cfg.handover_box[0][1], -rel, -rel]),
                   np.array([cfg.handover_box[1][0], cfg.handover_box[1][1], rel, rel])),
            3: Box(np.array([cfg.target_peg[0] - cfg.place_margin,
                             cfg.target_peg[1] - cfg.place_margin, -rel, -rel]),
                   np.array([cfg.target_peg[0] + cfg.place_margin,
                             cfg.target_peg[1] + cfg.place_margin, rel, rel])),
        }
        subtasks = []
        for i in (1, 2, 3):
            subtasks.append(SubtaskSpec(
                index=i,
                horizon=cfg.subtask_horizon,
                subgoal_space=boxes[i],
                initiation_sampler=self._make_init_sampler(i),
                reward=self._make_reward(i),
                achieved_subgoal=self._make_achieved(i),
            ))
        return TaskSpec(
            subtasks=subtasks,
            episode_horizon=cfg.episode_horizon,
            task_reward=self._task_reward,
            goal_sampler=self._sample_goal,
            goal_to_final_subgoal=lambda goal: np.array(
                [goal[0], goal[1], 0.0, 0.0]),
        )

    def _make_init_sampler(self, i):
        stored = self._init_sets[i]

        def sampler(rng):
            return stored[rng.integers(len(stored))].copy()

        return sampler

    def active_arm(self, i):
        return 1 if i == 1 else 2

    def _make_achieved(self, i):
        ex, ey = (E1X, E1Y) if self.active_arm(i) == 1 else (E2X, E2Y)

        def achieved(state):
            return np.array([state[BX], state[BY],
                             state[ex] - state[BX], state[ey] - state[BY]])

        return achieved

    def _make_reward(self, i):
        achieved = self._make_achieved(i)
        tol = self.cfg.tol

        def reward(state, action, subgoal):
            a = achieved(state)
            pos_ok = ball_reached(a[:2], subgoal[:2], tol)
            rel_ok = ball_reached(a[2:], subgoal[2:], tol)
            return int(pos_ok and rel_ok)

        return reward

    def achieved_goal(self, state):
        """Projection of a state onto the task goal space."""
        return np.array([state[BX], state[BY], state[TH]])

    def _task_reward(self, state, goal):
        pos_ok = ball_reached(state[[BX, BY]], goal[:2], self.cfg.tol)
        ang_ok = abs(wrap_angle(state[TH] - goal[2])) <= self.cfg.angle_tol
        return int(pos_ok and ang_ok)

    def _sample_goal(self, rng):
        cfg = self.cfg
        j = cfg.goal_pos_jitter
        return np.array([
            cfg.target_peg[0] + rng.uniform(-j, j),
            cfg.target_peg[1] + rng.uniform(-j, j),
            rng.uniform(-cfg.goal_theta_range, cfg.goal_theta_range),
        ])

    # -- initiation laws ---------------------------------------------------

    def sample_initiation_law(self, i, rng):
        """Draw from the continuous law behind the stored initiation set."""
        cfg = self.cfg
        s = np.zeros(STATE_DIM)
        if i == 1:
            s[BX] = cfg.start_peg[0] + rng.uniform(-0.01, 0.01)
            s[BY] = cfg.start_peg[1] + rng.uniform(-0.01, 0.01)
            s[TH] = rng.uniform(-np.pi, np.pi)
            s[E1X] = 0.25 + rng.uniform(-0.02, 0.02)
            s[E1Y] = 0.50 + rng.uniform(-0.02, 0.02)
            s[E2X] = 0.72 + rng.uniform(-0.02, 0.02)
            s[E2Y] = 0.50 + rng.uniform(-0.02, 0.02)
            s[J1] = s[J2] = 1.0
        elif i == 2:
            lo, hi = cfg.carry_box
            s[BX] = rng.uniform(lo[0], hi[0])
            s[BY] = rng.uniform(lo[1], hi[1])
            # orientation as the pick grasp leaves it (grasped at the peg)
            s[TH] = _twist(cfg, cfg.start_peg[1] + rng.uniform(-0.015, 0.015))
            s[E1X], s[E1Y] = s[BX], s[BY]
            s[J1] = 0.1
            s[A1] = 1.0
            s[E2X] = cfg.arm2_park[0] + rng.uniform(-0.04, 0.04)
            s[E2Y] = cfg.arm2_park[1] + rng.uniform(-0.04, 0.04)
            s[J2] = 1.0
        elif i == 3:
            s[BX] = rng.uniform(*cfg.place_init_xrange)
            s[BY] = rng.uniform(*cfg.place_init_yrange)
            s[TH] = _twist(cfg, s[BY])
            s[E2X], s[E2Y] = s[BX], s[BY]
            s[J2] = 0.1
            s[A2] = 1.0
            # arm 1 parked just off the block, as right after letting go
            for _ in range(64):
                ang = rng.uniform(-np.pi, np.pi)
                r = rng.uniform(0.04, 0.09)
                ex = s[BX] + r * np.cos(ang)
                ey = s[BY] + r * np.sin(ang)
                ex = np.clip(ex, cfg.arm1_xrange[0], cfg.arm1_xrange[1])
                ey = np.clip(ey, cfg.yrange[0], cfg.yrange[1])
                if np.hypot(ex - s[E2X], ey - s[E2Y]) >= cfg.min_arm_gap:
                    break
            s[E1X], s[E1Y] = ex, ey
            s[J1] = 1.0
        else:
            raise ValueError(f"subtask {i} out of range")
        return s

    def _sample_initial(self, rng):
        return self.spec.subtasks[0].initiation_sampler(rng)

    # -- dynamics ----------------------------------------------------------

    def _transition(self, state, action):
        cfg = self.cfg
        s = state.copy()
        held_by = 1 if s[A1] == 1.0 else (2 if s[A2] == 1.0 else 0)

        sp1 = cfg.speed_loaded if held_by == 1 else cfg.speed_free
        sp2 = cfg.speed_loaded if held_by == 2 else cfg.speed_free
        e1 = s[[E1X, E1Y]] + action[0:2] * sp1
        e2 = s[[E2X, E2Y]] + action[3:5] * sp2
        e1[0] = np.clip(e1[0], cfg.arm1_xrange[0], cfg.arm1_xrange[1])
        e2[0] = np.clip(e2[0], cfg.arm2_xrange[0], cfg.arm2_xrange[1])
        e1[1] = np.clip(e1[1], cfg.yrange[0], cfg.yrange[1])
        e2[1] = np.clip(e2[1], cfg.yrange[0], cfg.yrange[1])

        # arm 2 yields if the arms would collide
        gap = e2 - e1
        dist = np.hypot(gap[0], gap[1])
        if dist < cfg.min_arm_gap:
            if dist < 1e-12:
                gap = np.array([1.0, 0.0])
                dist = 1.0
            e2_fixed = e1 + gap / dist * cfg.min_arm_gap
            e2_fixed[0] = np.clip(e2_fixed[0], cfg.arm2_xrange[0], cfg.arm2_xrange[1])
            e2_fixed[1] = np.clip(e2_fixed[1], cfg.yrange[0], cfg.yrange[1])
            if np.hypot(*(e2_fixed - e1)) >= cfg.min_arm_gap - 1e-12:
                e2 = e2_fixed
            else:
                e2 = s[[E2X, E2Y]]

        s[E1X], s[E1Y] = e1
        s[E2X], s[E2Y] = e2
        if held_by == 1:
            s[BX], s[BY] = e1
        elif held_by == 2:
            s[BX], s[BY] = e2

        s[J1] = np.clip(s[J1] + action[2] * cfg.jaw_rate, 0.0, 1.0)
        s[J2] = np.clip(s[J2] + action[5] * cfg.jaw_rate, 0.0, 1.0)

        # release before grasp so a re-grasp in one step is impossible
        if held_by == 1 and s[J1] >= cfg.release_open:
            s[A1] = 0.0
            held_by = 0
        elif held_by == 2 and s[J2] >= cfg.release_open:
            s[A2] = 0.0
            held_by = 0

        # grasp / hand-over, arm 1 first; any attach re-seats the block
        block = s[[BX, BY]]
        for arm, (ex, ey, jaw, att) in ((1, (E1X, E1Y, J1, A1)),
                                        (2, (E2X, E2Y, J2, A2))):
            if held_by == arm:
                continue
            if s[jaw] > cfg.grasp_close:
                continue
            if np.hypot(s[ex] - block[0], s[ey] - block[1]) > cfg.grasp_radius:
                continue
            if held_by != 0:
                # hand-over: the holding arm lets go atomically
                other_att = A1 if held_by == 1 else A2
                other_jaw = J1 if held_by == 1 else J2
                s[other_att] = 0.0
                s[other_jaw] = 1.0
            s[att] = 1.0
            # orientation is set by the grasp height, before the snap
            s[TH] = _twist(cfg, s[BY])
            s[BX], s[BY] = s[ex], s[ey]
            held_by = arm
            break
        return s

    # -- metrics hook ------------------------------------------------------

    def completed_subtasks(self, states):
        """Milestone count: picked up, handed over, task done."""
        got1 = any(st[A1] == 1.0 for st in states)
        got2 = any(st[A2] == 1.0 for st in states)
        done = any(self._task_reward(st, self.goal) for st in states)
        if done:
            return 3
        if got2:
            return 2
        if got1:
            return 1
        return 0


def make_planar_transfer(config: PlanarConfig | None = None):
    cfg = config if config is not None else PlanarConfig()
    return PlanarTransferEnv(cfg)
