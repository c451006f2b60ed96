"""Scripted waypoint controllers and demonstration collection / storage.

Demo files are a flat binary record stream with a self-describing header
(magic "CSKD"), little-endian float32 throughout, so reloads are bit-exact
across platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .chainworld import ChainWorldEnv
from .planar import (A1, A2, BX, BY, E1X, E1Y, E2X, E2Y, J1, J2,
                     PlanarTransferEnv)

DEMO_MAGIC = b"CSKD"
DEMO_VERSION = 1

FULL_TASK = 0  # subtask marker for whole-task demonstrations


@dataclass
class Demonstration:
    """One successful trajectory of a subtask (or the whole task).

    states has one more row than actions; subgoals is aligned with states.
    For whole-task demos the subgoal columns carry the episode goal.
    """

    subtask: int
    states: np.ndarray
    actions: np.ndarray
    subgoals: np.ndarray
    success: int = 1

    @property
    def subgoal(self):
        return self.subgoals[0]

    def __len__(self):
        return self.actions.shape[0]


# -- controllers -------------------------------------------------------------


def _toward(cur, target, speed):
    return np.clip((np.asarray(target) - np.asarray(cur)) / speed, -1.0, 1.0)


def _jaw(cur, target, rate):
    return float(np.clip((target - cur) / rate, -1.0, 1.0))


def _planar_controller(env: PlanarTransferEnv, i, state, subgoal):
    cfg = env.cfg
    a = np.zeros(6)
    e1 = state[[E1X, E1Y]]
    e2 = state[[E2X, E2Y]]
    block = state[[BX, BY]]
    target = np.asarray(subgoal[:2])
    held1 = state[A1] == 1.0
    held2 = state[A2] == 1.0
    home1 = np.array([0.25, 0.50])

    def approach_and_grasp(arm):
        # drive at the block, close the jaw once inside the grasp ball
        ee = e1 if arm == 1 else e2
        jaw = state[J1] if arm == 1 else state[J2]
        sl = slice(0, 2) if arm == 1 else slice(3, 5)
        ji = 2 if arm == 1 else 5
        a[sl] = _toward(ee, block, cfg.speed_free)
        close = np.hypot(*(ee - block)) <= cfg.grasp_radius * 0.8
        a[ji] = _jaw(jaw, 0.0 if close else 1.0, cfg.jaw_rate)

    if i == 1:
        a[3:5] = _toward(e2, cfg.arm2_park, cfg.speed_free)
        a[5] = _jaw(state[J2], 1.0, cfg.jaw_rate)
        if held1:
            a[0:2] = _toward(e1, target, cfg.speed_loaded)
            a[2] = _jaw(state[J1], 0.0, cfg.jaw_rate)
        else:
            approach_and_grasp(1)
    elif i == 2:
        if held2:
            a[3:5] = _toward(e2, target, cfg.speed_loaded)
            a[5] = _jaw(state[J2], 0.0, cfg.jaw_rate)
            a[0:2] = _toward(e1, home1, cfg.speed_free)
            a[2] = _jaw(state[J1], 1.0, cfg.jaw_rate)
        elif held1:
            # bring the block into reach of arm 2 if it is too far left
            handoff_x = cfg.arm2_xrange[0] + 0.06
            if block[0] < cfg.arm2_xrange[0] + cfg.grasp_radius:
                a[0:2] = _toward(e1, (handoff_x, block[1]), cfg.speed_loaded)
            a[2] = _jaw(state[J1], 0.0, cfg.jaw_rate)
            gap = e2 - block
            d = np.hypot(*gap)
            u = gap / d if d > 1e-9 else np.array([1.0, 0.0])
            standoff = block + u * (cfg.min_arm_gap + 0.01)
            a[3:5] = _toward(e2, standoff, cfg.speed_free)
            within = d <= cfg.grasp_radius * 0.96
            a[5] = _jaw(state[J2], 0.0 if within else 1.0, cfg.jaw_rate)
        else:
            a[0:2] = _toward(e1, home1, cfg.speed_free)
            a[2] = _jaw(state[J1], 1.0, cfg.jaw_rate)
            approach_and_grasp(2)
    elif i == 3:
        a[0:2] = _toward(e1, home1, cfg.speed_free)
        a[2] = _jaw(state[J1], 1.0, cfg.jaw_rate)
        if held2:
            a[3:5] = _toward(e2, target, cfg.speed_loaded)
            a[5] = _jaw(state[J2], 0.0, cfg.jaw_rate)
        else:
            approach_and_grasp(2)
    else:
        raise ValueError(f"subtask {i} out of range")
    return a


def scripted_controller(env, i, state, subgoal):
    """Proportional waypoint controller for demonstration collection."""
    if isinstance(env, PlanarTransferEnv):
        return _planar_controller(env, i, state, subgoal)
    if isinstance(env, ChainWorldEnv):
        return np.array([2.0 * float(subgoal[0]) - 1.0])
    raise TypeError(f"no scripted controller for {type(env).__name__}")


# -- collection --------------------------------------------------------------


def _run_subtask_episode(env, i, state, subgoal, policy_fn):
    spec = env.spec.subtasks[i - 1]
    states = [state.copy()]
    actions = []
    success = 0
    if env.subtask_reward(i, state, np.zeros(env.action_dim), subgoal) == 1:
        return (np.stack(states), np.zeros((0, env.action_dim)), 1, state)
    for _ in range(spec.horizon):
        a = policy_fn(env, i, state, subgoal)
        state, _, done = env.step(a)
        states.append(state.copy())
        actions.append(np.asarray(a, dtype=np.float64))
        if env.subtask_reward(i, state, a, subgoal) == 1:
            success = 1
            break
        if done:
            break
    return np.stack(states), np.stack(actions) if actions else np.zeros(
        (0, env.action_dim)), success, state


def collect_demonstrations(env, i, n_episodes, rng):
    """Exactly n_episodes successful scripted demos for subtask i.

    Failed attempts are resampled. Aborts with a diagnostic if the
    controller succeeds on fewer than half its attempts, which means the
    task geometry is misconfigured.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    demos = []
    attempts = 0
    while len(demos) < n_episodes:
        start = env.subtask_reset(i, rng)
        if i == env.spec.K:
            # the final subtask is always instructed with the task goal
            subgoal = env.spec.goal_to_final_subgoal(env.goal)
        else:
            subgoal = env.spec.subtasks[i - 1].subgoal_space.sample(rng)
        states, actions, success, _ = _run_subtask_episode(
            env, i, start, subgoal, scripted_controller)
        attempts += 1
        if success:
            sg = np.tile(subgoal, (states.shape[0], 1))
            demos.append(Demonstration(subtask=i, states=states,
                                       actions=actions, subgoals=sg))
        if attempts >= 20 and len(demos) / attempts < 0.5:
            raise RuntimeError(
                f"scripted controller succeeds on {len(demos)}/{attempts} "
                f"attempts for subtask {i}; task misconfigured")
    return demos


def collect_full_task_demos(env, n_episodes, rng):
    """Whole-task demos: scripted subtask executions chained with uniformly
    drawn intermediate subgoals, keeping only episodes that end in task
    success. Subgoal columns carry the episode goal."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    demos = []
    attempts = 0
    K = env.spec.K
    while len(demos) < n_episodes:
        state, goal = env.reset(rng)
        attempts += 1
        all_states = [state.copy()]
        all_actions = []
        for i in range(1, K + 1):
            if i < K:
                subgoal = env.spec.subtasks[i - 1].subgoal_space.sample(rng)
            else:
                subgoal = env.spec.goal_to_final_subgoal(goal)
            states, actions, success, state = _run_subtask_episode(
                env, i, state, subgoal, scripted_controller)
            all_states.extend(list(states[1:]))
            all_actions.extend(list(actions))
            if not success:
                break
        if env.task_reward(state, goal) == 1 and all_actions:
            st = np.stack(all_states)
            demos.append(Demonstration(
                subtask=FULL_TASK, states=st, actions=np.stack(all_actions),
                subgoals=np.tile(goal, (st.shape[0], 1))))
        if attempts >= 50 and len(demos) / attempts < 0.02:
            raise RuntimeError("full-task demo collection is not succeeding")
    return demos


# -- binary storage ----------------------------------------------------------


def save_demos(path, demos):
    if not demos:
        raise ValueError("no demonstrations to save")
    subtask = demos[0].subtask
    sd = demos[0].states.shape[1]
    ad = demos[0].actions.shape[1]
    gd = demos[0].subgoals.shape[1]
    for d in demos:
        if (d.subtask != subtask or d.states.shape[1] != sd
                or d.actions.shape[1] != ad or d.subgoals.shape[1] != gd):
            raise ValueError("mixed demo shapes in one file")
    with open(path, "wb") as f:
        f.write(DEMO_MAGIC)
        f.write(struct.pack("<HHHHHI", DEMO_VERSION, subtask, sd, ad, gd,
                            len(demos)))
        for d in demos:
            n_records = d.states.shape[0]
            f.write(struct.pack("<I", n_records))
            actions = np.vstack([d.actions, np.zeros((1, ad))])
            rec = np.hstack([d.states, actions, d.subgoals])
            f.write(rec.astype("<f4").tobytes())


def load_demos(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DEMO_MAGIC:
            raise ValueError(f"bad demo magic {magic!r}")
        version, subtask, sd, ad, gd, count = struct.unpack(
            "<HHHHHI", f.read(14))
        if version != DEMO_VERSION:
            raise ValueError(f"unsupported demo version {version}")
        demos = []
        row = sd + ad + gd
        for _ in range(count):
            (n_records,) = struct.unpack("<I", f.read(4))
            data = np.frombuffer(f.read(4 * row * n_records), dtype="<f4")
            rec = data.astype(np.float64).reshape(n_records, row)
            demos.append(Demonstration(
                subtask=subtask,
                states=rec[:, :sd],
                actions=rec[:-1, sd:sd + ad],
                subgoals=rec[:, sd + ad:],
            ))
    return demos
