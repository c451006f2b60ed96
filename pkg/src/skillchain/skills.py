"""Training and rollout of the subgoal-conditioned subtask policies.

Each subtask gets its own SAC agent trained from its initiation set with
uniformly drawn subgoals, hindsight relabeling, and the demonstration pull.
Trained skills are frozen; the chaining stage never mutates them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorlite as tl
from .rl import EpisodeTrajectory, ReplayBuffer, SacAgent, SacConfig, her_relabel


@dataclass
class SkillTrainConfig:
    total_steps: int = 300_000
    warmup_steps: int = 1_500
    update_every: int = 2
    batch_size: int = 128
    her_k: int = 4
    buffer_capacity: int = 1_000_000
    bc_pretrain_steps: int = 6_000
    actor_delay_updates: int = 1_000   # critic-only updates first
    demo_batch_size: int = 128
    eval_episodes: int = 100
    eval_interval: int = 4_000
    eval_probe_episodes: int = 50
    success_gate: float = 0.9
    sac: SacConfig = field(default_factory=SacConfig)


@dataclass
class SkillRolloutResult:
    trajectory: EpisodeTrajectory
    success: int
    terminal_state: np.ndarray
    subtask_return: int
    steps: int


class SkillPolicy:
    """A frozen subtask policy wrapping a trained SAC actor."""

    def __init__(self, subtask, agent: SacAgent, success_rate=0.0,
                 converged=False):
        self.subtask = subtask
        self.agent = agent
        self.success_rate = success_rate
        self.converged = converged
        self.frozen = True

    def act(self, state, subgoal, rng=None, deterministic=True):
        return self.agent.act(state, subgoal, rng=rng,
                              deterministic=deterministic)

    def checksum(self):
        return self.agent.actor.checksum()

    def save(self, path):
        tl.save_params(path, self.agent.checkpoint_sections())

    @classmethod
    def load(cls, path, subtask, state_dim, subgoal_dim, action_dim,
             sac_cfg: SacConfig, success_rate=0.0, converged=True):
        agent = SacAgent(state_dim, subgoal_dim, action_dim, sac_cfg,
                         np.random.default_rng(0))
        agent.load_sections(tl.load_params(path))
        return cls(subtask, agent, success_rate=success_rate,
                   converged=converged)


class OracleSkill:
    """Pass-through skill for environments whose low-level execution is
    built in (one abstract step per subtask): the action simply encodes
    the instructed target."""

    def __init__(self, subtask):
        self.subtask = subtask
        self.frozen = True
        self.converged = True
        self.success_rate = 1.0

    def act(self, state, subgoal, rng=None, deterministic=True):
        return 2.0 * np.asarray(subgoal, dtype=np.float64) - 1.0

    def checksum(self):
        return "oracle"


def rollout_subtask(policy, env, i, start_state, subgoal, rng,
                    deterministic=True):
    """Run skill i from the env's current state until subtask success,
    the subtask horizon, or episode end. Returns the boundary bookkeeping
    the chaining stage needs."""
    spec = env.spec.subtasks[i - 1]
    subgoal = np.asarray(subgoal, dtype=np.float64)
    if not spec.subgoal_space.contains(subgoal, atol=1e-6):
        raise ValueError(f"subgoal outside the subtask-{i} box")
    if not np.array_equal(np.asarray(start_state), env.state):
        raise ValueError("start_state does not match the env state")
    zero = np.zeros(env.action_dim)
    states = [env.state.copy()]
    actions, rewards = [], []
    achieved = [spec.achieved_subgoal(env.state)]
    success = int(env.subtask_reward(i, env.state, zero, subgoal))
    steps = 0
    while not success and steps < spec.horizon and not env.done:
        a = policy.act(env.state, subgoal, rng=rng,
                       deterministic=deterministic)
        s, _, done = env.step(a)
        steps += 1
        r = env.subtask_reward(i, s, a, subgoal)
        states.append(s.copy())
        actions.append(np.asarray(a, dtype=np.float64))
        rewards.append(float(r))
        achieved.append(spec.achieved_subgoal(s))
        if r == 1:
            success = 1
            break
        if done:
            break
    traj = EpisodeTrajectory(
        subtask=i,
        states=np.stack(states),
        actions=(np.stack(actions) if actions
                 else np.zeros((0, env.action_dim))),
        rewards=np.asarray(rewards, dtype=np.float64),
        subgoal=subgoal,
        achieved=np.stack(achieved),
    )
    return SkillRolloutResult(
        trajectory=traj, success=success, terminal_state=env.state.copy(),
        subtask_return=success, steps=steps)


def _demo_arrays(demos):
    ss, gg, aa = [], [], []
    for d in demos:
        ss.append(d.states[:-1])
        aa.append(d.actions)
        gg.append(d.subgoals[:-1])
    return np.vstack(ss), np.vstack(gg), np.vstack(aa)


def _push_demo_episodes(env, i, demos, buffer, her_k, rng):
    spec = env.spec.subtasks[i - 1]
    for d in demos:
        if len(d) == 0:
            continue
        rewards = np.array([
            spec.reward(d.states[t + 1], d.actions[t], d.subgoal)
            for t in range(len(d))], dtype=np.float64)
        achieved = np.stack([spec.achieved_subgoal(s) for s in d.states])
        ep = EpisodeTrajectory(subtask=i, states=d.states, actions=d.actions,
                               rewards=rewards, subgoal=d.subgoal,
                               achieved=achieved)
        buffer.add_batch(*her_relabel(ep, her_k, rng, spec.reward))


def evaluate_skill(policy, env, i, n_episodes, rng, deterministic=True):
    """Success rate on held-out (initiation state, random subgoal) pairs."""
    wins = 0
    for _ in range(n_episodes):
        env.subtask_reset(i, rng)
        if i == env.spec.K:
            subgoal = env.spec.goal_to_final_subgoal(env.goal)
        else:
            subgoal = env.spec.subtasks[i - 1].subgoal_space.sample(rng)
        res = rollout_subtask(policy, env, i, env.state, subgoal, rng,
                              deterministic=deterministic)
        wins += res.success
    return wins / n_episodes


def train_subtask_policy(env, i, demos, config: SkillTrainConfig, rng,
                         progress=None):
    """Train skill i with demo-regularized SAC + hindsight relabeling.

    Returns a frozen SkillPolicy; its converged flag reports whether the
    success gate was reached (an explicit failure signal, never silent).
    """
    spec = env.spec.subtasks[i - 1]
    agent = SacAgent(env.state_dim, env.subgoal_dim, env.action_dim,
                     config.sac, np.random.default_rng(rng.integers(2**63)))
    buffer = ReplayBuffer(config.buffer_capacity, env.state_dim,
                          env.action_dim, env.subgoal_dim)
    demo_s, demo_g, demo_a = (None, None, None)
    if demos:
        demo_s, demo_g, demo_a = _demo_arrays(demos)
        _push_demo_episodes(env, i, demos, buffer, config.her_k, rng)
        for _ in range(config.bc_pretrain_steps):
            idx = rng.integers(0, len(demo_s), size=config.demo_batch_size)
            agent.bc_update(demo_s[idx], demo_g[idx], demo_a[idx])

    env_steps = 0
    since_update = 0
    total_updates = 0
    next_eval = config.eval_interval
    best_rate = -1.0
    best_params = None
    eval_rng_seed = int(rng.integers(2**63))

    def probe():
        nonlocal best_rate, best_params
        rate = evaluate_skill(SkillPolicy(i, agent), env, i,
                              config.eval_probe_episodes,
                              np.random.default_rng(eval_rng_seed))
        if rate > best_rate:
            best_rate = rate
            best_params = agent.actor.param_vector()
        return rate

    while env_steps < config.total_steps:
        env.subtask_reset(i, rng)
        subgoal = spec.subgoal_space.sample(rng)
        warm = env_steps < config.warmup_steps

        states = [env.state.copy()]
        actions, rewards = [], []
        achieved = [spec.achieved_subgoal(env.state)]
        for _ in range(spec.horizon):
            if warm:
                a = rng.uniform(-1.0, 1.0, env.action_dim)
            else:
                a = agent.act(env.state, subgoal, rng=rng,
                              deterministic=False)
            s, _, done = env.step(a)
            env_steps += 1
            since_update += 1
            r = env.subtask_reward(i, s, a, subgoal)
            states.append(s.copy())
            actions.append(np.asarray(a, dtype=np.float64))
            rewards.append(float(r))
            achieved.append(spec.achieved_subgoal(s))
            if r == 1 or done:
                break
        ep = EpisodeTrajectory(
            subtask=i, states=np.stack(states), actions=np.stack(actions),
            rewards=np.asarray(rewards), subgoal=subgoal,
            achieved=np.stack(achieved))
        buffer.add_batch(*her_relabel(ep, config.her_k, rng, spec.reward))

        if env_steps >= config.warmup_steps:
            n_updates = since_update // config.update_every
            since_update -= n_updates * config.update_every
            for _ in range(n_updates):
                batch = buffer.sample(config.batch_size, rng)
                total_updates += 1
                if total_updates <= config.actor_delay_updates:
                    agent.critic_update(batch)
                    continue
                demo_batch = None
                if demo_s is not None:
                    idx = rng.integers(0, len(demo_s),
                                       size=config.demo_batch_size)
                    demo_batch = (demo_s[idx], demo_g[idx], demo_a[idx])
                agent.update(batch, demo_batch)
        if env_steps >= next_eval:
            next_eval += config.eval_interval
            probe()
        if progress is not None:
            progress(env_steps)

    # keep the best probed actor, then score it on held-out pairs
    probe()
    if best_params is not None:
        agent.actor.set_param_vector(best_params)
    success = evaluate_skill(
        SkillPolicy(i, agent), env, i, config.eval_episodes, rng)
    return SkillPolicy(i, agent, success_rate=success,
                       converged=success >= config.success_gate)
