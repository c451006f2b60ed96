"""Comparison methods sharing the chaining substrate: per-boundary
discriminators (set-membership value rules), goal-conditioned behavior
cloning, and a flat demonstration-guided agent without task decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorlite as tl
from .rl import EpisodeTrajectory, ReplayBuffer, SacAgent, SacConfig, her_relabel
from .skills import rollout_subtask


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class Discriminator:
    """Logistic membership score for one subtask boundary: does a state
    look like an initiation state of the next subtask."""

    def __init__(self, state_dim, hidden=32, n_layers=3, lr=1e-3, rng=None):
        self.net = tl.MlpNet(state_dim, 1, hidden=hidden, n_layers=n_layers,
                             rng=rng)
        self.opt = tl.AdamState.for_params(self.net.params, lr=lr)

    def score(self, states):
        z = self.net.forward(np.atleast_2d(states))[:, 0]
        return _sigmoid(z)

    def score_one(self, state):
        return float(self.score(np.atleast_2d(state))[0])

    def train_step(self, states, labels):
        z, cache = self.net.forward_cache(states)
        p = _sigmoid(z[:, 0])
        n = len(labels)
        # binary cross-entropy; d/dz = (p - label) / n
        eps = 1e-12
        loss = -float(np.mean(labels * np.log(p + eps)
                              + (1 - labels) * np.log(1 - p + eps)))
        grads, _ = self.net.backward(cache, ((p - labels) / n)[:, None])
        tl.adam_step(self.opt, self.net.params, grads)
        return loss


def collect_boundary_terminals(env, skills, i, n, rng):
    """Terminal states of successful skill-i executions under uniformly
    drawn subgoals: the raw material the membership scores discriminate."""
    out = []
    while len(out) < n:
        env.subtask_reset(i, rng)
        if i == env.spec.K:
            subgoal = env.spec.goal_to_final_subgoal(env.goal)
        else:
            subgoal = env.spec.subtasks[i - 1].subgoal_space.sample(rng)
        res = rollout_subtask(skills[i - 1], env, i, env.state, subgoal, rng,
                              deterministic=True)
        if res.success:
            out.append(res.terminal_state)
    return np.stack(out)


@dataclass
class DiscriminatorConfig:
    n_per_class: int = 2_000
    steps: int = 10_000
    batch_size: int = 128
    hidden: int = 32
    n_layers: int = 3
    lr: float = 1e-3


def train_discriminators(env, skills, cfg: DiscriminatorConfig, rng):
    """One discriminator per boundary i -> i+1, label 1 for initiation-law
    samples of subtask i+1, label 0 for skill-i terminal states."""
    discs = []
    for i in range(1, env.spec.K):
        pos = np.stack([env.sample_initiation_law(i + 1, rng)
                        for _ in range(cfg.n_per_class)])
        neg = collect_boundary_terminals(env, skills, i, cfg.n_per_class, rng)
        X = np.vstack([pos, neg])
        y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        d = Discriminator(env.state_dim, hidden=cfg.hidden,
                          n_layers=cfg.n_layers, lr=cfg.lr,
                          rng=np.random.default_rng(rng.integers(2**63)))
        for _ in range(cfg.steps):
            idx = rng.integers(0, len(X), size=cfg.batch_size)
            d.train_step(X[idx], y[idx])
        discs.append(d)
    return discs


# -- ablation value rules (thin functional surfaces) --------------------------


def value_dm(discriminators, boundary_state, i):
    """Next-boundary membership score only."""
    return discriminators[i - 1].score_one(boundary_state)


def value_ldm(discriminators, rollout_states, i):
    """Product of membership scores over the remaining boundaries of a
    realized rollout; a missing boundary contributes zero."""
    K = len(rollout_states)  # boundary states s^{i+1}..s^{K} expected slots
    prod = 1.0
    for j, s in enumerate(rollout_states, start=i):
        if s is None:
            return 0.0
        if j >= len(discriminators) + 1:
            break
        prod *= discriminators[j - 1].score_one(s)
    return prod


def value_sr(own_success, next_success):
    """Short-horizon rule: realized success of the own and next subtask."""
    return float(own_success + next_success)


# -- goal-conditioned behavior cloning ----------------------------------------


@dataclass
class GcbcConfig:
    steps: int = 8_000
    batch_size: int = 128
    hidden: int = 64
    n_layers: int = 3
    lr: float = 1e-3
    relabel_prob: float = 0.5


class GcbcPolicy:
    def __init__(self, state_dim, goal_dim, action_dim, hidden, n_layers,
                 lr, rng):
        self.net = tl.MlpNet(state_dim + goal_dim, action_dim, hidden=hidden,
                             n_layers=n_layers, rng=rng)
        self.opt = tl.AdamState.for_params(self.net.params, lr=lr)

    def act(self, state, goal, rng=None, deterministic=True):
        x = np.concatenate([np.asarray(state), np.asarray(goal)])
        return np.tanh(self.net.forward(x)[0])

    def train_step(self, states, goals, actions):
        x = np.hstack([states, goals])
        out, cache = self.net.forward_cache(x)
        target = tl.atanh_clipped(actions)
        diff = out - target
        loss = float(np.mean(np.sum(diff * diff, axis=1)))
        grads, _ = self.net.backward(cache, 2.0 * diff / len(states))
        tl.adam_step(self.opt, self.net.params, grads)
        return loss


def train_gcbc(env, demos, cfg: GcbcConfig, rng):
    """Supervised goal-conditioned cloning of whole-task demos with
    hindsight goal relabeling. Returns (policy, loss_history)."""
    if not demos:
        raise ValueError("no demonstrations")
    states, goals, actions, ends = [], [], [], []
    for d in demos:
        T = len(d)
        states.append(d.states[:-1])
        actions.append(d.actions)
        goals.append(d.subgoals[:-1])
        ends.append(np.stack([env.achieved_goal(s) for s in d.states]))
    pol = GcbcPolicy(env.state_dim, env.goal_dim, env.action_dim,
                     cfg.hidden, cfg.n_layers, cfg.lr,
                     np.random.default_rng(rng.integers(2**63)))
    # flatten with per-demo index so relabeling can pick future achievements
    demo_id = np.concatenate([np.full(len(a), j)
                              for j, a in enumerate(actions)])
    step_id = np.concatenate([np.arange(len(a)) for a in actions])
    S = np.vstack(states)
    G = np.vstack(goals)
    A = np.vstack(actions)
    history = []
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(S), size=cfg.batch_size)
        g = G[idx].copy()
        relabel = rng.uniform(size=len(idx)) < cfg.relabel_prob
        for row in np.where(relabel)[0]:
            j = demo_id[idx[row]]
            t = step_id[idx[row]]
            future = rng.integers(t + 1, len(ends[j]))
            g[row] = ends[j][future]
        history.append(pol.train_step(S[idx], g, A[idx]))
    return pol, history


# -- flat demonstration-guided agent ------------------------------------------


@dataclass
class FlatConfig:
    total_steps: int = 30_000
    warmup_steps: int = 1_500
    update_every: int = 2
    batch_size: int = 128
    her_k: int = 4
    buffer_capacity: int = 500_000
    bc_pretrain_steps: int = 4_000
    demo_batch_size: int = 128
    sac: SacConfig = field(default_factory=lambda: SacConfig(
        hidden=64, n_layers=3, lr=1e-3, demo_coef=2.0, init_temperature=0.05))


def train_flat(env, demos, cfg: FlatConfig, rng):
    """One policy for the whole horizon, no decomposition: SAC over the
    task goal with hindsight relabeling and the demo pull."""
    agent = SacAgent(env.state_dim, env.goal_dim, env.action_dim, cfg.sac,
                     np.random.default_rng(rng.integers(2**63)))
    buffer = ReplayBuffer(cfg.buffer_capacity, env.state_dim, env.action_dim,
                          env.goal_dim)

    def task_reward_fn(state, action, goal):
        return env.task_reward(state, goal)

    demo_s = demo_g = demo_a = None
    if demos:
        demo_s = np.vstack([d.states[:-1] for d in demos])
        demo_g = np.vstack([d.subgoals[:-1] for d in demos])
        demo_a = np.vstack([d.actions for d in demos])
        for d in demos:
            rewards = np.array([env.task_reward(d.states[t + 1], d.subgoal)
                                for t in range(len(d))], dtype=np.float64)
            achieved = np.stack([env.achieved_goal(s) for s in d.states])
            ep = EpisodeTrajectory(subtask=0, states=d.states,
                                   actions=d.actions, rewards=rewards,
                                   subgoal=d.subgoal, achieved=achieved)
            buffer.add_batch(*her_relabel(ep, cfg.her_k, rng, task_reward_fn))
        for _ in range(cfg.bc_pretrain_steps):
            idx = rng.integers(0, len(demo_s), size=cfg.demo_batch_size)
            agent.bc_update(demo_s[idx], demo_g[idx], demo_a[idx])

    env_steps = 0
    since = 0
    while env_steps < cfg.total_steps:
        state, goal = env.reset(rng)
        warm = env_steps < cfg.warmup_steps
        states = [state.copy()]
        actions, rewards = [], []
        achieved = [env.achieved_goal(state)]
        done = False
        while not done:
            if warm:
                a = rng.uniform(-1.0, 1.0, env.action_dim)
            else:
                a = agent.act(env.state, goal, rng=rng, deterministic=False)
            s, r, done = env.step(a)
            env_steps += 1
            since += 1
            states.append(s.copy())
            actions.append(np.asarray(a, dtype=np.float64))
            rewards.append(float(r))
            achieved.append(env.achieved_goal(s))
        ep = EpisodeTrajectory(subtask=0, states=np.stack(states),
                               actions=np.stack(actions),
                               rewards=np.asarray(rewards), subgoal=goal,
                               achieved=np.stack(achieved))
        buffer.add_batch(*her_relabel(ep, cfg.her_k, rng, task_reward_fn))
        if env_steps >= cfg.warmup_steps:
            n = since // cfg.update_every
            since -= n * cfg.update_every
            for _ in range(n):
                batch = buffer.sample(cfg.batch_size, rng)
                demo_batch = None
                if demo_s is not None:
                    idx = rng.integers(0, len(demo_s),
                                       size=cfg.demo_batch_size)
                    demo_batch = (demo_s[idx], demo_g[idx], demo_a[idx])
                agent.update(batch, demo_batch)
    return agent
