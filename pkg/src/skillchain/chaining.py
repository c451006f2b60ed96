"""Chaining policy and critic: pick each skill's subgoal so the whole task
succeeds.

The chaining MDP is undiscounted and K steps long. Decisions happen at
boundary states (where one skill ends and the next starts); the critic
regresses the probability that the episode ends in task success. Reward is
terminal-only, so targets are Monte-Carlo at the last two boundaries (the
realized episode reward stands in for the final boundary's value) and
bootstrapped through EMA target critics before that. The actor is SAC plus
a self-imitation term that raises the likelihood of subgoals from fully
successful episodes in proportion to their positive advantage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorlite as tl
from .skills import rollout_subtask

VALUE_RULES = ("task", "sr", "dm", "ldm")


@dataclass
class BoundaryTransition:
    """Experience of one chaining decision."""

    subtask: int
    state: np.ndarray
    subgoal: np.ndarray          # env-space subgoal handed to the skill
    subgoal_u: np.ndarray        # the same subgoal in normalized net space
    subtask_return: int          # did skill i reach its subgoal
    next_state: np.ndarray | None
    task_reward: int = 0
    next_subtask_return: int = 0

    def __post_init__(self):
        if self.subtask_return == 0 and self.next_state is not None:
            raise ValueError("failed subtask cannot have a successor")


def _one_hot(i, K):
    v = np.zeros(K)
    v[i - 1] = 1.0
    return v


class ChainPolicy:
    """Squashed-Gaussian subgoal policy over (boundary state, subtask)."""

    def __init__(self, state_dim, K, subgoal_boxes, hidden=64, n_layers=3,
                 rng=None):
        self.state_dim = state_dim
        self.K = K
        self.boxes = list(subgoal_boxes)
        self.dg = self.boxes[0].dim
        self.net = tl.MlpNet(state_dim + K, self.dg, hidden=hidden,
                             n_layers=n_layers, head="gaussian", rng=rng)

    def features(self, state, i):
        return np.concatenate([np.asarray(state, dtype=np.float64),
                               _one_hot(i, self.K)])

    def to_env(self, u, i):
        box = self.boxes[i - 1]
        return box.lo + (np.asarray(u) + 1.0) / 2.0 * (box.hi - box.lo)

    def to_u(self, subgoal, i):
        box = self.boxes[i - 1]
        u = 2.0 * (np.asarray(subgoal) - box.lo) / (box.hi - box.lo) - 1.0
        return np.clip(u, -1.0, 1.0)

    def sample(self, state, i, rng):
        mu, ls = self.net.forward(self.features(state, i))
        s = tl.sample_squashed(mu, ls, rng)
        u = s.action[0]
        return self.to_env(u, i), u

    def mean_subgoal(self, state, i):
        mu, _ = self.net.forward(self.features(state, i))
        u = tl.squash_mean(mu)[0]
        return self.to_env(u, i), u

    def checksum(self):
        return self.net.checksum()


class UniformChainPolicy:
    """The no-chaining control condition: subgoals drawn uniformly from
    each subtask's box."""

    def __init__(self, subgoal_boxes):
        self.boxes = list(subgoal_boxes)

    def sample(self, state, i, rng):
        box = self.boxes[i - 1]
        g = box.sample(rng)
        u = 2.0 * (g - box.lo) / (box.hi - box.lo) - 1.0
        return g, u

    def mean_subgoal(self, state, i):
        box = self.boxes[i - 1]
        g = (box.lo + box.hi) / 2.0
        return g, np.zeros(box.dim)


class ChainCritic:
    """Twin Q networks over (boundary state, subtask one-hot, subgoal)."""

    def __init__(self, state_dim, K, dg, hidden=64, n_layers=3, lr=1e-3,
                 tau=5e-3, rng=None):
        in_dim = state_dim + K + dg
        self.K = K
        self.state_dim = state_dim
        self.dg = dg
        self.tau = tau
        self.q1 = tl.MlpNet(in_dim, 1, hidden=hidden, n_layers=n_layers,
                            rng=rng)
        self.q2 = tl.MlpNet(in_dim, 1, hidden=hidden, n_layers=n_layers,
                            rng=rng)
        self.t1 = self.q1.copy()
        self.t2 = self.q2.copy()
        self.opt1 = tl.AdamState.for_params(self.q1.params, lr=lr)
        self.opt2 = tl.AdamState.for_params(self.q2.params, lr=lr)

    def _inputs(self, states, idxs, us):
        oh = np.zeros((len(idxs), self.K))
        oh[np.arange(len(idxs)), np.asarray(idxs, dtype=int) - 1] = 1.0
        return np.hstack([np.atleast_2d(states), oh, np.atleast_2d(us)])

    def q_min(self, states, idxs, us, use_targets=False):
        x = self._inputs(states, idxs, us)
        a = (self.t1 if use_targets else self.q1).forward(x)[:, 0]
        b = (self.t2 if use_targets else self.q2).forward(x)[:, 0]
        return np.minimum(a, b)

    def regress(self, states, idxs, us, targets):
        x = self._inputs(states, idxs, us)
        n = len(targets)
        losses = []
        for net, opt in ((self.q1, self.opt1), (self.q2, self.opt2)):
            out, cache = net.forward_cache(x)
            diff = out[:, 0] - targets
            grads, _ = net.backward(cache, (2.0 * diff / n)[:, None])
            tl.adam_step(opt, net.params, grads)
            losses.append(float(np.mean(diff * diff)))
        tl.ema_update(self.t1.params, self.q1.params, self.tau)
        tl.ema_update(self.t2.params, self.q2.params, self.tau)
        loss = 0.5 * sum(losses)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite chain critic loss")
        return loss

    def checksum(self):
        return self.q1.checksum() + self.q2.checksum()


def estimate_value(critic: ChainCritic, policy, state, i, n_samples=8,
                   rng=None):
    """Expected whole-task success probability from a boundary state:
    mean Q over policy subgoal samples, clamped to [0, 1] for reporting."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    us = np.stack([policy.sample(state, i, rng)[1] for _ in range(n_samples)])
    states = np.tile(np.asarray(state), (n_samples, 1))
    idxs = np.full(n_samples, i)
    q = critic.q_min(states, idxs, us)
    return float(np.clip(q.mean(), 0.0, 1.0))


# -- rollout -----------------------------------------------------------------


def chain_rollout(policy, skills, env, rng, deterministic=False,
                  uniform_prob=0.0):
    """One whole-task episode: at each boundary sample a subgoal and run the
    frozen skill; the final subtask is always instructed with the task goal.

    Returns (transitions, task_reward, total_steps, visited_states).
    """
    state, goal = env.reset(rng)
    K = env.spec.K
    transitions = []
    states_log = [state.copy()]
    total_steps = 0
    for i in range(1, K + 1):
        boundary = env.state.copy()
        if i == K:
            g = env.spec.goal_to_final_subgoal(goal)
            u = policy.to_u(g, i) if hasattr(policy, "to_u") else (
                2.0 * (g - policy.boxes[i - 1].lo)
                / (policy.boxes[i - 1].hi - policy.boxes[i - 1].lo) - 1.0)
        elif uniform_prob > 0.0 and rng.uniform() < uniform_prob:
            box = env.spec.subtasks[i - 1].subgoal_space
            g = box.sample(rng)
            u = 2.0 * (g - box.lo) / (box.hi - box.lo) - 1.0
        elif deterministic:
            g, u = policy.mean_subgoal(boundary, i)
        else:
            g, u = policy.sample(boundary, i, rng)
        res = rollout_subtask(skills[i - 1], env, i, boundary, g, rng,
                              deterministic=True)
        total_steps += res.steps
        states_log.extend(list(res.trajectory.states[1:]))
        transitions.append(BoundaryTransition(
            subtask=i, state=boundary, subgoal=np.asarray(g),
            subgoal_u=np.asarray(u), subtask_return=res.success,
            next_state=res.terminal_state.copy() if res.success else None))
        if not res.success:
            break
    r_T = int(env.task_reward(env.state, env.goal))
    for t_idx, tr in enumerate(transitions):
        tr.task_reward = r_T
        if t_idx + 1 < len(transitions):
            tr.next_subtask_return = transitions[t_idx + 1].subtask_return
    return transitions, r_T, total_steps, states_log


# -- experience stores --------------------------------------------------------


class BoundaryBuffer:
    """Ring buffer of boundary transitions with precomputed static targets."""

    def __init__(self, capacity, state_dim, dg):
        self.capacity = capacity
        self.size = 0
        self.pos = 0
        self.state = np.zeros((capacity, state_dim))
        self.idx = np.zeros(capacity, dtype=int)
        self.u = np.zeros((capacity, dg))
        self.next_state = np.zeros((capacity, state_dim))
        self.has_next = np.zeros(capacity)
        self.y_static = np.zeros(capacity)
        self.needs_boot = np.zeros(capacity)

    def add(self, state, idx, u, next_state, has_next, y_static, needs_boot):
        j = self.pos
        self.state[j] = state
        self.idx[j] = idx
        self.u[j] = u
        self.next_state[j] = next_state if next_state is not None else 0.0
        self.has_next[j] = has_next
        self.y_static[j] = y_static
        self.needs_boot[j] = needs_boot
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_idx(self, n, rng):
        return rng.integers(0, self.size, size=n)

    def __len__(self):
        return self.size


class SilBuffer(BoundaryBuffer):
    """Boundary transitions drawn only from fully successful episodes.

    Advantage weights are recomputed lazily at sampling time against the
    current critic, so stale stored values never leak in.
    """

    def store_episode(self, transitions, r_T, targets):
        if r_T != 1:
            return 0
        added = 0
        for tr, (y_static, needs_boot) in zip(transitions, targets):
            self.add(tr.state, tr.subtask, tr.subgoal_u, tr.next_state,
                     float(tr.next_state is not None), y_static, needs_boot)
            added += 1
        return added


# -- trainer -------------------------------------------------------------------


@dataclass
class ChainTrainConfig:
    value_rule: str = "task"
    total_episodes: int = 3_000
    warmup_episodes: int = 200        # uniform subgoals to seed the buffers
    uniform_prob: float = 0.4         # exploration mixture after warmup
    uniform_prob_final: float = 0.05  # annealed linearly over training
    updates_per_episode: int = 4
    batch_size: int = 128
    sil_coef: float = 0.1
    sil_batch_size: int = 64
    advantage_form: str = "clip"      # or "exp"
    exp_beta: float = 0.5
    boot_samples: int = 4             # policy samples per bootstrap value
    hidden: int = 64
    n_layers: int = 3
    lr: float = 1e-3
    tau: float = 0.01
    auto_temperature: bool = True
    init_temperature: float = 0.1
    buffer_capacity: int = 200_000
    eval_interval: int = 500          # episodes between eval probes
    eval_episodes: int = 50
    keep_best: bool = True            # restore the best probed actor

    def validate(self):
        if self.value_rule not in VALUE_RULES:
            raise ValueError(f"unknown value rule {self.value_rule!r}")
        if self.advantage_form not in ("clip", "exp"):
            raise ValueError("advantage_form must be 'clip' or 'exp'")
        if self.sil_coef < 0:
            raise ValueError("sil_coef must be >= 0")
        return self


class ChainTrainer:
    """Alternates whole-task rollouts with critic and actor updates.

    value_rule selects the regression target for Q(boundary, subgoal):
      task  whole-task success (terminal reward; Monte-Carlo at the last
            two boundaries, bootstrapped through target nets before that)
      sr    realized success of the own and the next subtask only
      dm    next-boundary membership score from a per-boundary discriminator
      ldm   product of membership scores along the rest of the rollout
    """

    def __init__(self, env, skills, cfg: ChainTrainConfig, rng,
                 discriminators=None):
        cfg.validate()
        if cfg.value_rule in ("dm", "ldm") and discriminators is None:
            raise ValueError(f"value rule {cfg.value_rule!r} needs "
                             "discriminators")
        self.env = env
        self.skills = skills
        self.cfg = cfg
        self.discriminators = discriminators
        self.K = env.spec.K
        boxes = [s.subgoal_space for s in env.spec.subtasks]
        net_rng = np.random.default_rng(rng.integers(2**63))
        self.policy = ChainPolicy(env.state_dim, self.K, boxes,
                                  hidden=cfg.hidden, n_layers=cfg.n_layers,
                                  rng=net_rng)
        self.critic = ChainCritic(env.state_dim, self.K, self.policy.dg,
                                  hidden=cfg.hidden, n_layers=cfg.n_layers,
                                  lr=cfg.lr, tau=cfg.tau, rng=net_rng)
        self.opt_actor = tl.AdamState.for_params(self.policy.net.params,
                                                 lr=cfg.lr)
        self.log_alpha = [(np.array([[np.log(cfg.init_temperature)]]),
                           np.zeros(0))]
        self.opt_alpha = tl.AdamState.for_params(self.log_alpha, lr=cfg.lr)
        self.target_entropy = -float(self.policy.dg)
        self.buffer = BoundaryBuffer(cfg.buffer_capacity, env.state_dim,
                                     self.policy.dg)
        self.sil = SilBuffer(cfg.buffer_capacity, env.state_dim,
                             self.policy.dg)
        self.rng = rng
        self.history = []
        self.episodes_seen = 0
        self.env_steps = 0

    @property
    def temperature(self):
        return float(np.exp(self.log_alpha[0][0][0, 0]))

    # -- targets ------------------------------------------------------------

    def _episode_targets(self, transitions):
        """Per-transition (y_static, needs_bootstrap) under the value rule."""
        K = self.K
        rule = self.cfg.value_rule
        out = []
        if rule == "ldm":
            # suffix products of membership scores over the boundaries that
            # have discriminators (1..K-1); a broken chain zeroes everything
            # upstream. The final subtask's own outcome is set membership
            # territory no discriminator covers, so it stays out of the
            # product.
            scores = []
            for tr in transitions:
                if tr.subtask == K:
                    scores.append(1.0)
                elif tr.next_state is None:
                    scores.append(0.0)
                else:
                    scores.append(float(
                        self.discriminators[tr.subtask - 1].score_one(
                            tr.next_state)))
            suffix = np.ones(len(scores) + 1)
            for j in range(len(scores) - 1, -1, -1):
                suffix[j] = scores[j] * suffix[j + 1]
            out = [(float(suffix[j]), 0.0) for j in range(len(transitions))]
            if transitions[-1].subtask == K:
                out[-1] = (float(transitions[-1].subtask_return), 0.0)
            return out
        for tr in transitions:
            if rule == "task":
                if tr.subtask >= K - 1:
                    # the raw episode reward stands in for the final
                    # boundary's value
                    out.append((float(tr.task_reward), 0.0))
                elif tr.next_state is None:
                    out.append((0.0, 0.0))
                else:
                    out.append((0.0, 1.0))
            elif rule == "sr":
                out.append((float(tr.subtask_return
                                  + tr.next_subtask_return), 0.0))
            elif rule == "dm":
                if tr.subtask == K:
                    out.append((float(tr.subtask_return), 0.0))
                elif tr.next_state is None:
                    out.append((0.0, 0.0))
                else:
                    out.append((float(
                        self.discriminators[tr.subtask - 1].score_one(
                            tr.next_state)), 0.0))
        return out

    def _push_episode(self, transitions, r_T):
        targets = self._episode_targets(transitions)
        for tr, (y_static, needs_boot) in zip(transitions, targets):
            self.buffer.add(tr.state, tr.subtask, tr.subgoal_u, tr.next_state,
                            float(tr.next_state is not None), y_static,
                            needs_boot)
        if self.cfg.value_rule == "task":
            sil_ok = r_T
        else:
            # ablation rules imitate episodes successful under their own
            # notion: every subtask connected, task reward never consulted
            sil_ok = int(len(transitions) == self.K
                         and all(t.subtask_return for t in transitions))
        self.sil.store_episode(transitions, sil_ok, targets)

    def _targets_for(self, buf, rows):
        """Assemble regression targets; bootstrapped entries query the
        target critics at a fresh policy sample (entropy corrected)."""
        y = buf.y_static[rows].copy()
        boot = buf.needs_boot[rows] > 0.0
        if np.any(boot):
            bs = buf.next_state[rows][boot]
            bi = buf.idx[rows][boot] + 1
            alpha = self.temperature
            m = len(bs)
            oh = np.zeros((m, self.K))
            oh[np.arange(m), bi.astype(int) - 1] = 1.0
            mu, ls = self.policy.net.forward(np.hstack([bs, oh]))
            v = np.zeros(m)
            for _ in range(self.cfg.boot_samples):
                s = tl.sample_squashed(mu, ls, self.rng)
                v += (self.critic.q_min(bs, bi, s.action, use_targets=True)
                      - alpha * s.log_prob)
            y[boot] += np.clip(v / self.cfg.boot_samples, 0.0, 1.0)
        if not (np.all(y >= 0.0) and np.all(y <= self.K)):
            raise AssertionError("chain critic target outside [0, K]")
        return y

    # -- updates ------------------------------------------------------------

    def critic_update(self):
        rows = self.buffer.sample_idx(self.cfg.batch_size, self.rng)
        y = self._targets_for(self.buffer, rows)
        return self.critic.regress(self.buffer.state[rows],
                                   self.buffer.idx[rows],
                                   self.buffer.u[rows], y)

    def _sil_weights(self, rows):
        y = self._targets_for(self.sil, rows)
        q = self.critic.q_min(self.sil.state[rows], self.sil.idx[rows],
                              self.sil.u[rows])
        adv = y - q
        if self.cfg.advantage_form == "clip":
            w = np.maximum(adv, 0.0)
        else:
            w = np.exp(np.minimum(adv / self.cfg.exp_beta, 5.0))
        # the final boundary's subgoal is pinned to the goal, not chosen
        w = w * (self.sil.idx[rows] < self.K)
        return w

    def actor_update(self, eps=None):
        cfg = self.cfg
        rows = self.buffer.sample_idx(cfg.batch_size, self.rng)
        rows = rows[self.buffer.idx[rows] < self.K]
        if len(rows) == 0:
            return 0.0
        states = self.buffer.state[rows]
        idxs = self.buffer.idx[rows]
        n = len(rows)
        K = self.K
        oh = np.zeros((n, K))
        oh[np.arange(n), idxs - 1] = 1.0
        feats = np.hstack([states, oh])
        (mu, ls), cache = self.policy.net.forward_cache(feats)
        samp = tl.sample_squashed(mu, ls, self.rng, eps=eps)
        qin = np.hstack([feats, samp.action])
        q1o, c1 = self.critic.q1.forward_cache(qin)
        q2o, c2 = self.critic.q2.forward_cache(qin)
        qmin = np.minimum(q1o[:, 0], q2o[:, 0])
        alpha = self.temperature
        loss = float(np.mean(alpha * samp.log_prob - qmin))

        pick1 = (q1o[:, 0] <= q2o[:, 0]).astype(np.float64)
        da = np.zeros_like(samp.action)
        for net, c, w in ((self.critic.q1, c1, pick1),
                          (self.critic.q2, c2, 1.0 - pick1)):
            _, dx = net.backward(c, (-(w / n))[:, None])
            da += dx[:, -self.policy.dg:]
        dlp = np.full(n, alpha / n)
        dmu, dls = tl.squash_sample_grads(samp, da, dlp)
        grads, _ = self.policy.net.backward(cache, (dmu, dls))

        if cfg.sil_coef > 0.0 and len(self.sil) > 0:
            srows = self.sil.sample_idx(cfg.sil_batch_size, self.rng)
            w = self._sil_weights(srows)
            if np.any(w > 0.0):
                sstates = self.sil.state[srows]
                sidx = self.sil.idx[srows]
                soh = np.zeros((len(srows), K))
                soh[np.arange(len(srows)), sidx - 1] = 1.0
                sfeats = np.hstack([sstates, soh])
                (smu, sls), scache = self.policy.net.forward_cache(sfeats)
                lp, dmu_lp, dls_lp = tl.squashed_log_prob(
                    smu, sls, self.sil.u[srows])
                m = len(srows)
                loss += -cfg.sil_coef * float(np.mean(w * lp))
                coef = (-cfg.sil_coef * w / m)[:, None]
                sgrads, _ = self.policy.net.backward(
                    scache, (coef * dmu_lp, coef * dls_lp))
                grads = [(gW + hW, gb + hb)
                         for (gW, gb), (hW, hb) in zip(grads, sgrads)]

        if not np.isfinite(loss):
            raise FloatingPointError("non-finite chain actor loss")
        tl.adam_step(self.opt_actor, self.policy.net.params, grads)
        if cfg.auto_temperature:
            d_la = -float(np.mean(samp.log_prob + self.target_entropy))
            tl.adam_step(self.opt_alpha, self.log_alpha,
                         [(np.array([[d_la]]), np.zeros(0))])
            self.log_alpha[0][0][0, 0] = np.clip(
                self.log_alpha[0][0][0, 0], -10.0, 3.0)
        return loss

    # -- loop ---------------------------------------------------------------

    def evaluate(self, n_episodes, rng):
        wins = 0
        completed = 0
        lengths = []
        for _ in range(n_episodes):
            transitions, r_T, steps, states = chain_rollout(
                self.policy, self.skills, self.env, rng, deterministic=True)
            wins += r_T
            completed += self.env.completed_subtasks(states)
            if r_T:
                lengths.append(steps)
        return (wins / n_episodes, completed / n_episodes,
                float(np.mean(lengths)) if lengths else float("nan"))

    def train(self, progress=None):
        cfg = self.cfg
        eval_rng_seed = int(self.rng.integers(2**63))
        best_rate = -1.0
        best_params = None
        span = max(1, cfg.total_episodes - cfg.warmup_episodes)
        while self.episodes_seen < cfg.total_episodes:
            warm = self.episodes_seen < cfg.warmup_episodes
            frac = max(0.0, self.episodes_seen - cfg.warmup_episodes) / span
            explore = (cfg.uniform_prob
                       + (cfg.uniform_prob_final - cfg.uniform_prob) * frac)
            transitions, r_T, steps, _ = chain_rollout(
                self.policy, self.skills, self.env, self.rng,
                deterministic=False,
                uniform_prob=1.0 if warm else explore)
            self.env_steps += steps
            self._push_episode(transitions, r_T)
            self.episodes_seen += 1
            if not warm:
                for _ in range(cfg.updates_per_episode):
                    self.critic_update()
                    self.actor_update()
            if self.episodes_seen % cfg.eval_interval == 0:
                sr, comp, length = self.evaluate(
                    cfg.eval_episodes, np.random.default_rng(eval_rng_seed))
                if sr > best_rate:
                    best_rate = sr
                    best_params = self.policy.net.param_vector()
                self.history.append({
                    "episode": self.episodes_seen,
                    "env_steps": self.env_steps,
                    "success_rate": sr,
                    "subtask_completion": comp,
                    "rollout_length": length,
                })
                if progress is not None:
                    progress(self.history[-1])
        if cfg.keep_best and best_params is not None:
            sr, _, _ = self.evaluate(cfg.eval_episodes,
                                     np.random.default_rng(eval_rng_seed))
            if sr > best_rate:
                best_params = self.policy.net.param_vector()
            self.policy.net.set_param_vector(best_params)
        return self


def sil_store(buffer: SilBuffer, transitions, r_T, targets):
    """Store a whole episode's boundary transitions iff it ended in task
    success."""
    return buffer.store_episode(transitions, r_T, targets)


def train_chain(env, skills, cfg: ChainTrainConfig, rng,
                discriminators=None, progress=None):
    trainer = ChainTrainer(env, skills, cfg, rng,
                           discriminators=discriminators)
    if cfg.total_episodes > 0:
        trainer.train(progress=progress)
    return trainer
