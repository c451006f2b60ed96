"""Soft actor-critic backbone: replay buffer, hindsight relabeling, twin
critics with EMA targets, auto-tuned entropy temperature, and a
demonstration term that pulls the policy mean toward expert actions.

All gradients are composed by hand from the tensorlite primitives; the
finite-difference tests in tests/test_rl.py pin the full chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorlite as tl


@dataclass
class EpisodeTrajectory:
    """One subtask episode with achieved-subgoal annotations."""

    subtask: int
    states: np.ndarray      # (T+1, ds)
    actions: np.ndarray     # (T, da)
    rewards: np.ndarray     # (T,)
    subgoal: np.ndarray     # (dg,)
    achieved: np.ndarray    # (T+1, dg), aligned with states

    def __post_init__(self):
        if self.states.shape[0] != self.actions.shape[0] + 1:
            raise ValueError("states must have one more row than actions")
        if self.achieved.shape[0] != self.states.shape[0]:
            raise ValueError("achieved annotations misaligned")


def her_relabel(episode: EpisodeTrajectory, k, rng, reward_fn):
    """Future-strategy hindsight relabeling.

    Emits each original transition plus k copies whose subgoal is the raw
    achieved subgoal of a uniformly drawn future step, with the reward
    recomputed by reward_fn(state, action, subgoal); the stored reward
    always matches a recomputation against the stored subgoal.

    Returns arrays (states, actions, rewards, next_states, dones, subgoals).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    T = len(episode.actions)
    ss, aa, rr, nn, dd, gg = [], [], [], [], [], []
    for t in range(T):
        s, a, s2 = episode.states[t], episode.actions[t], episode.states[t + 1]
        r = int(episode.rewards[t])
        ss.append(s)
        aa.append(a)
        rr.append(r)
        nn.append(s2)
        dd.append(1.0 if r == 1 else 0.0)
        gg.append(episode.subgoal)
        for _ in range(k):
            future = rng.integers(t, T)  # achieved state of step future+1
            g = episode.achieved[future + 1]
            r2 = int(reward_fn(s2, a, g))
            ss.append(s)
            aa.append(a)
            rr.append(r2)
            nn.append(s2)
            dd.append(1.0 if r2 == 1 else 0.0)
            gg.append(g)
    if not ss:
        dg = episode.subgoal.shape[0]
        return (np.zeros((0, episode.states.shape[1])),
                np.zeros((0, episode.actions.shape[1])), np.zeros(0),
                np.zeros((0, episode.states.shape[1])), np.zeros(0),
                np.zeros((0, dg)))
    return (np.stack(ss), np.stack(aa), np.asarray(rr, dtype=np.float64),
            np.stack(nn), np.asarray(dd), np.stack(gg))


class ReplayBuffer:
    """Uniform ring buffer over flat transition arrays."""

    def __init__(self, capacity, state_dim, action_dim, goal_dim):
        self.capacity = int(capacity)
        self.size = 0
        self.pos = 0
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.d = np.zeros(capacity)
        self.g = np.zeros((capacity, goal_dim))

    def add_batch(self, s, a, r, s2, d, g):
        n = len(r)
        for i in range(n):
            j = self.pos
            self.s[j] = s[i]
            self.a[j] = a[i]
            self.r[j] = r[i]
            self.s2[j] = s2[i]
            self.d[j] = d[i]
            self.g[j] = g[i]
            self.pos = (self.pos + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return (self.s[idx], self.a[idx], self.r[idx], self.s2[idx],
                self.d[idx], self.g[idx])

    def __len__(self):
        return self.size


@dataclass
class SacConfig:
    hidden: int = 256
    n_layers: int = 4
    lr: float = 1e-4
    gamma: float = 0.99
    tau: float = 5e-3
    batch_size: int = 128
    demo_coef: float = 0.3
    demo_decay_every: int = 200_000
    demo_decay: float = 0.5
    auto_temperature: bool = True
    init_temperature: float = 0.1
    target_entropy: float | None = None  # default: -action_dim


class SacAgent:
    """Twin-critic SAC over subgoal-conditioned inputs (state ++ goal)."""

    def __init__(self, state_dim, goal_dim, action_dim, cfg: SacConfig, rng):
        self.cfg = cfg
        self.state_dim = state_dim
        self.goal_dim = goal_dim
        self.action_dim = action_dim
        in_dim = state_dim + goal_dim
        self.actor = tl.MlpNet(in_dim, action_dim, hidden=cfg.hidden,
                               n_layers=cfg.n_layers, head="gaussian", rng=rng)
        self.q1 = tl.MlpNet(in_dim + action_dim, 1, hidden=cfg.hidden,
                            n_layers=cfg.n_layers, rng=rng)
        self.q2 = tl.MlpNet(in_dim + action_dim, 1, hidden=cfg.hidden,
                            n_layers=cfg.n_layers, rng=rng)
        self.t1 = self.q1.copy()
        self.t2 = self.q2.copy()
        self.opt_actor = tl.AdamState.for_params(self.actor.params, lr=cfg.lr)
        self.opt_q1 = tl.AdamState.for_params(self.q1.params, lr=cfg.lr)
        self.opt_q2 = tl.AdamState.for_params(self.q2.params, lr=cfg.lr)
        self.log_alpha = [(np.array([[np.log(max(cfg.init_temperature,
                                                 1e-8))]]), np.zeros(0))]
        self.opt_alpha = tl.AdamState.for_params(self.log_alpha, lr=cfg.lr)
        self.target_entropy = (cfg.target_entropy if cfg.target_entropy
                               is not None else -float(action_dim))
        self.demo_coef = cfg.demo_coef
        self.rng = rng
        self._last_targets = None

    @property
    def temperature(self):
        if not self.cfg.auto_temperature:
            return self.cfg.init_temperature
        return float(np.exp(self.log_alpha[0][0][0, 0]))

    def _obs(self, state, goal):
        if self.goal_dim == 0:
            return np.atleast_2d(state)
        return np.hstack([np.atleast_2d(state), np.atleast_2d(goal)])

    def act(self, state, goal, rng=None, deterministic=False):
        mu, log_std = self.actor.forward(self._obs(state, goal))
        if deterministic:
            return tl.squash_mean(mu)[0]
        a, _ = tl.sample_squashed_gaussian((mu, log_std),
                                           rng if rng is not None else self.rng)
        return a[0]

    # -- critic ------------------------------------------------------------

    def critic_targets(self, batch):
        s, a, r, s2, d, g = batch
        x2 = self._obs(s2, g)
        mu2, ls2 = self.actor.forward(x2)
        samp = tl.sample_squashed(mu2, ls2, self.rng)
        qin2 = np.hstack([x2, samp.action])
        tq = np.minimum(self.t1.forward(qin2)[:, 0],
                        self.t2.forward(qin2)[:, 0])
        y = r + self.cfg.gamma * (1.0 - d) * (
            tq - self.temperature * samp.log_prob)
        return y

    def critic_update(self, batch):
        s, a, r, s2, d, g = batch
        y = self.critic_targets(batch)
        self._last_targets = y
        x = np.hstack([self._obs(s, g), a])
        n = len(r)
        losses = []
        for net, opt in ((self.q1, self.opt_q1), (self.q2, self.opt_q2)):
            out, cache = net.forward_cache(x)
            diff = out[:, 0] - y
            loss = float(np.mean(diff * diff))
            grads, _ = net.backward(cache, (2.0 * diff / n)[:, None])
            tl.adam_step(opt, net.params, grads)
            losses.append(loss)
        tl.ema_update(self.t1.params, self.q1.params, self.cfg.tau)
        tl.ema_update(self.t2.params, self.q2.params, self.cfg.tau)
        loss = 0.5 * sum(losses)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite critic loss")
        return loss

    # -- actor -------------------------------------------------------------

    def _actor_loss_and_grads(self, batch, demo_batch=None, eps=None):
        s, a, r, s2, d, g = batch
        x = self._obs(s, g)
        n = x.shape[0]
        (mu, ls), cache = self.actor.forward_cache(x)
        samp = tl.sample_squashed(mu, ls, self.rng, eps=eps)
        qin = np.hstack([x, samp.action])
        q1o, c1 = self.q1.forward_cache(qin)
        q2o, c2 = self.q2.forward_cache(qin)
        qmin = np.minimum(q1o[:, 0], q2o[:, 0])
        alpha = self.temperature
        loss = float(np.mean(alpha * samp.log_prob - qmin))

        pick1 = (q1o[:, 0] <= q2o[:, 0]).astype(np.float64)
        da = np.zeros_like(samp.action)
        for net, c, w in ((self.q1, c1, pick1), (self.q2, c2, 1.0 - pick1)):
            dout = (-(w / n))[:, None]
            _, dx = net.backward(c, dout)
            da += dx[:, -self.action_dim:]
        dlp = np.full(n, alpha / n)
        dmu, dls = tl.squash_sample_grads(samp, da, dlp)
        grads, _ = self.actor.backward(cache, (dmu, dls))

        if (demo_batch is not None and self.demo_coef > 0.0
                and len(demo_batch[0]) > 0):
            sd, gd, ad = demo_batch
            xd = self._obs(sd, gd)
            nd = xd.shape[0]
            (mud, lsd), cd = self.actor.forward_cache(xd)
            pre_target = tl.atanh_clipped(ad)
            diff = mud - pre_target
            loss += self.demo_coef * float(np.mean(np.sum(diff * diff,
                                                          axis=1)))
            dmud = self.demo_coef * 2.0 * diff / nd
            demo_grads, _ = self.actor.backward(cd, (dmud,
                                                     np.zeros_like(lsd)))
            grads = [(gW + hW, gb + hb)
                     for (gW, gb), (hW, hb) in zip(grads, demo_grads)]
        return loss, grads, samp.log_prob

    def actor_update(self, batch, demo_batch=None):
        loss, grads, log_prob = self._actor_loss_and_grads(batch, demo_batch)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite actor loss")
        tl.adam_step(self.opt_actor, self.actor.params, grads)
        if self.cfg.auto_temperature:
            # d/d log_alpha of -log_alpha * mean(log_prob + target_entropy)
            d_la = -float(np.mean(log_prob + self.target_entropy))
            tl.adam_step(self.opt_alpha, self.log_alpha,
                         [(np.array([[d_la]]), np.zeros(0))])
            self.log_alpha[0][0][0, 0] = np.clip(
                self.log_alpha[0][0][0, 0], -10.0, 3.0)
        return loss

    def update(self, batch, demo_batch=None):
        cl = self.critic_update(batch)
        al = self.actor_update(batch, demo_batch)
        return cl, al

    def bc_update(self, demo_states, demo_goals, demo_actions):
        """Plain cloning step: pre-squash MSE of the policy mean against
        the expert action. Used to warm-start the actor before RL."""
        x = self._obs(demo_states, demo_goals)
        n = x.shape[0]
        (mu, ls), cache = self.actor.forward_cache(x)
        diff = mu - tl.atanh_clipped(demo_actions)
        loss = float(np.mean(np.sum(diff * diff, axis=1)))
        grads, _ = self.actor.backward(cache, (2.0 * diff / n,
                                               np.zeros_like(ls)))
        tl.adam_step(self.opt_actor, self.actor.params, grads)
        return loss

    # -- persistence ---------------------------------------------------------

    def checkpoint_sections(self, prefix=""):
        return {
            prefix + "actor": tl.net_params_flat(self.actor),
            prefix + "q1": tl.net_params_flat(self.q1),
            prefix + "q2": tl.net_params_flat(self.q2),
            prefix + "t1": tl.net_params_flat(self.t1),
            prefix + "t2": tl.net_params_flat(self.t2),
            prefix + "log_alpha": [self.log_alpha[0][0]],
        }

    def load_sections(self, sections, prefix=""):
        tl.set_net_params_flat(self.actor, sections[prefix + "actor"])
        tl.set_net_params_flat(self.q1, sections[prefix + "q1"])
        tl.set_net_params_flat(self.q2, sections[prefix + "q2"])
        tl.set_net_params_flat(self.t1, sections[prefix + "t1"])
        tl.set_net_params_flat(self.t2, sections[prefix + "t2"])
        self.log_alpha[0] = (sections[prefix + "log_alpha"][0].copy(),
                             np.zeros(0))
