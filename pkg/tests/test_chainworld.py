import numpy as np
import pytest

from skillchain.tasks import (ChainWorldConfig, conflict_chain_config,
                              dp_optimal_values, dp_random_policy_values,
                              make_chain_world, p_map_value)
from skillchain.tasks.chainworld import ALIVE, FRAC, X


def test_p_map_kinds():
    assert p_map_value(("const", 1.0), 0.3) == 1.0
    assert p_map_value(("peak", 0.7, 2.0), 0.7) == 1.0
    assert p_map_value(("peak", 0.7, 2.0), 0.2) == pytest.approx(0.0, abs=1e-12)
    assert p_map_value(("peak", 0.7, 2.0), 0.1) == 0.0  # clamped region
    assert p_map_value(("step", 0.5, +1), 0.6) == 1.0
    assert p_map_value(("step", 0.5, +1), 0.4) == 0.0
    with pytest.raises(ValueError):
        p_map_value(("wat", 1.0), 0.5)


def test_invalid_configs():
    with pytest.raises(ValueError):
        make_chain_world(ChainWorldConfig(maps=[("const", 1.0)]))
    with pytest.raises(ValueError):
        make_chain_world(ChainWorldConfig(noise=0.5))


def test_step_function_value_is_indicator():
    # K=2 with a deterministic step map: the optimal value from a boundary
    # state is exactly the indicator of the good region
    cfg = ChainWorldConfig(
        maps=[("const", 1.0), ("step", 0.5, +1)],
        reach=1.0, start_range=(0.4, 0.6))
    grid, tables = dp_optimal_values(cfg, grid_n=1001)
    v2 = tables[1]  # value entering the final subtask at state x
    good = grid >= 0.5
    assert np.allclose(v2[good], 1.0, atol=1e-12)
    assert np.allclose(v2[~good], 0.0, atol=1e-12)


def test_default_dp_oracle_values():
    cfg = ChainWorldConfig()
    grid, tables = dp_optimal_values(cfg, grid_n=1001)
    # aiming at the peak keeps each later stage near its maximum; two
    # noisy stages compound to roughly (1 - 2 * E|eps|)^2
    per_stage = 1.0 - 2.0 * (cfg.noise / 2.0)
    start = tables[0][(grid >= 0.45) & (grid <= 0.55)]
    assert np.all(start > per_stage ** 2 - 0.01)
    assert np.all(start <= 1.0)


def test_dp_final_stage_matches_monte_carlo():
    cfg = ChainWorldConfig()
    env = make_chain_world(cfg)
    grid, tables = dp_optimal_values(cfg, grid_n=1001)
    rng = np.random.default_rng(0)
    K = cfg.K
    for x in (0.5, 0.65, 0.7, 0.8):
        wins = 0
        n = 10_000
        for _ in range(n):
            s = np.array([x, (K - 1) / K, 1.0])
            env.restore(s, np.zeros(1), rng)
            env._rng = rng
            g = min(1.0, max(0.0, x))  # any in-reach target works at the end
            _, r, _ = env.step(np.array([2 * g - 1]))
            wins += r
        v_dp = np.interp(x, grid, tables[K - 1])
        assert abs(wins / n - v_dp) <= 0.02


def test_env_rollout_success_matches_product_of_maps():
    # under ideal targeting, success over many episodes tracks the product
    # of the per-stage maps near their optima
    cfg = ChainWorldConfig()
    env = make_chain_world(cfg)
    rng = np.random.default_rng(1)
    wins = 0
    n = 4000
    for _ in range(n):
        env.reset(rng)
        done = False
        while not done:
            _, r, done = env.step(np.array([2 * 0.7 - 1.0]))
        wins += r
    expect = (1.0 - cfg.noise) ** 2  # two noisy stages at the peak
    assert abs(wins / n - expect) < 0.02


def test_reach_violation_breaks_chain():
    cfg = conflict_chain_config()
    env = make_chain_world(cfg)
    rng = np.random.default_rng(2)
    s, _ = env.reset(rng)
    x0 = s[X]
    target = min(1.0, x0 + cfg.reach + 0.05)  # out of reach, still in [0, 1]
    assert target - x0 > cfg.reach
    s2, r, done = env.step(np.array([2 * target - 1.0]))
    assert done and r == 0 and s2[ALIVE] == 0.0


def test_achieved_subgoal_sentinel_when_dead():
    env = make_chain_world(conflict_chain_config())
    rng = np.random.default_rng(3)
    s, _ = env.reset(rng)
    dead = s.copy()
    dead[ALIVE] = 0.0
    ach = env.achieved_subgoal(1, dead)
    assert ach[0] > 1.0  # far from every valid target


def test_subtask_reward_consistent_with_transition():
    env = make_chain_world(ChainWorldConfig())
    rng = np.random.default_rng(4)
    for _ in range(200):
        s, _ = env.reset(rng)
        g = rng.uniform(0, 1)
        s2, _, done = env.step(np.array([2 * g - 1.0]))
        r = env.subtask_reward(1, s2, np.zeros(1), np.array([g]))
        if s2[ALIVE] == 1.0:
            assert r == 1  # survived the draw: landed within noise of g
        else:
            assert r == 0


def test_conflict_world_separates_greedy_from_global():
    cfg = conflict_chain_config()
    grid, tables = dp_optimal_values(cfg, grid_n=2001)
    x0 = 0.5
    v_opt = np.interp(x0, grid, tables[0])
    # the greedy move: aim where the middle map peaks, then do your best
    g1 = cfg.maps[1][1]  # 0.2
    p2 = p_map_value(cfg.maps[1], g1)
    best_g2 = min(1.0, g1 + cfg.reach)
    p3 = p_map_value(cfg.maps[2], best_g2)
    v_greedy = p2 * p3
    assert v_opt > v_greedy + 0.3


def test_initiation_sets_cover_superlevel_sets():
    cfg = conflict_chain_config()
    env = make_chain_world(cfg)
    for i in (2, 3):
        xs = env._init_sets[i][:, X]
        p = p_map_value(cfg.maps[i - 1], xs)
        assert np.all(p >= cfg.init_threshold)


def test_determinism(env_seed=7):
    cfg = ChainWorldConfig()
    e1, e2 = make_chain_world(cfg), make_chain_world(cfg)
    for env in (e1, e2):
        env.reset(np.random.default_rng(env_seed))
    for _ in range(3):
        a = np.array([0.4])
        s1 = e1.step(a) if not e1.done else None
        s2 = e2.step(a) if not e2.done else None
        if s1 is None:
            assert s2 is None
        else:
            assert np.array_equal(s1[0], s2[0]) and s1[1] == s2[1]
