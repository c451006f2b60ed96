import numpy as np
import pytest

from skillchain import tensorlite as tl


def fd_param_grads(net, x, loss_fn, eps=1e-4):
    """Central finite differences of loss_fn(net.forward(x)) w.r.t. params."""
    vec = net.param_vector()
    g = np.zeros_like(vec)
    for i in range(vec.size):
        v = vec.copy()
        v[i] += eps
        net.set_param_vector(v)
        up = loss_fn(net.forward(x))
        v[i] -= 2 * eps
        net.set_param_vector(v)
        down = loss_fn(net.forward(x))
        g[i] = (up - down) / (2 * eps)
    net.set_param_vector(vec)
    return g


def grads_to_vector(grads):
    return np.concatenate([np.concatenate([gW.ravel(), gb.ravel()])
                           for gW, gb in grads])


def max_rel_err(a, f):
    return np.max(np.abs(a - f) / np.maximum(np.abs(f), 1e-2))


def _net_and_input_with_kink_margin(head, margin=2e-3, **kwargs):
    # central differences are only a valid oracle away from ReLU kinks,
    # so pick the first seed whose pre-activations all clear the margin
    for seed in range(100):
        rng = np.random.default_rng(seed)
        net = tl.MlpNet(8, 3, hidden=8, n_layers=4, head=head, rng=rng,
                        **kwargs)
        x = rng.uniform(-1, 1, size=(6, 8))
        _, (hs, zs, _) = net.forward_cache(x)
        if min(np.abs(z).min() for z in zs[:-1]) > margin:
            return net, x, rng
    raise AssertionError("no kink-free configuration found")


@pytest.mark.parametrize("head", ["identity", "tanh", "gaussian"])
def test_backward_matches_finite_differences(head):
    kwargs = {}
    if head == "tanh":
        kwargs = {"out_lo": np.array([-2.0, 0.0, -1.0]),
                  "out_hi": np.array([2.0, 1.0, 3.0])}
    net, x, rng = _net_and_input_with_kink_margin(head, **kwargs)
    if head == "gaussian":
        r_mu = rng.standard_normal((6, 3))
        r_ls = rng.standard_normal((6, 3))

        def loss(out):
            mu, ls = out
            return float((mu * r_mu).sum() + (ls * r_ls).sum())

        out, cache = net.forward_cache(x)
        grads, dx = net.backward(cache, (r_mu, r_ls))
    else:
        r = rng.standard_normal((6, 3))

        def loss(out):
            return float((out * r).sum())

        out, cache = net.forward_cache(x)
        grads, dx = net.backward(cache, r)

    fd = fd_param_grads(net, x, loss)
    assert max_rel_err(grads_to_vector(grads), fd) < 1e-4

    # input gradients against finite differences too
    fd_x = np.zeros_like(x)
    eps = 1e-4
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += eps
        up = loss(net.forward(xp))
        xp[idx] -= 2 * eps
        down = loss(net.forward(xp))
        fd_x[idx] = (up - down) / (2 * eps)
    assert max_rel_err(dx, fd_x) < 1e-4


def test_zero_final_layer_identity_gives_zero_output():
    rng = np.random.default_rng(0)
    net = tl.MlpNet(4, 2, hidden=8, n_layers=3, rng=rng)
    W, b = net.params[-1]
    net.params[-1] = (np.zeros_like(W), np.zeros_like(b))
    x = rng.uniform(-5, 5, size=(10, 4))
    assert np.all(net.forward(x) == 0.0)


def test_tanh_head_respects_range():
    rng = np.random.default_rng(1)
    lo = np.array([-0.5, 2.0])
    hi = np.array([0.5, 3.0])
    net = tl.MlpNet(3, 2, hidden=16, n_layers=2, head="tanh",
                    out_lo=lo, out_hi=hi, rng=rng, final_scale=1.0)
    x = rng.uniform(-10, 10, size=(10_000, 3))
    out = net.forward(x)
    assert np.all(out >= lo) and np.all(out <= hi)


def test_hand_computed_forward_pass():
    # 2-2-1 net, weights set by hand, identity head
    net = tl.MlpNet(2, 1, hidden=2, n_layers=2, rng=np.random.default_rng(0))
    net.params[0] = (np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.1, -0.2]))
    net.params[1] = (np.array([[2.0], [-3.0]]), np.array([0.25]))
    x = np.array([[1.0, 2.0]])
    # z1 = [1*1 + 2*0.5 + 0.1, 1*(-1) + 2*2 - 0.2] = [2.1, 2.8]
    # h = relu(z1) = [2.1, 2.8]; out = 2*2.1 - 3*2.8 + 0.25 = -3.95
    out = net.forward(x)
    assert np.allclose(out, [[-3.95]])


def test_zero_upstream_gives_zero_param_grads():
    rng = np.random.default_rng(3)
    net = tl.MlpNet(5, 2, hidden=8, n_layers=3, rng=rng)
    x = rng.uniform(-1, 1, size=(4, 5))
    grads, dx = tl.backward(net, x, np.zeros((4, 2)))
    for gW, gb in grads:
        assert np.all(gW == 0.0) and np.all(gb == 0.0)
    assert np.all(dx == 0.0)


def test_single_layer_matches_linear_regression_grads():
    rng = np.random.default_rng(4)
    net = tl.MlpNet(3, 2, n_layers=1, rng=rng)
    x = rng.uniform(-1, 1, size=(16, 3))
    y = rng.uniform(-1, 1, size=(16, 2))
    out, cache = net.forward_cache(x)
    n = x.shape[0]
    grads, _ = net.backward(cache, 2.0 * (out - y) / n)
    W, b = net.params[0]
    resid = x @ W + b - y
    dW_closed = 2.0 * x.T @ resid / n
    db_closed = 2.0 * resid.sum(axis=0) / n
    assert np.allclose(grads[0][0], dW_closed)
    assert np.allclose(grads[0][1], db_closed)


def test_dimension_mismatch_raises():
    net = tl.MlpNet(4, 1, hidden=4, n_layers=2)
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 5)))


class TestAdam:
    def test_first_step_is_signed_lr(self):
        params = [(np.array([[1.0, -2.0]]), np.array([3.0]))]
        opt = tl.AdamState.for_params(params, lr=0.01)
        g = [(np.array([[10.0, -5.0]]), np.array([2.0]))]
        tl.adam_step(opt, params, g)
        # bias-corrected first step moves by ~lr against the gradient sign
        assert np.allclose(params[0][0], [[1.0 - 0.01, -2.0 + 0.01]], atol=1e-6)
        assert np.allclose(params[0][1], [3.0 - 0.01], atol=1e-6)

    def test_zero_gradient_keeps_params(self):
        params = [(np.array([[1.5]]), np.array([0.5]))]
        opt = tl.AdamState.for_params(params, lr=0.1)
        tl.adam_step(opt, params, [(np.zeros((1, 1)), np.zeros(1))])
        assert params[0][0][0, 0] == 1.5 and params[0][1][0] == 0.5
        assert opt.step_count == 1

    def test_quadratic_convergence(self):
        params = [(np.array([[1.0]]), np.zeros(1))]
        opt = tl.AdamState.for_params(params, lr=0.1)
        for _ in range(200):
            x = params[0][0][0, 0]
            tl.adam_step(opt, params, [(np.array([[2.0 * x]]), np.zeros(1))])
        assert abs(params[0][0][0, 0]) < 0.05

    def test_nonfinite_gradient_raises(self):
        params = [(np.ones((1, 1)), np.zeros(1))]
        opt = tl.AdamState.for_params(params)
        with pytest.raises(FloatingPointError):
            tl.adam_step(opt, params, [(np.array([[np.nan]]), np.zeros(1))])


class TestEma:
    def test_tau_one_copies_online(self):
        t = [(np.zeros((2, 2)), np.zeros(2))]
        o = [(np.ones((2, 2)), np.ones(2))]
        tl.ema_update(t, o, 1.0)
        assert np.all(t[0][0] == 1.0) and np.all(t[0][1] == 1.0)

    def test_small_tau_exact_value(self):
        t = [(np.zeros((1, 1)), np.zeros(1))]
        o = [(np.ones((1, 1)), np.ones(1))]
        tl.ema_update(t, o, 5e-3)
        assert np.allclose(t[0][0], 0.005) and np.allclose(t[0][1], 0.005)

    def test_geometric_convergence(self):
        t = [(np.zeros((1, 1)), np.zeros(1))]
        o = [(np.ones((1, 1)), np.ones(1))]
        for _ in range(2000):
            tl.ema_update(t, o, 5e-3)
        gap = abs(t[0][0][0, 0] - 1.0)
        assert gap == pytest.approx((1 - 5e-3) ** 2000, rel=1e-9)


class TestSquashedGaussian:
    def test_tiny_std_is_deterministic_squashed_mean(self):
        rng = np.random.default_rng(0)
        mu = np.array([[0.7, -1.2]])
        log_std = np.full((1, 2), -12.0)
        a1, _ = tl.sample_squashed_gaussian((mu, log_std), rng)
        expected = np.tanh(mu)
        assert np.allclose(a1, expected, atol=1e-4)

    def test_samples_within_bounds(self):
        rng = np.random.default_rng(1)
        mu = rng.standard_normal((1000, 3)) * 3
        log_std = rng.uniform(-2, 1, size=(1000, 3))
        lo = np.array([-1.0, 0.0, 2.0])
        hi = np.array([1.0, 5.0, 2.5])
        a, _ = tl.sample_squashed_gaussian((mu, log_std), rng, lo, hi)
        assert np.all(a >= lo) and np.all(a <= hi)

    def test_log_prob_against_histogram_density(self):
        # 1-dim Monte-Carlo density oracle
        rng = np.random.default_rng(2)
        n = 1_000_000
        mu = np.full((n, 1), 0.3)
        log_std = np.full((n, 1), np.log(0.5))
        a, _ = tl.sample_squashed_gaussian((mu, log_std), rng)
        bins = 40
        counts, edges = np.histogram(a[:, 0], bins=bins, range=(-1, 1))
        width = edges[1] - edges[0]
        emp = counts / (n * width)

        def density(points):
            pts = np.asarray(points).reshape(-1, 1)
            lp, _, _ = tl.squashed_log_prob(
                np.full_like(pts, 0.3), np.full_like(pts, np.log(0.5)), pts)
            return np.exp(lp)

        # Simpson over each bin: mean density, not midpoint density
        left, mid, right = edges[:-1], (edges[:-1] + edges[1:]) / 2, edges[1:]
        dens = (density(left) + 4 * density(mid) + density(right)) / 6
        hot = dens > 0.7 * dens.max()
        rel = np.abs(emp[hot] - dens[hot]) / dens[hot]
        assert rel.max() < 0.02

    def test_sample_grads_match_finite_differences(self):
        rng = np.random.default_rng(5)
        mu = rng.standard_normal((4, 2)) * 0.5
        log_std = rng.uniform(-1.5, 0.0, size=(4, 2))
        eps = rng.standard_normal((4, 2))
        lo, hi = np.array([-1.0, 0.0]), np.array([1.0, 2.0])
        ra = rng.standard_normal((4, 2))
        rl = rng.standard_normal(4)

        def f(m, ls):
            s = tl.sample_squashed(m, ls, rng=None, lo=lo, hi=hi, eps=eps)
            return float((s.action * ra).sum() + (s.log_prob * rl).sum())

        s = tl.sample_squashed(mu, log_std, rng=None, lo=lo, hi=hi, eps=eps)
        d_mu, d_ls = tl.squash_sample_grads(s, ra, rl)
        h = 1e-5
        for arr, grad in ((mu, d_mu), (log_std, d_ls)):
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = f(mu, log_std)
                arr[idx] = orig - h
                down = f(mu, log_std)
                arr[idx] = orig
                fd[idx] = (up - down) / (2 * h)
            assert np.max(np.abs(grad - fd)) < 1e-5

    def test_given_action_log_prob_grads(self):
        rng = np.random.default_rng(6)
        mu = rng.standard_normal((3, 2)) * 0.3
        log_std = rng.uniform(-1, 0, size=(3, 2))
        action = rng.uniform(-0.9, 0.9, size=(3, 2))
        lp, d_mu, d_ls = tl.squashed_log_prob(mu, log_std, action)
        h = 1e-5
        for arr, grad in ((mu, d_mu), (log_std, d_ls)):
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = tl.squashed_log_prob(mu, log_std, action)[0]
                arr[idx] = orig - h
                down = tl.squashed_log_prob(mu, log_std, action)[0]
                arr[idx] = orig
                fd[idx] = (up - down)[idx[0]] / (2 * h)
            assert np.max(np.abs(grad - fd)) < 1e-5

    def test_boundary_demo_action_stays_finite(self):
        mu = np.zeros((1, 2))
        log_std = np.zeros((1, 2))
        action = np.array([[1.0, -1.0]])  # exactly at the range boundary
        lp, d_mu, d_ls = tl.squashed_log_prob(mu, log_std, action)
        assert np.isfinite(lp).all()
        assert np.isfinite(d_mu).all() and np.isfinite(d_ls).all()
        pre = tl.atanh_clipped(action)
        assert np.isfinite(pre).all()


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    net = tl.MlpNet(5, 3, hidden=16, n_layers=4, rng=rng)
    path = tmp_path / "net.cskc"
    tl.save_params(path, {"actor": tl.net_params_flat(net)})
    loaded = tl.load_params(path)
    assert set(loaded) == {"actor"}
    for orig, back in zip(tl.net_params_flat(net), loaded["actor"]):
        assert back.shape == orig.shape
        assert np.allclose(back, orig, atol=1e-6)
    # magic is validated
    bad = tmp_path / "bad.cskc"
    bad.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ValueError):
        tl.load_params(bad)


def test_same_seed_reproducible_init_and_sampling():
    a = tl.MlpNet(4, 2, hidden=8, rng=np.random.default_rng(42))
    b = tl.MlpNet(4, 2, hidden=8, rng=np.random.default_rng(42))
    assert a.checksum() == b.checksum()
    mu = np.zeros((5, 2))
    ls = np.zeros((5, 2))
    s1, lp1 = tl.sample_squashed_gaussian((mu, ls), np.random.default_rng(9))
    s2, lp2 = tl.sample_squashed_gaussian((mu, ls), np.random.default_rng(9))
    assert np.array_equal(s1, s2) and np.array_equal(lp1, lp2)
