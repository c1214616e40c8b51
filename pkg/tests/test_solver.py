import numpy as np
import pytest

from aebsde.ae_prior import leading_order_price, z_ae
from aebsde.exceptions import ConfigurationError, TrainingError
from aebsde.market import ModelSpec, build_correlation_root, sample_paths, terminal_payoff
from aebsde.solver import (
    BSDENetwork,
    RolloutConfig,
    TrainHistory,
    TrainRecord,
    bergman_driver,
    compute_hedge_positions,
    make_network,
    qg_driver,
    reflected_driver,
    rollout,
    train,
)

from conftest import rel_err


def _silence_residual(net):
    net.params["z0"][:] = 0.0
    if net.subnets is not None:
        net.params["gamma3"][:] = 0.0
        net.params["beta3"][:] = 0.0


class TestDrivers:
    def test_bergman_no_borrowing(self, set_a, root1):
        Z = np.array([[0.6]])
        f = bergman_driver(set_a, root1, np.array([5.0]), Z)
        assert f[0] == pytest.approx(0.01 * 5.0 + 0.6 * 0.04 / 0.3, rel=1e-12)

    def test_bergman_borrowing(self, set_a, root1):
        Z = np.array([[3.0]])
        # risky position 10 exceeds wealth 5, so 5 is borrowed at R
        f = bergman_driver(set_a, root1, np.array([5.0]), Z)
        assert f[0] == pytest.approx(0.05 + 3.0 * 0.04 / 0.3 - 5.0 * 0.05, rel=1e-12)

    def test_equal_rates_linear(self, root1):
        m = ModelSpec(d=1, mu=0.05, sigma=0.3, r=0.02, T=1.0, x0=100.0, strikes=(100.0,))
        Y, Z = np.array([3.0, -4.0]), np.array([[10.0], [-2.0]])
        np.testing.assert_allclose(bergman_driver(m, root1, Y, Z), 0.02 * Y + Z[:, 0] * 0.1, rtol=1e-12)

    def test_reflected_uses_dividend_adjusted_premium(self, root1):
        m = ModelSpec(d=1, mu=0.02, y=0.07, sigma=0.2, r=0.03, T=0.5, x0=110.0, strikes=(100.0,),
                      payoff="basket_call")
        f = reflected_driver(m, root1, np.array([1.0]), np.array([[0.2]]))
        assert f[0] == pytest.approx(0.03 + 0.2 * 0.06 / 0.2, rel=1e-12)

    def test_qg(self):
        assert qg_driver(5.0, np.array([[3.0, 4.0]]))[0] == pytest.approx(-62.5)
        assert qg_driver(1.0, np.zeros((2, 50))).tolist() == [0.0, 0.0]

    def test_bergman_needs_borrowing_above_lending(self, root1):
        m = ModelSpec(d=1, mu=0.05, sigma=0.3, r=0.06, R=0.01, T=1.0, x0=100.0, strikes=(100.0,))
        net = BSDENetwork(1, 2)
        b = sample_paths(m, root1, "physical", 4, 2, seed=0)
        with pytest.raises(ConfigurationError):
            rollout(RolloutConfig(n_time=2), m, root1, net, b)


def test_hedge_positions_round_trip():
    m = ModelSpec(d=3, mu=0.05, sigma=[0.1, 0.2, 0.4], r=0.01, T=1.0, x0=100.0, strikes=(100.0,), gamma=0.2)
    root = build_correlation_root(3, 0.2)
    pi = np.random.default_rng(0).normal(size=(5, 3))
    Z = (m.sigma * pi) @ root.rho
    np.testing.assert_allclose(compute_hedge_positions(m, root, Z), pi, rtol=1e-12)


def test_hedge_positions_one_asset(set_a, root1):
    assert compute_hedge_positions(set_a, root1, np.array([[0.6]]))[0, 0] == pytest.approx(2.0)


def test_zero_control_identity(set_a, root1):
    cfg = RolloutConfig(driver="zero", use_ae=False, n_time=5)
    net = make_network(cfg, set_a)
    _silence_residual(net)
    b = sample_paths(set_a, root1, "physical", 32, 5, seed=1)
    res = rollout(cfg, set_a, root1, net, b, training=False)
    np.testing.assert_array_equal(res.y_terminal, np.full(32, net.y0))
    phi = terminal_payoff("call_portfolio", set_a, b.X[:, :, -1])
    assert res.loss == pytest.approx(np.mean((phi - net.y0) ** 2), rel=1e-14)


def test_prior_enters_controls_exactly():
    m = ModelSpec(d=3, mu=0.05, sigma=0.3, r=0.01, R=0.06, T=0.5, x0=100.0, strikes=(103.0,), gamma=0.06)
    root = build_correlation_root(3, 0.06)
    cfg = RolloutConfig(n_time=4, use_ae=True)
    net = make_network(cfg, m)
    _silence_residual(net)
    b = sample_paths(m, root, "physical", 16, 4, seed=2)
    res = rollout(cfg, m, root, net, b, training=True)
    for k in range(4):
        prior = z_ae(m, root, "call_portfolio", m.r, k * b.dt, b.X[:, :, k])
        assert res.z_total[k].tobytes() == prior.tobytes()


def test_prior_at_leading_order_beats_untrained_network(set_a, root1):
    m = set_a.replace(R=set_a.r)
    b = sample_paths(m, root1, "physical", 2048, 20, seed=3)
    cfg = RolloutConfig(n_time=20, use_ae=True, y_init=(7.0, 10.0))
    net = make_network(cfg, m)
    _silence_residual(net)
    net.params["y0"][:] = leading_order_price(m, root1, "call_portfolio", m.r, 0.0, m.x0[None, :])[0]
    with_prior = rollout(cfg, m, root1, net, b, training=False).loss
    cfg_plain = RolloutConfig(n_time=20, use_ae=False, y_init=(7.0, 10.0))
    without = rollout(cfg_plain, m, root1, make_network(cfg_plain, m), b, training=False).loss
    assert with_prior < without


AMERICAN = dict(mu=0.02, y=0.07, r=0.03, T=0.5, sigma=0.2, x0=110.0, strikes=(100.0,), payoff="basket_call")


def _gradient_case(kind):
    if kind == "plain":
        m = ModelSpec(d=1, mu=0.05, sigma=0.3, r=0.01, R=0.06, T=0.5, x0=100.0, strikes=(103.0,))
        return m, RolloutConfig(n_time=3, batch_size=4, y_init=(7.0, 10.0))
    if kind == "plain_no_ae":
        m = ModelSpec(d=1, mu=0.05, sigma=0.3, r=0.01, R=0.06, T=0.5, x0=100.0, strikes=(103.0,))
        return m, RolloutConfig(n_time=3, batch_size=4, y_init=(7.0, 10.0), use_ae=False)
    if kind == "reflected":
        return ModelSpec(d=1, **AMERICAN), RolloutConfig(variant="reflected", driver="reflected_linear",
                                                         n_time=3, batch_size=4, y_init=(9.0, 11.0))
    if kind == "penalized":
        return ModelSpec(d=1, **AMERICAN), RolloutConfig(variant="penalized", driver="reflected_linear",
                                                         n_time=3, batch_size=4, y_init=(9.0, 11.0),
                                                         epsilon_pen=0.1)
    m = ModelSpec(d=2, mu=0.0, r=0.0, x0=100.0, T=0.25, sigma=0.2, a=1.0, strikes=(95.0, 105.0),
                  payoff="capped_spread_avg")
    return m, RolloutConfig(driver="qg", n_time=3, batch_size=4, y_init=(4.0, 6.0))


@pytest.mark.parametrize("kind", ["plain", "plain_no_ae", "reflected", "penalized", "qg"])
def test_rollout_gradient_matches_finite_differences(kind):
    m, cfg = _gradient_case(kind)
    root = build_correlation_root(m.d, m.gamma)
    net = make_network(cfg, m)
    if kind == "reflected":
        net.params["bL"][:] = 5.0  # keep the lateral head active
    b = sample_paths(m, root, "physical", 4, 3, seed=7)
    res = rollout(cfg, m, root, net, b, training=True, compute_grad=True)
    if kind == "reflected":
        assert res.l_cum[-1].max() > 0
    fd = np.empty(net.params.data.size)
    eps = 1e-5
    for i in range(fd.size):
        orig = net.params.data[i]
        net.params.data[i] = orig + eps
        up = rollout(cfg, m, root, net, b, training=True).loss
        net.params.data[i] = orig - eps
        dn = rollout(cfg, m, root, net, b, training=True).loss
        net.params.data[i] = orig
        fd[i] = (up - dn) / (2 * eps)
    # entries far below the largest gradient are compared on an absolute scale
    err = rel_err(res.grad, fd, floor=1e-4 * np.abs(fd).max())
    assert fd.size >= 50
    assert np.all(err < 1e-3), np.flatnonzero(err >= 1e-3)


def test_reflection_increments_nonnegative_and_monotone():
    m = ModelSpec(d=1, **AMERICAN)
    root = build_correlation_root(1, 0)
    cfg = RolloutConfig(variant="reflected", driver="reflected_linear", n_time=10, y_init=(9.0, 11.0))
    net = make_network(cfg, m)
    net.params["bL"][:] = 1.0
    b = sample_paths(m, root, "physical", 256, 10, seed=4)
    res = rollout(cfg, m, root, net, b, training=False)
    assert np.all(res.delta_l >= 0) and np.all(res.delta_l[0] == 0)
    assert np.all(np.diff(res.l_cum, axis=0) >= 0)
    assert res.l_cum[-1].max() > 0


def test_no_penalty_far_above_barrier():
    m = ModelSpec(d=1, **AMERICAN)
    root = build_correlation_root(1, 0)
    cfg = RolloutConfig(variant="reflected", driver="reflected_linear", n_time=10, use_ae=False,
                        y_init=(1000.0, 1000.0))
    net = make_network(cfg, m)
    _silence_residual(net)
    b = sample_paths(m, root, "physical", 64, 10, seed=4)
    res = rollout(cfg, m, root, net, b, training=False)
    assert res.lateral_penalty == 0.0 and np.all(res.l_cum == 0)


def test_single_step_rollout_has_no_subnets(set_a, root1):
    cfg = RolloutConfig(n_time=1, y_init=(8.0, 9.0))
    net = make_network(cfg, set_a)
    assert net.subnets is None and net.params.data.size == 2
    b = sample_paths(set_a, root1, "physical", 8, 1, seed=0)
    res = rollout(cfg, set_a, root1, net, b, compute_grad=True)
    assert res.grad.shape == (2,)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(variant="obstacle"), dict(driver="linear"), dict(y_init=(3, 1)),
                                     dict(n_time=0), dict(lateral_point="mid"), dict(max_steps=-1)])
    def test_rejects(self, bad):
        with pytest.raises(ConfigurationError):
            RolloutConfig(**bad)

    def test_default_lateral_weight(self):
        assert RolloutConfig().weight(0.5) == 4.0
        assert RolloutConfig(lateral_weight=1.5).weight(0.5) == 1.5

    def test_frozen(self):
        with pytest.raises(AttributeError):
            RolloutConfig().n_time = 3


class TestTraining:
    def test_zero_steps_single_record(self, set_a, root1):
        cfg = RolloutConfig(n_time=5, max_steps=0, valid_size=64, y_init=(7.0, 10.0))
        history, net = train(cfg, set_a, root1)
        assert len(history) == 1 and history[0].step == 0
        assert history[0].y0 == net.y0

    def test_records_and_determinism(self, set_a, root1):
        cfg = RolloutConfig(n_time=5, max_steps=25, display_stride=10, valid_size=64, y_init=(7.0, 10.0))
        h1, n1 = train(cfg, set_a, root1)
        h2, n2 = train(cfg, set_a, root1)
        assert [r.step for r in h1] == [0, 10, 20, 25]
        assert h1.as_array()[:, :3].tobytes() == h2.as_array()[:, :3].tobytes()
        assert n1.params.data.tobytes() == n2.params.data.tobytes()
        assert all(r.loss >= 0 for r in h1)

    def test_loss_decreases(self, set_a, root1):
        cfg = RolloutConfig(n_time=10, max_steps=300, display_stride=300, valid_size=256, y_init=(7.0, 10.0))
        history, _ = train(cfg, set_a, root1)
        assert history.final.loss < history[0].loss

    def test_divergence_keeps_history(self, set_a, root1):
        cfg = RolloutConfig(n_time=5, max_steps=50, display_stride=1, valid_size=64, y_init=(7.0, 10.0),
                            learning_rate=50.0, divergence_bound=1e3)
        with pytest.raises(TrainingError) as err:
            train(cfg, set_a, root1)
        exc = err.value
        assert exc.step >= 1 and exc.history is not None and len(exc.history) >= 1
        assert exc.history.final.step < exc.step

    def test_history_order_enforced(self):
        h = TrainHistory()
        h.append(TrainRecord(0, 1.0, 1.0, 0.0))
        with pytest.raises(ValueError):
            h.append(TrainRecord(0, 1.0, 1.0, 0.0))

    def test_checkpoint_round_trip(self, tmp_path):
        m = ModelSpec(d=1, **AMERICAN)
        root = build_correlation_root(1, 0)
        cfg = RolloutConfig(variant="reflected", driver="reflected_linear", n_time=4, max_steps=5,
                            valid_size=32, y_init=(9.0, 11.0))
        _, net = train(cfg, m, root)
        net.save(tmp_path / "net.npz")
        other = BSDENetwork(1, 4, lateral_head=True, seed=99)
        other.load_state(tmp_path / "net.npz")
        b = sample_paths(m, root, "physical", 16, 4, seed=3)
        a = rollout(cfg, m, root, net, b, training=False)
        c = rollout(cfg, m, root, other, b, training=False)
        assert a.y_terminal.tobytes() == c.y_terminal.tobytes()


@pytest.mark.slow
def test_reflected_value_does_not_depend_on_drift():
    root = build_correlation_root(1, 0)
    cfg = RolloutConfig(variant="reflected", driver="reflected_linear", n_time=20, max_steps=2000,
                        display_stride=2000, y_init=(10.0, 12.0))
    values = []
    for mu in (0.02, 0.10):
        history, _ = train(cfg, ModelSpec(d=1, **dict(AMERICAN, mu=mu)), root)
        values.append(history.final.y0)
    assert values[0] == pytest.approx(values[1], rel=0.02)
