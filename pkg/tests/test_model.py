import numpy as np
import pytest

from stationary_grad import (Box, NumericalError, RngStream, SystemModel, simulate,
                             validate_cost, validate_derivatives)
from stationary_grad.costs import coordinate, quadratic
from stationary_grad.model import NOISE_CHUNK, NoiseFeed, state_blocks
from stationary_grad.zoo import (Example2Config, LinearAR1Config, StochasticNNConfig, make_ar1,
                                 make_example2, make_stochastic_nn, random_nn_theta)


def bundled():
    th = random_nn_theta(3, 0.3, seed=1)
    return [
        (make_ar1()[0], np.array([0.3])),
        (make_stochastic_nn(StochasticNNConfig(N=3, rho=0.5, theta=th))[0], th.ravel()),
        (make_example2()[0], np.array([0.1])),
    ]


@pytest.mark.property
@pytest.mark.parametrize("model,theta", bundled(), ids=["ar1", "nn", "example2"])
def test_bundled_models_pass_derivative_validation(model, theta):
    rep = validate_derivatives(model, theta, points=16, rng=RngStream(3))
    assert rep.ok, rep.failures
    assert rep.max_rel_error["jac_x"] < 1e-5
    assert rep.max_rel_error["hess_xx"] < 1e-4


def test_linear_model_jacobian_error_is_roundoff():
    model, _ = make_ar1(LinearAR1Config(a=0.5, eps=0.1))
    rep = validate_derivatives(model, [0.3], points=8)
    assert rep.max_rel_error["jac_x"] < 1e-9
    assert rep.max_rel_error["jac_theta"] < 1e-9


def test_example2_jacobian_at_origin():
    model, _ = make_example2()
    J = model.jac_x(np.zeros(2), np.array([0.2, -0.3]), np.array([0.0]))
    np.testing.assert_allclose(J, [[0.5, 0.0], [0.0, 0.0]], atol=1e-15)
    rep = validate_derivatives(model, [0.0], points=np.zeros((1, 2)))
    assert rep.max_rel_error["jac_x"] < 1e-6


class _Corrupted(SystemModel):
    """Example-2 dynamics with an off-by-0.1 entry in ``df/dx``."""

    def __init__(self):
        self.base = make_example2()[0]
        self.state_dim, self.param_dim = 2, 1
        self.noise_shape = (2,)

    def step(self, x, xi, theta):
        return self.base.step(x, xi, theta)

    def jac_x(self, x, xi, theta):
        J = np.array(self.base.jac_x(x, xi, theta))
        J[..., 1, 0] += 0.1
        return J

    def jac_theta(self, x, xi, theta):
        return self.base.jac_theta(x, xi, theta)

    def sample_noise(self, rng, size):
        return self.base.sample_noise(rng, size)


@pytest.mark.property
def test_corrupted_jacobian_is_flagged_at_its_entry():
    rep = validate_derivatives(_Corrupted(), [0.1], points=4)
    assert not rep.ok
    bad = [f for f in rep.failures if f["derivative"] == "jac_x"]
    assert len(bad) == 4
    assert all(f["entry"] == [1, 0] for f in bad)
    assert rep.max_rel_error["jac_theta"] < 1e-5


class _Exploding(SystemModel):
    state_dim, param_dim = 1, 1

    def step(self, x, xi, theta):
        return np.asarray(x) * 1e200 + 1.0

    def jac_x(self, x, xi, theta):
        return np.full(np.shape(x) + (1,), 1e200)

    def jac_theta(self, x, xi, theta):
        return np.zeros(np.shape(x) + (1,))

    def sample_noise(self, rng, size):
        return np.zeros(size)


def test_non_finite_output_is_a_validation_failure_not_an_exception():
    rep = validate_derivatives(_Exploding(), [0.0], points=np.array([[1e200]]))
    assert not rep.ok
    assert rep.failures[0]["error"] == "non-finite model output"


@pytest.mark.filterwarnings("ignore:overflow")
def test_simulate_reports_first_non_finite_step():
    with pytest.raises(NumericalError) as info:
        simulate(_Exploding(), [0.0], [1.0], 10, RngStream(0))
    assert info.value.step == 2


def test_simulate_noise_free_ar1_is_geometric():
    model, _ = make_ar1(LinearAR1Config(a=0.5, eps=0.0))
    traj = simulate(model, [0.3], [0.0], 60, RngStream(0))
    n = np.arange(61)
    np.testing.assert_allclose(traj[:, 0], 0.6 * (1 - 2.0**-n), atol=1e-15)


def test_single_step_trajectory():
    model, _ = make_example2()
    traj, noise = simulate(model, [0.1], [0.3, -0.2], 1, RngStream(5), return_noise=True)
    assert traj.shape == (2, 2)
    np.testing.assert_array_equal(traj[0], [0.3, -0.2])
    np.testing.assert_allclose(traj[1], model.step(np.array([0.3, -0.2]), noise[0], np.array([0.1])))


def test_network_without_edges_jumps_to_half():
    model, _ = make_stochastic_nn(StochasticNNConfig(N=4, rho=1.0, theta=np.ones((4, 4)) * 0.2))
    traj = simulate(model, np.ones(16) * 0.2, [0.9, 0.1, 0.3, 0.7], 3, RngStream(1))
    np.testing.assert_array_equal(traj[1:], 0.5)


def test_simulate_is_bit_identical_for_equal_seeds_and_thins():
    model, _ = make_example2()
    a = simulate(model, [0.1], [0.0, 0.0], 3000, RngStream(9, 2))
    b = simulate(model, [0.1], [0.0, 0.0], 3000, RngStream(9, 2))
    assert np.array_equal(a, b)
    c = simulate(model, [0.1], [0.0, 0.0], 3000, RngStream(9, 3))
    assert not np.array_equal(a, c)
    thin = simulate(model, [0.1], [0.0, 0.0], 3000, RngStream(9, 2), thin=10)
    assert np.array_equal(thin, a[::10])


def test_network_trajectory_stays_in_unit_box():
    th = random_nn_theta(5, 0.8, seed=4)
    model, _ = make_stochastic_nn(StochasticNNConfig(N=5, rho=0.3, theta=th))
    traj = simulate(model, th.ravel(), np.full(5, 0.5), 5000, RngStream(2))
    assert np.all(model.state_domain.contains(traj))


def test_perturbed_runs_with_one_stream_consume_identical_noise():
    model, _ = make_ar1()
    _, n1 = simulate(model, [0.3], [0.0], 2500, RngStream(4), return_noise=True)
    _, n2 = simulate(model, [0.31], [0.0], 2500, RngStream(4), return_noise=True)
    assert np.array_equal(n1, n2)


def test_noise_feed_steps_and_blocks_agree():
    model, _ = make_example2()
    a = NoiseFeed(model, [RngStream(1, 0), RngStream(1, 1)])
    b = NoiseFeed(model, [RngStream(1, 0), RngStream(1, 1)])
    one = np.stack([a.next() for _ in range(NOISE_CHUNK + 50)])
    blocks = np.concatenate([b.next_block(700), b.next_block(NOISE_CHUNK + 50 - 700)])
    assert np.array_equal(one, blocks)


def test_noise_feed_chain_map_shares_streams():
    model, _ = make_ar1()
    feed = NoiseFeed(model, [RngStream(1, 0), RngStream(1, 1)], chain_map=[0, 0, 1, 1])
    xi = feed.next_block(10)
    assert np.array_equal(xi[:, 0], xi[:, 1])
    assert np.array_equal(xi[:, 2], xi[:, 3])
    assert not np.array_equal(xi[:, 0], xi[:, 2])


def test_state_blocks_match_simulate():
    model, _ = make_example2()
    feed = NoiseFeed(model, [RngStream(6)])
    states = np.concatenate([s for _, s in state_blocks(model, np.array([0.1]),
                                                          np.zeros((1, 2)), 2100, feed)])
    traj = simulate(model, [0.1], [0.0, 0.0], 2100, RngStream(6))
    assert np.array_equal(states[:, 0], traj[1:])


def test_fork_is_distinct_from_plain_streams():
    base = RngStream(3, 0)
    forked = base.fork(0).generator.random(4)
    for sid in range(4):
        assert not np.array_equal(forked, RngStream(3, sid).generator.random(4))
    assert np.array_equal(forked, RngStream(3, 0).fork(0).generator.random(4))


def test_box_sampling_and_validation():
    box = Box([0.0, -1.0], [1.0, 1.0])
    pts = box.sample(np.random.default_rng(0), 100)
    assert np.all(box.contains(pts))
    with pytest.raises(ValueError):
        Box([1.0], [0.0])


@pytest.mark.property
def test_cost_gradients_match_finite_differences(rng):
    xs = rng.normal(size=(10, 3))
    for cost in (coordinate(0), coordinate(2), quadratic()):
        rep = validate_cost(cost, xs)
        assert rep["ok"], rep
        assert rep["grad"] < 1e-5


def test_missing_hessians_are_reported():
    class NoHess(SystemModel):
        state_dim = param_dim = 1

    m = NoHess()
    assert not m.has_hessians
    with pytest.raises(NotImplementedError):
        m.hess_xx(np.zeros(1), None, np.zeros(1))
