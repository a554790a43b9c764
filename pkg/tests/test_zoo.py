import math

import numpy as np
import pytest

from stationary_grad import (ModelConditionError, ParameterRegionError, RngStream, SensState,
                             sens_step, simulate)
from stationary_grad.costs import coordinate, cost_registry_lookup, quadratic, registered_costs
from stationary_grad.sensitivity import batch_gradient
from stationary_grad.zoo import (THETA_HALF_WIDTH_EX2, Example2Config, LinearAR1Config,
                                 StochasticNNConfig, build_model, check_example2_conditions,
                                 example2_g, make_ar1, make_example2, make_stochastic_nn,
                                 sigmoid)


# --------------------------------------------------------------------------- AR(1)

def test_ar1_step_and_derivatives():
    model, _ = make_ar1(LinearAR1Config(a=0.5, eps=0.1))
    assert model.step(np.zeros(1), np.array(0.0), np.array([0.3]))[0] == pytest.approx(0.3)
    x, xi, th = np.ones((4, 1)), np.zeros(4), np.array([0.3])
    np.testing.assert_array_equal(model.jac_x(x, xi, th), np.full((4, 1, 1), 0.5))
    np.testing.assert_array_equal(model.jac_theta(x, xi, th), np.ones((4, 1, 1)))
    for h in (model.hess_xx, model.hess_thetatheta, model.hess_xtheta):
        assert not np.any(h(x, xi, th))


def test_ar1_rejects_non_contracting_coefficient():
    with pytest.raises(ModelConditionError):
        make_ar1(LinearAR1Config(a=1.0))
    with pytest.raises(ModelConditionError):
        make_ar1(LinearAR1Config(noise="cauchy"))


@pytest.mark.parametrize("noise", ["gaussian", "uniform"])
def test_ar1_noise_has_unit_variance(noise):
    model, _ = make_ar1(LinearAR1Config(noise=noise))
    xi = model.sample_noise(np.random.default_rng(0), 200_000)
    assert xi.mean() == pytest.approx(0.0, abs=0.01)
    assert xi.var() == pytest.approx(1.0, abs=0.01)


def test_ar1_long_run_mean_matches_closed_form():
    model, _ = make_ar1(LinearAR1Config(a=0.5, eps=0.1))
    traj = simulate(model, [0.3], [0.0], 200_000, RngStream(1))[1000:, 0]
    # batch means give a standard error that accounts for autocorrelation
    means = traj[: len(traj) // 100 * 100].reshape(100, -1).mean(axis=1)
    se = means.std(ddof=1) / math.sqrt(len(means))
    assert abs(traj.mean() - model.stationary_mean([0.3])) < 3 * se
    assert model.stationary_mean([0.3]) == pytest.approx(0.6)
    assert model.stationary_second_moment([0.3]) == pytest.approx(0.36 + 0.01 / 0.75)


# --------------------------------------------------------------------------- network

def test_network_single_node_slope_at_zero():
    model, _ = make_stochastic_nn(StochasticNNConfig(N=1, rho=0.0, theta=((1.0,),)))
    J = model.jac_x(np.zeros(1), np.ones((1, 1)), np.array([1.0]))
    assert J[0, 0] == pytest.approx(0.25)


def test_network_without_edges_is_constant():
    th = np.full((3, 3), 0.5)
    model, _ = make_stochastic_nn(StochasticNNConfig(N=3, rho=1.0, theta=th, biases=(0.2, -1.0, 0.0)))
    xi = model.sample_noise(np.random.default_rng(0), 5)
    assert not xi.any()
    x = np.random.default_rng(1).random((5, 3))
    np.testing.assert_allclose(model.step(x, xi, th.ravel()), np.broadcast_to(sigmoid(np.array([0.2, -1.0, 0.0])), (5, 3)))
    assert not model.jac_x(x, xi, th.ravel()).any()


def test_network_parameter_jacobian_is_row_local():
    th = np.random.default_rng(0).uniform(-0.3, 0.3, (3, 3))
    model, _ = make_stochastic_nn(StochasticNNConfig(N=3, rho=0.5, theta=th))
    r = np.random.default_rng(2)
    J = model.jac_theta(r.random(3), model.sample_noise(r, 1)[0], th.ravel()).reshape(3, 3, 3)
    for i in range(3):
        for j in range(3):
            if i != j:
                assert not J[i, j].any()


def test_network_noise_respects_edges_and_drop_rate():
    cfg = StochasticNNConfig(N=3, rho=0.25, theta=np.zeros((3, 3)), edges=((0, 1), (1, 2), (2, 0)))
    model, _ = make_stochastic_nn(cfg)
    xi = model.sample_noise(np.random.default_rng(0), 40_000)
    assert not xi[:, ~cfg.edge_mask()].any()
    assert xi[:, 0, 1].mean() == pytest.approx(0.75, abs=0.01)


def test_network_contraction_bound_is_enforced():
    big = np.full((3, 3), 2.0)
    with pytest.raises(ParameterRegionError, match="contraction bound"):
        make_stochastic_nn(StochasticNNConfig(N=3, rho=0.5, theta=big))
    model, _ = make_stochastic_nn(StochasticNNConfig(N=3, rho=0.5, theta=np.eye(3)))
    assert model.kx_bound(np.eye(3)) == pytest.approx(0.25 * math.sqrt(1 - 0.5**9))
    assert not model.theta_in_region(big.ravel())


def test_network_joint_update_matches_closed_form():
    th = np.random.default_rng(5).uniform(-0.3, 0.3, (3, 3))
    model, _ = make_stochastic_nn(StochasticNNConfig(N=3, rho=0.5, theta=th))
    r = np.random.default_rng(6)
    x, m = r.random(3), r.normal(size=(3, 9))
    xi = model.sample_noise(r, 1)[0]
    z = sens_step(model, SensState(x, m), xi, th.ravel())
    u = (xi * th) @ x
    ds = sigmoid(u) * (1 - sigmoid(u))
    expected = np.zeros((3, 9))
    for i in range(3):
        for jk in range(9):
            j, k = divmod(jk, 3)
            expected[i, jk] = ds[i] * (sum(xi[i, l] * th[i, l] * m[l, jk] for l in range(3))
                                       + (i == j) * xi[i, k] * x[k])
    np.testing.assert_allclose(z.m, expected, atol=1e-14)


# --------------------------------------------------------------------------- example 2

def test_example2_jacobian_and_hessian():
    model, _ = make_example2()
    r = np.random.default_rng(0)
    x, xi = r.normal(size=2), r.normal(size=2)
    J = model.jac_x(x, xi, np.array([0.1]))
    np.testing.assert_allclose(J, [[0.5, 0.0], [0.5 * x[1], 0.5 * x[0]]])
    H = model.hess_xx(x, xi, np.array([0.1]))
    expected = np.zeros((2, 2, 2))
    expected[1, 0, 1] = expected[1, 1, 0] = 0.5
    np.testing.assert_array_equal(H, expected)
    assert not model.hess_thetatheta(x, xi, np.array([0.1])).any()
    assert not model.hess_xtheta(x, xi, np.array([0.1])).any()


def test_example2_sensitivity_update_matches_displayed_process():
    model, _ = make_example2()
    x, m = np.array([0.4, -0.7]), np.array([[1.3], [0.2]])
    z = sens_step(model, SensState(x, m), np.array([0.1, 0.2]), np.array([0.05]))
    assert z.m[0, 0] == pytest.approx(0.5 * 1.3 + 1)
    assert z.m[1, 0] == pytest.approx(0.5 * x[1] * 1.3 + 0.5 * x[0] * 0.2)


def test_example2_moments_and_conditions():
    model, _ = make_example2()
    assert model.Q == pytest.approx(1.0, abs=0.01)
    # E exp(4 eps |U|) for U uniform on [-1/2, 1/2] is (e^{2 eps} - 1) / (2 eps)
    eps = 0.05
    assert model.R == pytest.approx(math.sqrt((math.exp(2 * eps) - 1) / (2 * eps)), rel=1e-3)
    with pytest.raises(ModelConditionError, match="eps"):
        check_example2_conditions(Example2Config(eps=1.5))
    with pytest.raises(ModelConditionError, match="p2"):
        make_example2(Example2Config(p2=0.5))
    with pytest.raises(ModelConditionError, match=r"\(1 \+ eps\*Q\) \* R"):
        make_example2(Example2Config(eps=0.4))


def test_example2_parameter_interval():
    model, _ = make_example2()
    model.check_theta([0.99 * THETA_HALF_WIDTH_EX2])
    with pytest.raises(ParameterRegionError):
        model.check_theta([THETA_HALF_WIDTH_EX2])


def test_example2_weight_functions():
    g1, g2 = example2_g(np.array([[0.0, 0.0], [1.0, -2.0]]))
    np.testing.assert_allclose(g1, [1.0, math.exp(2) * 3])
    np.testing.assert_allclose(g2, [1.0, math.exp(2)])


def test_build_model_dispatch():
    model, weight = build_model("stochastic_nn", N=2, rho=0.5, theta=[[0.1, 0.2], [0.3, 0.4]])
    assert model.param_dim == 4 and weight.constant
    with pytest.raises(ModelConditionError):
        build_model("lorenz")


def test_zero_noise_replicates_have_zero_spread():
    model, _ = make_ar1(LinearAR1Config(eps=0.0))
    est = batch_gradient(model, [0.3], quadratic(), 5000, 100, replicates=4)
    assert np.all(est.stderr == 0)


# --------------------------------------------------------------------------- costs

def test_cost_registry():
    c = cost_registry_lookup("coordinate(0)")
    assert c.eval(np.array([3.0, 5.0])) == 3.0
    np.testing.assert_array_equal(c.grad(np.array([3.0, 5.0])), [1.0, 0.0])
    q = cost_registry_lookup("quadratic")
    assert q.eval(np.array([1.0, 2.0])) == 5.0
    np.testing.assert_array_equal(q.grad(np.array([1.0, 2.0])), [2.0, 4.0])
    np.testing.assert_array_equal(q.hess(np.array([1.0, 2.0])), 2 * np.eye(2))
    assert cost_registry_lookup("coordinate(1)").name == "coordinate(1)"
    with pytest.raises(KeyError, match="coordinate"):
        cost_registry_lookup("foo")
    assert {"coordinate", "quadratic"} <= set(registered_costs())
    assert coordinate(1).eval(np.array([[1.0, 2.0]]))[0] == 2.0


def test_ar1_compiled_advance_matches_step_loop():
    model, _ = make_ar1(LinearAR1Config(a=0.7, eps=0.3))
    r = np.random.default_rng(3)
    x, th = r.normal(size=(4, 1)), r.normal(size=(4, 1))
    xi = model.sample_noise(r, (50, 4))
    ref = [x]
    for t in range(50):
        ref.append(model.step(ref[-1], xi[t], th))
    assert np.array_equal(model.advance(x, th, xi), np.stack(ref[1:]))
