import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncpr import diffcore as dc
from ncpr.neural import MlpParams, cpnn_forward, mlp_init
from ncpr.plant import Pendulum, Unicycle, rk4_step
from ncpr.pmp_loss import (
    CostSpec,
    Discounted,
    PlantEnv,
    RolloutResult,
    Uniform,
    clamp_controls,
    controls_from_prediction,
    loss_components,
    reg_discounted,
    reg_uniform,
    stage_loss,
    terminal_loss,
    total_loss,
    training_rollout,
)
from ncpr.qp import BoxConstraint


def pendulum_spec(horizon=20, reg=Uniform(0.1)):
    return CostSpec(np.diag([100.0, 100.0]), np.eye(1), np.diag([1000.0, 1000.0]), horizon, 0.05, reg)


def unicycle_spec(horizon=30):
    return CostSpec(np.diag([10.0] * 3), np.eye(2), np.diag([500.0] * 3), horizon, 0.05, Discounted(0.99))


@pytest.mark.parametrize("R, row, expected", [
    (np.eye(2), [2.0, -16.0], [-1.0, 8.0]),
    (np.eye(2), [0.0, 0.0], [0.0, 0.0]),
    (np.array([[2.0]]), [4.0], [-1.0]),
])
def test_controls_from_prediction(R, row, expected):
    U = controls_from_prediction(np.array([row, row]), R)
    np.testing.assert_allclose(U, [expected, expected])


def test_clamp_controls():
    np.testing.assert_array_equal(clamp_controls(np.array([[-3.0]]), BoxConstraint.symmetric(2.0)), [[-2.0]])
    np.testing.assert_array_equal(clamp_controls(np.array([[0.5]]), BoxConstraint.symmetric(2.0)), [[0.5]])
    box = BoxConstraint.symmetric(1.0, 4.0)
    np.testing.assert_array_equal(clamp_controls(np.array([[1.5, -8.0]]), box), [[1.0, -4.0]])
    with pytest.raises(ValueError):
        clamp_controls(np.zeros((1, 1)), BoxConstraint.unbounded(1))


def test_rollout_from_equilibrium():
    roll = training_rollout(np.zeros(2), np.zeros((5, 1)), Pendulum(), 0.05)
    assert len(roll.states) == 6 and len(roll.controls) == 5
    for z in roll.states:
        np.testing.assert_array_equal(z, 0.0)


def test_rollout_single_step_is_rk4():
    z, U = np.array([0.3, -0.2]), np.array([[0.7]])
    roll = training_rollout(z, U, PlantEnv(Pendulum()), 0.05, 1)
    np.testing.assert_array_equal(roll.states[1], rk4_step(Pendulum(), z, U[0], 0.05))


def test_rollout_unicycle_straight_line():
    roll = training_rollout(np.zeros(3), np.array([[1.0, 0.0]]), Unicycle(), 0.05)
    np.testing.assert_allclose(roll.states[1], [0.05, 0.0, 0.0], atol=1e-15)


def test_rollout_length_mismatch():
    with pytest.raises(ValueError):
        training_rollout(np.zeros(2), np.zeros((3, 1)), Pendulum(), 0.05, 4)


def test_rollout_result_invariant():
    with pytest.raises(ValueError):
        RolloutResult([np.zeros(2)], [np.zeros(1)])


def test_stage_loss_examples():
    zero = RolloutResult([np.zeros(2)] * 3, [np.zeros(1)] * 2)
    assert stage_loss(zero, np.eye(2), np.eye(1)) == 0.0
    one = RolloutResult([np.array([1.0, 0.0]), np.zeros(2)], [np.zeros(1)])
    assert stage_loss(one, np.diag([100.0, 100.0]), np.eye(1)) == 100.0
    two = RolloutResult([np.array([1.0, 2.0]), np.array([-1.0, 0.5]), np.array([9.0, 9.0])],
                        [np.array([3.0]), np.array([-2.0])])
    Q, R = np.diag([2.0, 3.0]), np.array([[0.5]])
    hand = (2 * 1 + 3 * 4) + (2 * 1 + 3 * 0.25) + 0.5 * 9 + 0.5 * 4
    assert stage_loss(two, Q, R) == pytest.approx(hand, rel=1e-15)


def test_terminal_loss_examples():
    assert terminal_loss(np.zeros(3), np.diag([500.0] * 3)) == 0.0
    assert terminal_loss(np.array([0.1, 0.0, 0.0]), np.diag([500.0] * 3)) == pytest.approx(5.0, rel=1e-14)
    assert terminal_loss(np.array([0.0, 0.2]), np.diag([1000.0, 1000.0])) == pytest.approx(40.0, rel=1e-14)


def test_reg_uniform_examples():
    assert reg_uniform(np.zeros((3, 2)), 0.1) == 0.0
    pred = np.array([[1.0, -2.0], [3.0, 0.0]])
    assert reg_uniform(pred, 0.1) == pytest.approx(0.6, rel=1e-15)
    assert reg_uniform(2 * pred, 0.1) == pytest.approx(2 * reg_uniform(pred, 0.1), rel=1e-15)


def test_reg_discounted_examples():
    assert reg_discounted(np.array([[1.0, -1.0]]), 0.99) == pytest.approx(1.98, rel=1e-15)
    pred = np.array([[1.0, -2.0], [0.5, 0.5], [0.0, 3.0]])
    assert reg_discounted(pred, 1.0) == pytest.approx(3.0 + 1.0 + 3.0, rel=1e-15)
    assert reg_discounted(np.array([[1.0], [-1.0]]), 0.5) == pytest.approx(0.75, rel=1e-15)


def test_later_rows_weigh_more():
    a = reg_discounted(np.array([[1.0], [0.0]]), 0.9)
    b = reg_discounted(np.array([[0.0], [1.0]]), 0.9)
    assert b > a


def test_cost_spec_validation():
    with pytest.raises(ValueError):
        CostSpec(np.eye(2), np.zeros((1, 1)), np.eye(2), 5, 0.05, Uniform(0.1))
    with pytest.raises(ValueError):
        CostSpec(-np.eye(2), np.eye(1), np.eye(2), 5, 0.05, Uniform(0.1))
    with pytest.raises(ValueError):
        CostSpec(np.eye(2), np.eye(1), np.eye(2), 0, 0.05, Uniform(0.1))
    with pytest.raises(ValueError):
        Discounted(1.5)


def _zero_net(p, n, q):
    params = mlp_init(p, n, q, (8,))
    return MlpParams.from_arrays([np.zeros_like(a) for a in params.arrays()], params)


def test_zero_net_at_origin_has_zero_loss():
    assert total_loss(np.zeros(2), _zero_net(2, 20, 1), Pendulum(), pendulum_spec()) == 0.0


def test_additivity_bitwise():
    params = mlp_init(3, 30, 2, (16, 16), seed=1)
    for box in (None, BoxConstraint.symmetric(1.0, 4.0)):
        parts = loss_components(np.array([0.5, -1.0, 1.2]), params, Unicycle(), unicycle_spec(), box)
        total = total_loss(np.array([0.5, -1.0, 1.2]), params, Unicycle(), unicycle_spec(), box)
        assert total == (parts["stage"] + parts["terminal"]) + parts["reg"]


def test_clamped_controls_enter_stage_loss():
    params = mlp_init(2, 20, 1, (8,), seed=0)
    params = MlpParams.from_arrays([a * 20 for a in params.arrays()], params)
    box = BoxConstraint.symmetric(0.1)
    parts = loss_components(np.array([1.0, 1.0]), params, Pendulum(), pendulum_spec(), box)
    assert all(abs(float(u[0])) <= 0.1 for u in parts["rollout"].controls)


def test_weight_gradient_matches_finite_differences():
    params = mlp_init(2, 20, 1, (8, 8), seed=2)
    spec, z = pendulum_spec(), np.array([0.6, -0.3])
    k = 2

    def f(W):
        arrs = params.arrays()
        if isinstance(W, dc.Var):
            leaves = [W.tape.const(a) for a in arrs]
            leaves[k] = W
            return total_loss(z, params, Pendulum(), spec, None, W.tape, leaves)
        arrs[k] = np.asarray(W)
        return total_loss(z, MlpParams.from_arrays(arrs, params), Pendulum(), spec)

    assert dc.grad_check(f, params.arrays()[k]) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_components_scale_linearly(seed, c):
    rng = np.random.default_rng(seed)
    spec = pendulum_spec(6)
    roll = RolloutResult([rng.normal(size=2) for _ in range(7)], [rng.normal(size=1) for _ in range(6)])
    pred = rng.normal(size=(6, 1))
    big = spec.scaled(c)
    assert stage_loss(roll, big.Q, big.R) == pytest.approx(c * stage_loss(roll, spec.Q, spec.R), rel=1e-12)
    assert terminal_loss(roll.states[-1], big.S) == pytest.approx(c * terminal_loss(roll.states[-1], spec.S), rel=1e-12)
    assert reg_uniform(pred, big.regularizer.beta) == pytest.approx(c * reg_uniform(pred, spec.regularizer.beta), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scaled_cost_scales_loss_at_matching_prediction(seed, c):
    # co-states scale with the cost, so the output layer is scaled too; the
    # controls -1/2 (cR)^-1 (c P) are unchanged and the L1 term is degree one
    params = mlp_init(2, 10, 1, (8,), seed=seed)
    spec = pendulum_spec(10)
    arrs = params.arrays()
    arrs[-2], arrs[-1] = arrs[-2] * c, arrs[-1] * c
    big_params = MlpParams.from_arrays(arrs, params)
    big = CostSpec(spec.Q * c, spec.R * c, spec.S * c, 10, 0.05, spec.regularizer)
    z = np.random.default_rng(seed).uniform(-2, 2, size=2)
    base = total_loss(z, params, Pendulum(), spec)
    assert total_loss(z, big_params, Pendulum(), big) == pytest.approx(c * base, rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_loss_non_negative(seed, constrained):
    rng = np.random.default_rng(seed)
    params = mlp_init(3, 8, 2, (8,), seed=seed)
    spec = CostSpec(np.diag([10.0] * 3), np.eye(2), np.diag([500.0] * 3), 8, 0.05, Discounted(0.99))
    box = BoxConstraint.symmetric(1.0, 4.0) if constrained else None
    assert total_loss(rng.uniform(-2, 2, size=3), params, Unicycle(), spec, box) >= 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_stationarity_of_extracted_controls(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2))
    R = A @ A.T + 0.5 * np.eye(2)
    pred = rng.normal(scale=5.0, size=(4, 2))
    U = controls_from_prediction(pred, R)
    for u, row in zip(U, pred):
        assert np.max(np.abs(2 * R @ u + row)) <= 1e-10


def test_gradient_flows_through_rollout():
    # the Q term only sees controls through the states, so a nonzero gradient
    # with R = 0-like weighting shows the rollout is differentiated
    params = mlp_init(2, 5, 1, (4,), seed=0)
    spec = CostSpec(np.eye(2), 1e-9 * np.eye(1), np.zeros((2, 2)), 5, 0.05, Uniform(1e-12))
    tape = dc.Tape()
    leaves = [tape.var(a) for a in params.arrays()]
    loss = total_loss(np.array([1.0, 0.0]), params, Pendulum(), spec, None, tape, leaves)
    g = tape.backward(loss)
    assert np.max(np.abs(g[leaves[-1]])) > 1e-6
    assert cpnn_forward(params, np.zeros(2)).shape == (5, 1)
