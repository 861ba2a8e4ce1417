import numpy as np
import pytest

from ncpr.baseline_mpc import MpcConfig, MpcController, mpc_controller, mpc_cost, mpc_solve
from ncpr.plant import LinearPlant, Pendulum, Unicycle
from ncpr.pmp_loss import CostSpec, Discounted, Uniform
from ncpr.qp import BoxConstraint
from ncpr.regulator import closed_loop

DT = 0.5
INTEGRATOR = LinearPlant([[0.0]], [[1.0]])
INT_SPEC = CostSpec(np.eye(1), np.eye(1), np.zeros((1, 1)), 2, DT, Uniform(0.1))
WIDE = BoxConstraint.symmetric(10.0)


def grid_oracle(z0, points=2001, lim=2.0):
    u0, u1 = np.meshgrid(np.linspace(-lim, lim, points), np.linspace(-lim, lim, points), indexing="ij")
    z1 = z0 + DT * u0  # RK4 is exact for zdot = u
    cost = z0**2 + u0**2 + z1**2 + u1**2
    i = np.unravel_index(np.argmin(cost), cost.shape)
    return cost[i], np.array([u0[i], u1[i]])


@pytest.mark.parametrize("z0", [1.0, -1.7, 0.3])
def test_scalar_integrator_matches_grid(z0):
    res = mpc_solve(INTEGRATOR, INT_SPEC, WIDE, np.array([z0]), config=MpcConfig(horizon=2, max_iter=2000))
    f_grid, u_grid = grid_oracle(z0)
    assert abs(res.cost - f_grid) <= 1e-4
    np.testing.assert_allclose(res.controls[:, 0], u_grid, atol=2e-3)
    # analytic minimizer of the same quadratic
    assert res.controls[0, 0] == pytest.approx(-DT * z0 / (1 + DT**2), abs=1e-3)


def test_cost_function_on_and_off_tape():
    from ncpr import diffcore as dc
    U = np.array([[0.3], [-0.2]])
    plain = mpc_cost(INTEGRATOR, INT_SPEC, np.array([1.0]), U)
    z1 = 1.0 + DT * 0.3
    assert plain == pytest.approx(1.0 + 0.09 + z1**2 + 0.04, rel=1e-14)
    tape = dc.Tape()
    cost, Uv = mpc_cost(INTEGRATOR, INT_SPEC, np.array([1.0]), U, tape=tape)
    assert cost.value == plain
    g = tape.backward(cost)[Uv]
    np.testing.assert_allclose(g, [[2 * 0.3 + 2 * z1 * DT], [-0.4]], rtol=1e-12)


def test_zero_state_gives_zero_sequence():
    spec = CostSpec(np.diag([10.0] * 3), np.eye(2), np.diag([500.0] * 3), 10, 0.05, Discounted(0.99))
    res = mpc_solve(Unicycle(), spec, BoxConstraint.symmetric(1.0, 4.0), np.zeros(3), config=MpcConfig(horizon=10))
    assert np.max(np.abs(res.controls)) <= 1e-12 and res.cost <= 1e-20


PEND = CostSpec(np.diag([100.0, 100.0]), np.eye(1), np.diag([1000.0, 1000.0]), 10, 0.05, Uniform(0.1))
PBOX = BoxConstraint.symmetric(10.0)


def test_accepted_costs_monotone_and_box_feasible():
    res = mpc_solve(Pendulum(), PEND, BoxConstraint.symmetric(2.0), np.array([2.5, 1.0]), config=MpcConfig(horizon=10))
    costs = res.accepted_costs
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert np.all(np.abs(res.controls) <= 2.0)
    assert res.cost == costs[-1]


def test_first_element_applied():
    ctrl = mpc_controller(Pendulum(), PEND, PBOX, MpcConfig(horizon=10))
    u = ctrl(np.array([1.0, 0.0]), np.zeros(2))
    np.testing.assert_array_equal(u, ctrl.history[-1].controls[0])


def test_warm_start_saves_iterations():
    z0 = np.array([1.2, -0.5])
    runs = {}
    for warm in (True, False):
        ctrl = MpcController(Pendulum(), PEND, PBOX, MpcConfig(horizon=10, warm_start=warm))
        closed_loop(ctrl, Pendulum(), PEND, z0, duration=0.3)
        runs[warm] = [h.iterations for h in ctrl.history]
    assert runs[True][0] == runs[False][0]
    assert sum(runs[True][1:]) < sum(runs[False][1:])


def test_closed_loop_controls_in_box():
    box = BoxConstraint.symmetric(1.0)
    ctrl = MpcController(Pendulum(), PEND, box, MpcConfig(horizon=10, max_iter=50))
    log = closed_loop(ctrl, Pendulum(), PEND, np.array([2.0, 0.0]), duration=0.5)
    assert np.all(log.controls >= -1.0) and np.all(log.controls <= 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        MpcConfig(tol=0.0)
    with pytest.raises(ValueError):
        mpc_solve(Pendulum(), PEND, BoxConstraint.symmetric(1.0, 1.0), np.zeros(2), config=MpcConfig(horizon=10))
