"""Oracle suites behind ``ncpr verify``.

Each suite compares a component against an independent reference
(finite differences, dense-grid brute force, a fine-step integrator, hand
arithmetic) and reports the largest error observed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .neural import cpnn_forward, mlp_init
from .plant import Pendulum, rk4_step
from .pmp_loss import CostSpec, Uniform, total_loss
from .qp import BoxConstraint, QpProblem, kkt_residual, qp_objective, solve_box_qp
from .regulator import msd

__all__ = [
    "SuiteResult",
    "brute_force_box_qp",
    "random_qp_instance",
    "random_composition",
    "pendulum_reference",
    "rk4_order_ratio",
    "suite_gradients",
    "suite_qp",
    "suite_rk4_order",
    "suite_msd",
    "run_all",
]


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<14} max_error={self.max_error:.3e}  tol={self.tolerance:.1e}  {self.detail}"


def _grid_min(R, c, lo, hi, points):
    """Minimum of u^T R u + c^T u over a ``points``-per-dim grid on [lo, hi]."""
    axes = [np.linspace(a, b, points) for a, b in zip(lo, hi)]
    if len(axes) == 1:
        u = axes[0]
        f = R[0, 0] * u * u + c[0] * u
        i = int(np.argmin(f))
        return f[i], np.array([u[i]]), [u[1] - u[0]]
    # Per grid row the objective is a convex parabola in u1, so the row's grid
    # minimum sits at one of the two grid points bracketing its vertex. This
    # returns exactly the full points x points grid minimum.
    u0, u1 = axes
    h1 = u1[1] - u1[0]
    vertex = -(c[1] + 2.0 * R[0, 1] * u0) / (2.0 * R[1, 1])
    pos = (vertex - u1[0]) / h1
    cand = np.stack([np.floor(pos), np.floor(pos) + 1.0]).clip(0, points - 1).astype(int)
    U1 = u1[cand]
    f = R[0, 0] * u0 * u0 + 2.0 * R[0, 1] * u0 * U1 + R[1, 1] * U1 * U1 + c[0] * u0 + c[1] * U1
    k, i = np.unravel_index(int(np.argmin(f)), f.shape)
    return f[k, i], np.array([u0[i], U1[k, i]]), [u0[1] - u0[0], h1]


def brute_force_box_qp(R, c, box: BoxConstraint, points: int = 2001, levels: int = 2) -> tuple[float, np.ndarray]:
    """Dense-grid minimum (q <= 2), refined on a second grid around the best cell."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    if c.size > 2:
        raise ValueError("brute force supports q <= 2")
    lo, hi = box.lower.copy(), box.upper.copy()
    best_f, best_u = math.inf, None
    for _ in range(levels):
        f, u, h = _grid_min(R, c, lo, hi, points)
        if f < best_f:
            best_f, best_u = f, u
        lo = np.maximum(box.lower, best_u - np.array(h))
        hi = np.minimum(box.upper, best_u + np.array(h))
    return float(best_f), best_u


def random_qp_instance(rng: np.random.Generator):
    """q in {1, 2}; SPD R with eigenvalues in [0.5, 5]; c ~ N(0, 5); box containing a random interval."""
    q = int(rng.integers(1, 3))
    lam = rng.uniform(0.5, 5.0, size=q)
    if q == 2:
        a = rng.uniform(0, np.pi)
        V = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        R = V @ np.diag(lam) @ V.T
        R = 0.5 * (R + R.T)
    else:
        R = np.diag(lam)
    c = rng.normal(0.0, 5.0, size=q)
    centre = rng.normal(0.0, 2.0, size=q)
    half = rng.uniform(0.1, 4.0, size=q)
    return R, c, BoxConstraint(centre - half, centre + half)


def suite_qp(instances: int = 200, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst_obj, worst_kkt = 0.0, 0.0
    for _ in range(instances):
        R, c, box = random_qp_instance(rng)
        u = solve_box_qp(QpProblem(R, c, box), tol=tol)
        f_ref, _ = brute_force_box_qp(R, c, box)
        worst_obj = max(worst_obj, abs(qp_objective(R, c, u) - f_ref))
        worst_kkt = max(worst_kkt, kkt_residual(R, c, box, u))
    ok = worst_obj <= 1e-6 and worst_kkt <= 1e-10
    return SuiteResult("qp_bruteforce", worst_obj, 1e-6, ok, f"instances={instances} max_kkt={worst_kkt:.1e}")


_UNARY = ("tanh", "sin", "cos", "square")
_BINARY = ("add", "sub", "mul")


def random_composition(rng: np.random.Generator, size: int = 8, dim: int = 3):
    """A random scalar function of a ``dim`` vector built from the tape ops."""
    mats = [rng.normal(scale=0.7, size=(dim, dim)) for _ in range(2)]
    program = [(int(rng.integers(0, 4)), int(rng.integers(0, 64)), int(rng.integers(0, 64)),
                float(rng.uniform(-2, 2))) for _ in range(size)]

    def f(x):
        nodes = [x]
        for kind, i, j, c in program:
            a, b = nodes[i % len(nodes)], nodes[j % len(nodes)]
            if kind == 0:
                nodes.append(getattr(dc, _UNARY[i % len(_UNARY)])(dc.scale(a, c)))
            elif kind == 1:
                nodes.append(getattr(dc, _BINARY[j % len(_BINARY)])(a, b))
            elif kind == 2:
                nodes.append(dc.div(a, 2.0 + dc.square(b)))
            else:
                nodes.append(dc.tanh(dc.matvec(mats[i % 2], a)))
        return dc.add(dc.total(nodes[-1]), dc.dot(nodes[len(nodes) // 2], nodes[-1]))

    return f


def suite_gradients(trials: int = 10, seed: int = 0) -> SuiteResult:
    """``trials`` random compositions plus an n = 20 pendulum rollout loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        f = random_composition(rng, size=int(rng.integers(3, 13)))
        worst = max(worst, dc.grad_check(f, rng.uniform(-1, 1, size=3)))
    # pendulum rollout loss w.r.t. the first-layer bias of a small network
    model = Pendulum()
    spec = CostSpec(np.diag([100.0, 100.0]), np.eye(1), np.diag([1000.0, 1000.0]), 20, 0.05, Uniform(0.1))
    params = mlp_init(2, 20, 1, (8,), seed=seed)
    z = np.array([0.7, -0.4])

    def loss_of_bias(b):
        arrs = params.arrays()
        if isinstance(b, dc.Var):
            tape = b.tape
            leaves = [tape.const(a) for a in arrs]
            leaves[1] = b
            return total_loss(z, params, model, spec, None, tape, leaves)
        arrs[1] = np.asarray(b)
        return total_loss(z, type(params).from_arrays(arrs, params), model, spec)

    rel = dc.grad_check(loss_of_bias, params.biases[0] + rng.normal(scale=0.1, size=8))
    worst = max(worst, rel)
    return SuiteResult("gradients", worst, 1e-5, worst <= 1e-5, f"trials={trials + 1}")


def pendulum_reference(z0, T: float, dt: float = 1e-5, gravity: float = 9.81, length: float = 1.0) -> np.ndarray:
    """Unforced pendulum integrated with scalar RK4 at a fine step."""
    th, om = float(z0[0]), float(z0[1])
    k = -gravity / length
    for _ in range(int(round(T / dt))):
        a1, b1 = om, k * math.sin(th)
        a2, b2 = om + 0.5 * dt * b1, k * math.sin(th + 0.5 * dt * a1)
        a3, b3 = om + 0.5 * dt * b2, k * math.sin(th + 0.5 * dt * a2)
        a4, b4 = om + dt * b3, k * math.sin(th + dt * a3)
        th += dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        om += dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
    return np.array([th, om])


def rk4_order_ratio(z0=(3.14, 0.0), T: float = 1.0, dt: float = 0.05) -> float:
    model = Pendulum()
    ref = pendulum_reference(z0, T)
    errs = []
    for h in (dt, dt / 2):
        z = np.array(z0, dtype=np.float64)
        for _ in range(int(round(T / h))):
            z = rk4_step(model, z, np.zeros(1), h)
        errs.append(float(np.max(np.abs(z - ref))))
    return errs[0] / errs[1]


def suite_rk4_order() -> SuiteResult:
    ratio = rk4_order_ratio()
    return SuiteResult("rk4_order", abs(ratio - 16.0), 4.0, 12.0 <= ratio <= 20.0, f"ratio={ratio:.2f}")


def suite_msd() -> SuiteResult:
    err = max(abs(msd([0.0, 1.0, 4.0]) - 14.0 / 3.0), abs(msd(np.full(7, 3.0))), abs(msd(2.5 * np.arange(9.0)) - 6.25))
    return SuiteResult("msd_oracle", err, 1e-12, err <= 1e-12)


def run_all(qp_tol: float = 1e-10, qp_instances: int = 200) -> list[SuiteResult]:
    return [suite_gradients(), suite_qp(qp_instances, tol=qp_tol), suite_rk4_order(), suite_msd()]
