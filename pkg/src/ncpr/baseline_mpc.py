"""Receding-horizon baseline: single shooting with projected Adam.

Each call minimizes

    sum_{i<n} (e_i^T Q e_i + u_i^T R u_i) + e_n^T S e_n,   e_i = z_i - z_ref,

over a box-feasible control sequence, with states from an on-tape RK4
rollout. A trial iterate whose cost exceeds the current one is rejected, the
step size halved and the Adam moments restarted, so accepted costs never
increase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .plant import DivergenceError, PlantModel, rk4_step
from .pmp_loss import CostSpec, RolloutResult, stage_loss, terminal_loss
from .qp import BoxConstraint

__all__ = ["MpcConfig", "MpcResult", "MpcFailure", "mpc_cost", "mpc_solve", "MpcController", "mpc_controller"]


class MpcFailure(RuntimeError):
    """Cost stayed non-finite after one reinitialization."""


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 30
    max_iter: int = 300
    step_size: float = 0.05
    tol: float = 1e-8
    warm_start: bool = True
    min_step: float = 1e-10

    def __post_init__(self) -> None:
        if int(self.horizon) < 1:
            raise ValueError("horizon must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if int(self.max_iter) < 1 or not self.step_size > 0:
            raise ValueError("max_iter and step_size must be positive")


@dataclass
class MpcResult:
    controls: np.ndarray
    cost: float
    iterations: int
    accepted_costs: list[float] = field(default_factory=list)
    converged: bool = False


def mpc_cost(model: PlantModel, spec: CostSpec, z, U, z_ref=None, tape: dc.Tape | None = None):
    """Single-shooting cost of control matrix ``U`` (``n x q``) from ``z``.

    With a tape, ``U`` is registered as a gradient leaf and the pair
    ``(cost Var, U Var)`` is returned; otherwise the plain cost.
    """
    z = np.asarray(z, dtype=np.float64)
    z_ref = np.zeros_like(z) if z_ref is None else np.asarray(z_ref, dtype=np.float64)
    Uv = tape.var(U) if tape is not None else np.asarray(U, dtype=np.float64)
    n = dc._shape(Uv)[0]
    x = z
    errors = [z - z_ref]
    rows = []
    for i in range(n):
        u = dc.row(Uv, i)
        x = rk4_step(model, x, u, spec.dt)
        errors.append(dc.sub(x, z_ref))
        rows.append(u)
    roll = RolloutResult(errors, rows)
    cost = dc.add(stage_loss(roll, spec.Q, spec.R), terminal_loss(errors[-1], spec.S))
    return (cost, Uv) if tape is not None else cost


def _cost_and_grad(model, spec, z, U, z_ref):
    tape = dc.Tape()
    try:
        cost, Uv = mpc_cost(model, spec, z, U, z_ref, tape)
    except DivergenceError:
        return float("inf"), None
    val = float(cost.value)
    if not np.isfinite(val):
        return val, None
    g = np.asarray(tape.backward(cost)[Uv])
    if not np.all(np.isfinite(g)):
        return float("inf"), None
    return val, g


def mpc_solve(model: PlantModel, spec: CostSpec, box: BoxConstraint, z, warm=None,
              config: MpcConfig = MpcConfig(), z_ref=None) -> MpcResult:
    """Projected-Adam minimization of the horizon cost from state ``z``."""
    n, q = int(config.horizon), model.q
    if box.q != q:
        raise ValueError(f"box has {box.q} channels, plant has {q}")
    U = np.zeros((n, q)) if warm is None else np.array(warm, dtype=np.float64).reshape(n, q)
    U = box.clip(U)
    cost, grad = _cost_and_grad(model, spec, z, U, z_ref)
    if grad is None:
        U = box.clip(np.zeros((n, q)))
        cost, grad = _cost_and_grad(model, spec, z, U, z_ref)
        if grad is None:
            raise MpcFailure("non-finite MPC cost after reinitialization")
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(U)
    v = np.zeros_like(U)
    t = 0
    step = config.step_size
    accepted = [cost]
    converged = False
    it = 0
    while it < config.max_iter:
        it += 1
        t += 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        direction = (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        trial = box.clip(U - step * direction)
        c_new, g_new = _cost_and_grad(model, spec, z, trial, z_ref)
        if g_new is None or c_new > cost:
            # restart the moments so the retry follows the current gradient
            step *= 0.5
            m[:] = 0.0
            v[:] = 0.0
            t = 0
            if step < config.min_step:
                converged = True
                break
            continue
        decrease = cost - c_new
        U, cost, grad = trial, c_new, g_new
        accepted.append(cost)
        step = min(config.step_size, step * 1.25)
        if decrease < config.tol:
            converged = True
            break
    return MpcResult(U, cost, it, accepted, converged)


class MpcController:
    """Applies element 0 of each solve; keeps the warm-start buffer."""

    def __init__(self, model: PlantModel, spec: CostSpec, box: BoxConstraint, config: MpcConfig = MpcConfig()) -> None:
        self.model, self.spec, self.box, self.config = model, spec, box, config
        self.history: list[MpcResult] = []
        self._warm: np.ndarray | None = None

    def reset(self) -> None:
        self.history = []
        self._warm = None

    def __call__(self, z, z_ref) -> np.ndarray:
        warm = self._warm if self.config.warm_start else None
        res = mpc_solve(self.model, self.spec, self.box, z, warm, self.config, z_ref)
        self.history.append(res)
        self._warm = np.vstack([res.controls[1:], res.controls[-1:]])
        return res.controls[0].copy()


def mpc_controller(model: PlantModel, spec: CostSpec, box: BoxConstraint, config: MpcConfig = MpcConfig()) -> MpcController:
    return MpcController(model, spec, box, config)
