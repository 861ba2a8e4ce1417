"""Self-supervised training objective built from the network's prediction.

For a sample state ``z_k`` the prediction ``P`` (``n x q``) yields horizon
controls ``u_i = -1/2 R^{-1} P[i]^T``, optionally clamped into a box. The plant
is rolled forward with those controls and the loss is

    sum_i (z_i^T Q z_i + u_i^T R u_i) + z_{k+n}^T S z_{k+n} + reg(P),

with ``reg`` either ``beta * sum |P_ij|`` or ``sum_i gamma^(n-i) |P[i]|_1``
(rows indexed from 0, so the last row weighs most).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import diffcore as dc
from .neural import MlpParams, cpnn_forward
from .plant import PlantModel, rk4_step
from .qp import BoxConstraint, check_spd

__all__ = [
    "CostSpec",
    "Uniform",
    "Discounted",
    "RolloutResult",
    "DifferentiableEnv",
    "PlantEnv",
    "controls_from_prediction",
    "clamp_controls",
    "training_rollout",
    "stage_loss",
    "terminal_loss",
    "reg_uniform",
    "reg_discounted",
    "regularization",
    "total_loss",
    "loss_components",
]


@dataclass(frozen=True)
class Uniform:
    beta: float

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


@dataclass(frozen=True)
class Discounted:
    gamma: float
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.weight > 0:
            raise ValueError(f"weight must be > 0, got {self.weight}")


def _psd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
        raise ValueError(f"{name} must be square symmetric, got shape {M.shape}")
    if np.linalg.eigvalsh(M).min() < -1e-12 * max(1.0, np.abs(M).max()):
        raise ValueError(f"{name} must be positive semi-definite")
    return M


@dataclass(frozen=True)
class CostSpec:
    """Quadratic regulator weights, horizon and regularizer."""

    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    horizon: int
    dt: float
    regularizer: Uniform | Discounted

    def __post_init__(self) -> None:
        object.__setattr__(self, "Q", _psd(self.Q, "Q"))
        object.__setattr__(self, "S", _psd(self.S, "S"))
        object.__setattr__(self, "R", check_spd(self.R))
        if self.Q.shape != self.S.shape:
            raise ValueError(f"Q {self.Q.shape} and S {self.S.shape} differ in shape")
        if int(self.horizon) < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not isinstance(self.regularizer, (Uniform, Discounted)):
            raise TypeError("regularizer must be Uniform or Discounted")

    @property
    def p(self) -> int:
        return self.Q.shape[0]

    @property
    def q(self) -> int:
        return self.R.shape[0]

    def scaled(self, c: float) -> CostSpec:
        """All weights (Q, R, S and the regularizer's) multiplied by ``c``."""
        reg = self.regularizer
        if isinstance(reg, Uniform):
            reg = Uniform(reg.beta * c)
        else:
            reg = Discounted(reg.gamma, reg.weight * c)
        return CostSpec(self.Q * c, self.R * c, self.S * c, self.horizon, self.dt, reg)


@dataclass
class RolloutResult:
    states: list
    controls: list

    def __post_init__(self) -> None:
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("need exactly one more state than controls")


class DifferentiableEnv(Protocol):
    """What the trainer needs from a simulator: a tape-compatible step."""

    p: int
    q: int

    def step(self, z, u, dt: float): ...


class PlantEnv:
    """Wraps a :class:`PlantModel` with RK4 as a differentiable environment."""

    def __init__(self, model: PlantModel) -> None:
        self.model = model
        self.p, self.q = model.p, model.q

    def step(self, z, u, dt: float):
        return rk4_step(self.model, z, u, dt)


def controls_from_prediction(pred, R):
    """``u_i = -1/2 R^{-1} pred[i]^T`` for every row, as an ``n x q`` matrix."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    gain = -0.5 * np.linalg.inv(R).T
    if dc._shape(pred)[1:] != (R.shape[0],):
        raise ValueError(f"prediction shape {dc._shape(pred)} incompatible with R {R.shape}")
    return dc.matmul(pred, gain)


def clamp_controls(U, box: BoxConstraint):
    """Per-channel clamp of an ``n x q`` control matrix."""
    if not box.is_finite:
        raise ValueError("training clamp requires finite bounds")
    return dc.clamp(U, box.lower, box.upper)


def training_rollout(z_k, U, env, dt: float, n: int | None = None) -> RolloutResult:
    """Roll ``env`` forward from ``z_k`` under the rows of ``U``."""
    if isinstance(env, PlantModel):
        env = PlantEnv(env)
    rows = dc._shape(U)[0]
    if n is None:
        n = rows
    if rows != n:
        raise ValueError(f"expected {n} controls, got {rows}")
    states = [z_k]
    controls = []
    z = z_k
    for i in range(n):
        u = dc.row(U, i)
        z = env.step(z, u, dt)
        states.append(z)
        controls.append(u)
    return RolloutResult(states, controls)


def stage_loss(rollout: RolloutResult, Q, R):
    Z = dc.stack(rollout.states[:-1])
    U = dc.stack(rollout.controls)
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    return dc.add(dc.total(dc.mul(dc.matmul(Z, Q), Z)), dc.total(dc.mul(dc.matmul(U, R), U)))


def terminal_loss(z_final, S):
    return dc.dot(z_final, dc.matvec(np.atleast_2d(S), z_final))


def reg_uniform(pred, beta: float):
    return dc.scale(dc.total(dc.absolute(pred)), beta)


def reg_discounted(pred, gamma: float):
    n = dc._shape(pred)[0]
    weights = np.asarray(gamma, dtype=np.float64) ** np.arange(n, 0, -1)
    per_row = dc.matvec(dc.absolute(pred), np.ones(dc._shape(pred)[1]))
    return dc.dot(per_row, weights)


def regularization(pred, reg: Uniform | Discounted):
    if isinstance(reg, Uniform):
        return reg_uniform(pred, reg.beta)
    out = reg_discounted(pred, reg.gamma)
    return out if reg.weight == 1.0 else dc.scale(out, reg.weight)


def loss_components(z_k, params: MlpParams, env, spec: CostSpec, box: BoxConstraint | None = None,
                    tape: dc.Tape | None = None, leaves=None) -> dict:
    """Stage, terminal and regularization losses plus the rollout.

    ``z_k`` is a plain state; everything downstream of the network is on
    ``tape`` when one is given.
    """
    pred = cpnn_forward(params, np.asarray(z_k, dtype=np.float64), tape, leaves)
    if dc._shape(pred) != (spec.horizon, spec.q):
        raise ValueError(f"network predicts {dc._shape(pred)}, spec needs {(spec.horizon, spec.q)}")
    U = controls_from_prediction(pred, spec.R)
    if box is not None:
        U = clamp_controls(U, box)
    roll = training_rollout(np.asarray(z_k, dtype=np.float64), U, env, spec.dt, spec.horizon)
    return {
        "pred": pred,
        "rollout": roll,
        "stage": stage_loss(roll, spec.Q, spec.R),
        "terminal": terminal_loss(roll.states[-1], spec.S),
        "reg": regularization(pred, spec.regularizer),
    }


def total_loss(z_k, params: MlpParams, env, spec: CostSpec, box: BoxConstraint | None = None,
               tape: dc.Tape | None = None, leaves=None):
    """Stage + terminal + regularization (a Var when ``tape`` is given)."""
    parts = loss_components(z_k, params, env, spec, box, tape, leaves)
    return dc.add(dc.add(parts["stage"], parts["terminal"]), parts["reg"])
