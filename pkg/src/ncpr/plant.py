"""Control-affine benchmark plants and the RK4 stepper.

All dynamics are written with :mod:`ncpr.diffcore` ops, so the same code
integrates plain numpy states (closed-loop validation) and tape-resident
states (differentiable training rollouts).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

__all__ = [
    "PlantModel",
    "Unicycle",
    "Pendulum",
    "LinearPlant",
    "DivergenceError",
    "eval_dynamics",
    "input_gain",
    "rk4_step",
    "make_plant",
]


class DivergenceError(FloatingPointError):
    """Integration produced a non-finite state."""


def _check_dims(model: PlantModel, z, u=None):
    if dc._shape(z) != (model.p,):
        raise ValueError(f"{model.name}: state must have shape ({model.p},), got {dc._shape(z)}")
    if u is not None and dc._shape(u) != (model.q,):
        raise ValueError(f"{model.name}: control must have shape ({model.q},), got {dc._shape(u)}")


class PlantModel:
    """Dynamics of the form ``zdot = f(z) + g(z) u``.

    Subclasses implement :meth:`drift` and :meth:`gain`. :meth:`dynamics`
    defaults to ``f(z) + g(z) @ u`` and may be overridden by an algebraically
    identical expression that records fewer tape nodes.
    """

    name = "plant"
    p: int
    q: int

    def drift(self, z):
        raise NotImplementedError

    def gain(self, z):
        raise NotImplementedError

    def dynamics(self, z, u):
        return dc.add(self.drift(z), dc.matvec(self.gain(z), u))

    def jacobians(self, z: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        """``(df/dz, df/du)`` at plain ``z``, ``u``; ``None`` if not provided.

        When available, :func:`rk4_step` records a whole step as one tape node.
        """
        return None


@dataclass(frozen=True)
class Unicycle(PlantModel):
    """Kinematic unicycle, state ``[x, y, theta]``, control ``[v, omega]``."""

    name = "unicycle"
    p = 3
    q = 2

    def drift(self, z):
        return np.zeros(3)

    def gain(self, z):
        th = float(dc.value_of(z)[2])
        return np.array([[math.cos(th), 0.0], [math.sin(th), 0.0], [0.0, 1.0]])

    def dynamics(self, z, u):
        if type(z) is not dc.Var and type(u) is not dc.Var:
            th, v = float(z[2]), float(u[0])
            return np.array([v * math.cos(th), v * math.sin(th), float(u[1])])
        th = dc.take(z, 2)
        v = dc.take(u, 0)
        return dc.stack([v * dc.cos(th), v * dc.sin(th), dc.take(u, 1)])

    def jacobians(self, z, u):
        c, s = math.cos(z[2]), math.sin(z[2])
        v = u[0]
        A = np.array([[0.0, 0.0, -v * s], [0.0, 0.0, v * c], [0.0, 0.0, 0.0]])
        B = np.array([[c, 0.0], [s, 0.0], [0.0, 1.0]])
        return A, B


@dataclass(frozen=True)
class Pendulum(PlantModel):
    """Torque-driven pendulum, state ``[theta, theta_dot]``, control ``[tau]``.

    ``theta = 0`` is the regulated equilibrium of the swing-up task.
    """

    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81

    name = "pendulum"
    p = 2
    q = 1

    def drift(self, z):
        vz = dc.value_of(z)
        return np.array([vz[1], -self.gravity * math.sin(vz[0]) / self.length])

    def gain(self, z):
        return np.array([[0.0], [1.0 / (self.mass * self.length**2)]])

    def dynamics(self, z, u):
        if type(z) is not dc.Var and type(u) is not dc.Var:
            k = 1.0 / (self.mass * self.length**2)
            return np.array([float(z[1]), -self.gravity / self.length * math.sin(float(z[0])) + k * float(u[0])])
        acc = dc.scale(dc.sin(dc.take(z, 0)), -self.gravity / self.length)
        acc = acc + dc.scale(dc.take(u, 0), 1.0 / (self.mass * self.length**2))
        return dc.stack([dc.take(z, 1), acc])

    def jacobians(self, z, u):
        A = np.array([[0.0, 1.0], [-self.gravity * math.cos(z[0]) / self.length, 0.0]])
        return A, self.gain(z)


class LinearPlant(PlantModel):
    """``zdot = A z + B u``; used for oracle tests (decay, integrators)."""

    name = "linear"

    def __init__(self, A, B) -> None:
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        self.p, self.q = self.B.shape
        if self.A.shape != (self.p, self.p):
            raise ValueError(f"A has shape {self.A.shape}, expected {(self.p, self.p)}")

    def drift(self, z):
        return self.A @ dc.value_of(z)

    def gain(self, z):
        return self.B

    def dynamics(self, z, u):
        return dc.add(dc.matvec(self.A, z), dc.matvec(self.B, u))

    def jacobians(self, z, u):
        return self.A, self.B


def eval_dynamics(model: PlantModel, z, u):
    """State derivative ``f(z) + g(z) u``."""
    _check_dims(model, z, u)
    return model.dynamics(z, u)


def input_gain(model: PlantModel, z) -> np.ndarray:
    """The ``p x q`` input gain ``g(z)`` (plain array)."""
    _check_dims(model, z)
    return model.gain(z)


def _rk4_stages(f, z, u, dt):
    k1 = f(z, u)
    z2 = dc.add(z, dc.scale(k1, 0.5 * dt))
    k2 = f(z2, u)
    z3 = dc.add(z, dc.scale(k2, 0.5 * dt))
    k3 = f(z3, u)
    z4 = dc.add(z, dc.scale(k3, dt))
    k4 = f(z4, u)
    incr = dc.add(dc.add(k1, k4), dc.scale(dc.add(k2, k3), 2.0))
    return dc.add(z, dc.scale(incr, dt / 6.0)), (z, z2, z3, z4)


def _rk4_jacobians(model: PlantModel, stages, u, dt):
    """Step Jacobians ``(dz'/dz, dz'/du)`` by chaining the stage Jacobians."""
    eye = np.eye(model.p)
    Jz, Ju = np.zeros((model.p, model.p)), np.zeros((model.p, model.q))
    prev_z, prev_u = None, None
    for h, w, zs in zip((0.0, 0.5 * dt, 0.5 * dt, dt), (1.0, 2.0, 2.0, 1.0), stages):
        A, B = model.jacobians(zs, u)
        if prev_z is None:
            dkz, dku = A, B
        else:
            dkz = A @ (eye + h * prev_z)
            dku = A @ (h * prev_u) + B
        Jz = Jz + w * dkz
        Ju = Ju + w * dku
        prev_z, prev_u = dkz, dku
    return eye + (dt / 6.0) * Jz, (dt / 6.0) * Ju


def rk4_step(model: PlantModel, z, u, dt: float):
    """Advance one step of classic RK4 with ``u`` held constant.

    On a tape, plants that provide :meth:`PlantModel.jacobians` get the whole
    step as a single node (same value as the off-tape step); others are
    recorded op by op.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    _check_dims(model, z, u)
    tape = dc._tape_of((z, u))
    if tape is None or type(model).jacobians is PlantModel.jacobians:
        out, _ = _rk4_stages(model.dynamics, z, u, dt)
        if not np.all(np.isfinite(dc.value_of(out))):
            raise DivergenceError(f"{model.name}: non-finite state after RK4 step")
        return out
    zv = np.asarray(dc.value_of(z), dtype=np.float64)
    uv = np.asarray(dc.value_of(u), dtype=np.float64)
    out, stages = _rk4_stages(model.dynamics, zv, uv, dt)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"{model.name}: non-finite state after RK4 step")

    def vjp(g):
        Jz, Ju = _rk4_jacobians(model, stages, uv, dt)
        return g @ Jz, g @ Ju

    return tape.record("rk4", out, (z, u), vjp, (model.p,))


def make_plant(name: str, **params) -> PlantModel:
    """Build a plant by name (``unicycle`` or ``pendulum``)."""
    if name == "unicycle":
        if params:
            raise ValueError(f"unicycle takes no parameters, got {sorted(params)}")
        return Unicycle()
    if name == "pendulum":
        return Pendulum(**{k: float(v) for k, v in params.items()})
    raise ValueError(f"unknown plant {name!r}")
