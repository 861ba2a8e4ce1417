"""Closed-loop simulation of a feedback controller and evaluation metrics.

Each step feeds the error state to the controller, applies the returned
control for one ``dt`` through RK4 and logs state, control, stage cost and the
controller's wall-clock latency (integration excluded).
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass

import numpy as np

from .neural import MlpParams, cpnn_forward
from .plant import DivergenceError, PlantModel, rk4_step
from .pmp_loss import CostSpec
from .qp import BoxConstraint, check_spd, extract_control, first_row, kkt_residual

__all__ = [
    "TrajectoryLog",
    "CpnnController",
    "closed_loop",
    "convergence_error",
    "msd",
    "msd_channels",
    "step_latency_summary",
    "summary",
]


class CpnnController:
    """Network + first-row QP. Never evaluates the plant model."""

    def __init__(self, params: MlpParams, R, box: BoxConstraint | None = None) -> None:
        self.params = params
        self.R = check_spd(R)
        self.box = box
        self.last_row: np.ndarray | None = None

    def reset(self) -> None:
        self.last_row = None

    def __call__(self, z, z_ref) -> np.ndarray:
        pred = cpnn_forward(self.params, z - z_ref)
        self.last_row = first_row(pred)
        return extract_control(pred, self.R, self.box)


@dataclass
class TrajectoryLog:
    """Closed-loop record; ``controls[k]`` is applied on ``[t_k, t_k + dt)``."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    stage_cost: np.ndarray
    latency: np.ndarray
    z_ref: np.ndarray
    box: BoxConstraint | None = None
    costate_rows: np.ndarray | None = None
    divergent: bool = False

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self) -> str:
        p = self.states.shape[1]
        q = self.controls.shape[1] if self.controls.ndim == 2 else 0
        header = ["t", *[f"z{i + 1}" for i in range(p)], *[f"u{j + 1}" for j in range(q)], "stage_cost", "latency_s"]
        buf = io.StringIO()
        buf.write(",".join(header) + "\n")
        for k, t in enumerate(self.times):
            cells = [repr(float(t)), *(repr(float(x)) for x in self.states[k])]
            if k < len(self.controls):
                cells += [repr(float(x)) for x in self.controls[k]]
                cells += [repr(float(self.stage_cost[k])), repr(float(self.latency[k]))]
            else:
                cells += [""] * (q + 2)
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()


def closed_loop(controller, model: PlantModel, spec: CostSpec, z0, z_ref=None, duration: float = 10.0,
                box: BoxConstraint | None = None) -> TrajectoryLog:
    """Simulate ``duration`` seconds at ``spec.dt``.

    ``controller`` is a callable ``(z, z_ref) -> u`` or an :class:`MlpParams`
    (wrapped in a :class:`CpnnController` with ``spec.R`` and ``box``). A
    non-finite state ends the run early with ``divergent=True``.
    """
    if isinstance(controller, MlpParams):
        controller = CpnnController(controller, spec.R, box)
    dt = spec.dt
    steps = int(round(duration / dt))
    if steps < 1 or not np.isclose(steps * dt, duration, rtol=1e-9, atol=1e-12):
        raise ValueError(f"duration {duration} is not a positive multiple of dt={dt}")
    z = np.asarray(z0, dtype=np.float64).copy()
    if z.shape != (model.p,):
        raise ValueError(f"z0 must have shape ({model.p},), got {z.shape}")
    z_ref = np.zeros(model.p) if z_ref is None else np.asarray(z_ref, dtype=np.float64)
    if z_ref.shape != (model.p,) or not np.all(np.isfinite(z_ref)):
        raise ValueError(f"z_ref must be a finite vector of shape ({model.p},)")
    if hasattr(controller, "reset"):
        controller.reset()
    box = getattr(controller, "box", box)
    Q, R = spec.Q, spec.R
    states, controls, costs, lat, rows = [z.copy()], [], [], [], []
    divergent = False
    clock = time.perf_counter
    for _ in range(steps):
        t0 = clock()
        u = np.atleast_1d(np.asarray(controller(z, z_ref), dtype=np.float64))
        lat.append(clock() - t0)
        row = getattr(controller, "last_row", None)
        if row is not None:
            rows.append(row)
        e = z - z_ref
        controls.append(u)
        costs.append(float(e @ Q @ e + u @ R @ u))
        try:
            z = rk4_step(model, z, u, dt)
        except DivergenceError:
            divergent = True
            controls.pop(), costs.pop(), lat.pop()
            if rows:
                rows.pop()
            break
        states.append(z)
    n_states = len(states)
    return TrajectoryLog(
        times=np.arange(n_states) * dt,
        states=np.array(states),
        controls=np.array(controls).reshape(len(controls), model.q),
        stage_cost=np.array(costs),
        latency=np.array(lat),
        z_ref=z_ref,
        box=box,
        costate_rows=np.array(rows) if len(rows) == len(controls) and rows else None,
        divergent=divergent,
    )


def convergence_error(log: TrajectoryLog | np.ndarray, z_ref=None) -> float:
    """Sum of absolute tracking errors at the final logged state."""
    final = log.final_state if isinstance(log, TrajectoryLog) else np.asarray(log, dtype=np.float64)
    if z_ref is None:
        z_ref = log.z_ref if isinstance(log, TrajectoryLog) else np.zeros_like(final)
    return float(np.sum(np.abs(final - np.asarray(z_ref, dtype=np.float64))))


def msd(series) -> float:
    """Mean squared numerical derivative of one channel (unit spacing)."""
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("msd needs at least two samples")
    d = np.gradient(x)
    return float(np.mean(d * d))


def msd_channels(controls) -> list[float]:
    U = np.asarray(controls, dtype=np.float64)
    if U.ndim == 1:
        U = U[:, None]
    return [msd(U[:, j]) for j in range(U.shape[1])]


def step_latency_summary(log: TrajectoryLog | np.ndarray) -> dict:
    lat = log.latency if isinstance(log, TrajectoryLog) else np.asarray(log, dtype=np.float64)
    if lat.size == 0:
        raise ValueError("latency summary of an empty log")
    return {"mean": float(np.mean(lat)), "p95": float(np.percentile(lat, 95))}


def kkt_residuals(log: TrajectoryLog, R) -> np.ndarray:
    """Per-step optimality residual of the logged controls.

    With a box this is the projected-gradient KKT residual, otherwise the
    infinity norm of ``2 R u + c``. Needs ``costate_rows``.
    """
    if log.costate_rows is None:
        raise ValueError("log carries no prediction rows")
    R = np.atleast_2d(R)
    out = []
    for u, c in zip(log.controls, log.costate_rows):
        if log.box is None:
            out.append(float(np.max(np.abs(2.0 * R @ u + c))))
        else:
            out.append(kkt_residual(R, c, log.box, u))
    return np.array(out)


def summary(log: TrajectoryLog) -> dict:
    per = msd_channels(log.controls) if len(log.controls) >= 2 else []
    rec = {
        "convergence_error": convergence_error(log),
        "msd": per,
        "msd_total": float(sum(per)),
        "steps": int(len(log.controls)),
        "divergent": bool(log.divergent),
        "final_state": [float(x) for x in log.final_state],
    }
    if len(log.latency):
        rec["latency"] = step_latency_summary(log)
    return rec


def summary_json(log: TrajectoryLog) -> str:
    return json.dumps(summary(log), indent=2, sort_keys=True)
