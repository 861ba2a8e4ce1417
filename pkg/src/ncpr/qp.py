"""Box-constrained control extraction from the first predicted row.

At deployment the control is

    u* = argmin_{lo <= u <= hi}  u^T R u + c^T u,

where ``c`` is row 0 of the network prediction. Diagonal ``R`` separates into
per-channel clamps; otherwise cyclic coordinate descent runs to a projected
KKT residual below ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BoxConstraint",
    "QpProblem",
    "QpIterationError",
    "first_row",
    "solve_box_qp",
    "extract_control",
    "qp_objective",
    "kkt_residual",
    "check_spd",
]


def check_spd(R, name: str = "R") -> np.ndarray:
    """Return ``R`` as a 2-D float array after a symmetry + Cholesky test."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    if R.shape[0] != R.shape[1]:
        raise ValueError(f"{name} must be square, got {R.shape}")
    if not np.allclose(R, R.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(R).max())):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return R


@dataclass(frozen=True)
class BoxConstraint:
    """Per-channel bounds; ``-inf`` / ``inf`` mark an unbounded side."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"bounds must be matching vectors, got {lo.shape} and {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo >= hi):
            raise ValueError(f"need lower < upper per channel, got {lo} / {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, *limits: float) -> BoxConstraint:
        lim = np.asarray(limits, dtype=np.float64)
        return cls(-lim, lim)

    @classmethod
    def unbounded(cls, q: int) -> BoxConstraint:
        return cls(np.full(q, -np.inf), np.full(q, np.inf))

    @property
    def q(self) -> int:
        return self.lower.size

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, u) -> bool:
        u = np.asarray(u)
        return bool(np.all(u >= self.lower) and np.all(u <= self.upper))

    def clip(self, u) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)


class QpIterationError(RuntimeError):
    """Coordinate descent hit the sweep cap; carries the best iterate."""

    def __init__(self, message: str, u: np.ndarray, residual: float) -> None:
        super().__init__(message)
        self.u = u
        self.residual = residual


@dataclass(frozen=True)
class QpProblem:
    R: np.ndarray
    c: np.ndarray
    box: BoxConstraint

    def __post_init__(self) -> None:
        R = check_spd(self.R)
        c = np.atleast_1d(np.asarray(self.c, dtype=np.float64))
        if c.shape != (R.shape[0],) or self.box.q != R.shape[0]:
            raise ValueError(f"dims disagree: R {R.shape}, c {c.shape}, box q={self.box.q}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "c", c)


def qp_objective(R, c, u) -> float:
    u = np.asarray(u, dtype=np.float64)
    return float(u @ np.atleast_2d(R) @ u + np.atleast_1d(c) @ u)


def kkt_residual(R, c, box: BoxConstraint, u) -> float:
    """Projected-gradient residual ``max |u - clip(u - grad)|``.

    Zero exactly when each channel is either stationary or sits on a bound
    with the gradient pushing outward.
    """
    u = np.asarray(u, dtype=np.float64)
    grad = 2.0 * (np.atleast_2d(R) @ u) + np.atleast_1d(c)
    return float(np.max(np.abs(u - box.clip(u - grad))))


def first_row(pred) -> np.ndarray:
    """Row 0 of an ``n x q`` prediction (a copy)."""
    pred = np.asarray(pred)
    if pred.ndim != 2 or pred.shape[0] < 1:
        raise ValueError(f"prediction must be n x q with n >= 1, got {pred.shape}")
    return pred[0].copy()


def solve_box_qp(problem: QpProblem, tol: float = 1e-10, max_sweeps: int = 10_000) -> np.ndarray:
    R, c, box = problem.R, problem.c, problem.box
    diag = np.diag(R)
    if np.count_nonzero(R - np.diag(diag)) == 0:
        return box.clip(-c / (2.0 * diag))
    u = box.clip(-np.linalg.solve(2.0 * R, c))
    res = kkt_residual(R, c, box, u)
    q = c.size
    for _ in range(max_sweeps):
        if res <= tol:
            return u
        for j in range(q):
            # exact minimization along channel j, others fixed
            off = R[j] @ u - R[j, j] * u[j]
            u[j] = min(max(-(c[j] + 2.0 * off) / (2.0 * R[j, j]), box.lower[j]), box.upper[j])
        res = kkt_residual(R, c, box, u)
    if res <= tol:
        return u
    raise QpIterationError(f"coordinate descent did not reach tol {tol:g} (residual {res:.3g})", u, res)


def extract_control(pred, R, box: BoxConstraint | None = None) -> np.ndarray:
    """Control from the first predicted row; QP only if a box is given."""
    c = first_row(pred)
    R = check_spd(R)
    if box is None:
        return -0.5 * np.linalg.solve(R, c)
    return solve_box_qp(QpProblem(R, c, box))
