"""Grid sampling of the admissible state set and the per-sample training loop."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .neural import AdamState, MlpParams, NonFiniteGradientError, adam_step
from .plant import DivergenceError, PlantModel
from .pmp_loss import CostSpec, PlantEnv, total_loss
from .qp import BoxConstraint

__all__ = ["TrainConfig", "TrainReport", "TrainingAborted", "grid_states", "train", "sample_loss"]

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Too many divergent samples in one epoch."""


@dataclass(frozen=True)
class TrainConfig:
    ranges: tuple[tuple[float, float], ...]
    counts: tuple[int, ...]
    epochs: int = 50
    lr: float = 1e-3
    constrained: bool = False
    box: BoxConstraint | None = None
    seed: int = 0
    shuffle: bool = False
    batch_size: int = 1
    max_skip_fraction: float = 0.1

    def __post_init__(self) -> None:
        if len(self.ranges) != len(self.counts):
            raise ValueError("ranges and counts must have one entry per state dimension")
        if int(self.epochs) < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if any(int(m) < 2 for m in self.counts):
            raise ValueError(f"need at least 2 samples per dimension, got {self.counts}")
        if self.constrained and self.box is None:
            raise ValueError("constrained training requires a box")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_skipped: list[int] = field(default_factory=list)
    skipped: int = 0
    steps: int = 0
    horizon_steps: int = 0
    wall_clock: float = 0.0

    def to_csv(self) -> str:
        lines = ["epoch,mean_loss,skipped"]
        for e, (loss, sk) in enumerate(zip(self.epoch_loss, self.epoch_skipped)):
            lines.append(f"{e},{loss!r},{sk}")
        return "\n".join(lines) + "\n"


def grid_states(ranges, counts) -> np.ndarray:
    """Cartesian product of inclusive linspaces, lexicographic order."""
    if len(ranges) != len(counts):
        raise ValueError("ranges and counts differ in length")
    axes = []
    for (lo, hi), m in zip(ranges, counts):
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
            raise ValueError(f"invalid range [{lo}, {hi}]")
        if int(m) < 2:
            raise ValueError(f"need at least 2 points per dimension, got {m}")
        axes.append(np.linspace(lo, hi, int(m)))
    return np.array(list(itertools.product(*axes)), dtype=np.float64)


def sample_loss(z, params: MlpParams, env, spec: CostSpec, box: BoxConstraint | None):
    """Loss value and parameter gradients (canonical order) for one state."""
    tape = dc.Tape()
    leaves = [tape.var(a) for a in params.arrays()]
    loss = total_loss(z, params, env, spec, box, tape, leaves)
    grads = tape.backward(loss)
    return loss.value, [grads[v] for v in leaves]


def train(config: TrainConfig, model: PlantModel | object, spec: CostSpec, params: MlpParams,
          on_epoch: Callable[[int, float, MlpParams], None] | None = None) -> tuple[MlpParams, TrainReport]:
    """Run the epoch/sample loop with Adam; returns trained params and a report.

    ``model`` is either a :class:`PlantModel` (integrated with RK4) or any
    object with ``p``, ``q`` and a tape-compatible ``step(z, u, dt)``.
    Divergent samples (non-finite state, loss or gradient) are skipped and
    counted; if more than ``max_skip_fraction`` of an epoch is skipped the
    run aborts.
    """
    env = PlantEnv(model) if isinstance(model, PlantModel) else model
    if env.p != params.p or env.q != params.q or spec.horizon != params.n:
        raise ValueError(
            f"dims disagree: plant (p={env.p}, q={env.q}), net (p={params.p}, n={params.n}, q={params.q}),"
            f" horizon {spec.horizon}"
        )
    states = grid_states(config.ranges, config.counts)
    if states.shape[1] != params.p:
        raise ValueError(f"grid has dimension {states.shape[1]}, network expects {params.p}")
    box = config.box if config.constrained else None
    rng = np.random.default_rng(config.seed)
    adam = AdamState.zeros_like(params)
    report = TrainReport()
    t0 = time.perf_counter()
    bs = int(config.batch_size)
    for epoch in range(int(config.epochs)):
        order = rng.permutation(len(states)) if config.shuffle else np.arange(len(states))
        losses, skipped = [], 0
        for start in range(0, len(order), bs):
            acc = None
            used = 0
            for idx in order[start : start + bs]:
                try:
                    value, grads = sample_loss(states[idx], params, env, spec, box)
                    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                        raise NonFiniteGradientError("non-finite loss or gradient")
                except (DivergenceError, NonFiniteGradientError, FloatingPointError) as exc:
                    skipped += 1
                    log.warning("epoch %d: skipping sample %s (%s)", epoch, states[idx], exc)
                    continue
                losses.append(value)
                acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
                used += 1
            if acc is None:
                continue
            if used > 1:
                acc = [a / used for a in acc]
            params, adam = adam_step(params, acc, adam, config.lr)
            report.steps += 1
            report.horizon_steps += used * spec.horizon
        if skipped > config.max_skip_fraction * len(states):
            raise TrainingAborted(f"epoch {epoch}: {skipped}/{len(states)} samples diverged")
        mean = float(np.mean(losses)) if losses else float("nan")
        report.epoch_loss.append(mean)
        report.epoch_skipped.append(skipped)
        report.skipped += skipped
        log.info("epoch %d  mean loss %.6g  skipped %d", epoch, mean, skipped)
        if on_epoch is not None:
            on_epoch(epoch, mean, params)
    report.wall_clock = time.perf_counter() - t0
    return params, report
