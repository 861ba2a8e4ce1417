"""Flat ``section.key = value`` experiment configs.

Syntax: one assignment per line, ``#`` starts a comment. Values are parsed on
access: numbers, comma lists (``100, 100``), ``;``-separated rows
(``1, 2; 3, 4``), ranges (``-2:2``), booleans and ``none``. Any key may be
overridden through the environment as ``NCPR_SECTION__KEY`` (dots become
double underscores), e.g. ``NCPR_TRAIN__EPOCHS=5``.

Recognised keys (defaults in brackets):

=================  =====================================================
plant.name         ``pendulum`` | ``unicycle``
plant.mass/length/gravity  pendulum parameters [1, 1, 9.81]
cost.Q, cost.S     diagonal entries, or full rows separated by ``;``
cost.R             same
cost.horizon       prediction horizon n
cost.dt            step [0.05]
cost.regularizer   ``uniform`` (uses cost.beta) | ``discounted`` (cost.gamma)
net.hidden         hidden sizes [64, 64]
net.activation     ``tanh`` | ``sin`` [tanh]
train.ranges       per-dimension ``lo:hi`` list
train.counts       per-dimension grid counts
train.epochs/lr/shuffle/batch_size
train.box          ``lo:hi`` per channel, used by cpnn_constrained
test.box           ``lo:hi`` per channel or ``none``
controller         cpnn_unconstrained | cpnn_constrained | mpc
sim.z0             initial states, ``;``-separated
sim.z_ref          one reference per z0, or a single one [zeros]
sim.cases          case labels [1, 2, ...]
sim.duration       seconds [10]
mpc.max_iter/step_size/tol/warm_start
output.dir         [runs/<plant>]
seed               [0]
=================  =====================================================
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baseline_mpc import MpcConfig
from .plant import PlantModel, make_plant
from .pmp_loss import CostSpec, Discounted, Uniform
from .qp import BoxConstraint
from .trainer import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config", "CONTROLLERS"]

ENV_PREFIX = "NCPR_"
CONTROLLERS = ("cpnn_unconstrained", "cpnn_constrained", "mpc")


class ConfigError(ValueError):
    pass


def parse_config(text: str, env: dict | None = None) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key.lower()] = value
    for name, value in (os.environ if env is None else env).items():
        if name.startswith(ENV_PREFIX):
            out[name[len(ENV_PREFIX):].lower().replace("__", ".")] = value
    return out


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.replace(",", " ").split()]


def _rows(s: str) -> list[list[float]]:
    return [_floats(r) for r in s.split(";") if r.strip()]


def _matrix(s: str, name: str) -> np.ndarray:
    rows = _rows(s)
    if len(rows) == 1:
        return np.diag(rows[0])
    M = np.array(rows, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ConfigError(f"{name}: expected a square matrix, got {s!r}")
    return M


def _ranges(s: str) -> list[tuple[float, float]]:
    out = []
    for part in s.split(","):
        lo, _, hi = part.strip().partition(":")
        if not hi:
            raise ConfigError(f"range {part!r} must be 'lo:hi'")
        out.append((float(lo), float(hi)))
    return out


def _box(s: str | None) -> BoxConstraint | None:
    if s is None or s.strip().lower() in ("", "none"):
        return None
    r = _ranges(s)
    return BoxConstraint([a for a, _ in r], [b for _, b in r])


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


@dataclass
class ExperimentConfig:
    raw: dict[str, str]
    source: str = "<string>"

    def get(self, key: str, default=None):
        return self.raw.get(key, default)

    def need(self, key: str) -> str:
        if key not in self.raw:
            raise ConfigError(f"{self.source}: missing required key {key!r}")
        return self.raw[key]

    def canonical(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.get("seed", "0"))

    @property
    def controller(self) -> str:
        c = self.get("controller", "cpnn_unconstrained")
        if c not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {c!r}")
        return c

    def plant(self) -> PlantModel:
        name = self.need("plant.name")
        params = {k.split(".", 1)[1]: v for k, v in self.raw.items() if k.startswith("plant.") and k != "plant.name"}
        try:
            return make_plant(name, **params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.source}: {exc}") from exc

    def cost(self) -> CostSpec:
        kind = self.get("cost.regularizer", "uniform").lower()
        if kind == "uniform":
            reg = Uniform(float(self.need("cost.beta")))
        elif kind == "discounted":
            reg = Discounted(float(self.need("cost.gamma")), float(self.get("cost.reg_weight", "1")))
        else:
            raise ConfigError(f"unknown regularizer {kind!r}")
        return CostSpec(
            _matrix(self.need("cost.q"), "cost.Q"),
            _matrix(self.need("cost.r"), "cost.R"),
            _matrix(self.need("cost.s"), "cost.S"),
            int(self.need("cost.horizon")),
            float(self.get("cost.dt", "0.05")),
            reg,
        )

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(int(x) for x in _floats(self.get("net.hidden", "64, 64")))

    @property
    def activation(self) -> str:
        return self.get("net.activation", "tanh")

    def train_box(self) -> BoxConstraint | None:
        return _box(self.get("train.box"))

    def test_box(self) -> BoxConstraint | None:
        return _box(self.get("test.box"))

    def train_config(self, constrained: bool | None = None) -> TrainConfig:
        if constrained is None:
            constrained = self.controller == "cpnn_constrained"
        return TrainConfig(
            ranges=tuple(_ranges(self.need("train.ranges"))),
            counts=tuple(int(c) for c in _floats(self.need("train.counts"))),
            epochs=int(self.get("train.epochs", "50")),
            lr=float(self.get("train.lr", "1e-3")),
            constrained=constrained,
            box=self.train_box(),
            seed=self.seed,
            shuffle=_bool(self.get("train.shuffle", "false")),
            batch_size=int(self.get("train.batch_size", "1")),
        )

    def mpc_config(self) -> MpcConfig:
        return MpcConfig(
            horizon=int(self.get("mpc.horizon", self.need("cost.horizon"))),
            max_iter=int(self.get("mpc.max_iter", "300")),
            step_size=float(self.get("mpc.step_size", "0.05")),
            tol=float(self.get("mpc.tol", "1e-8")),
            warm_start=_bool(self.get("mpc.warm_start", "true")),
        )

    def cases(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """``(label, z0, z_ref)`` triples from ``sim.*``."""
        z0s = [np.array(r) for r in _rows(self.need("sim.z0"))]
        refs = [np.array(r) for r in _rows(self.get("sim.z_ref", ""))]
        if not refs:
            refs = [np.zeros_like(z0s[0])]
        if len(refs) == 1:
            refs = refs * len(z0s)
        if len(refs) != len(z0s):
            raise ConfigError("sim.z_ref must give one reference or one per z0")
        labels = [s.strip() for s in self.get("sim.cases", "").split(",") if s.strip()]
        if not labels:
            labels = [str(i + 1) for i in range(len(z0s))]
        if len(labels) != len(z0s):
            raise ConfigError("sim.cases must label every z0")
        return list(zip(labels, z0s, refs))

    @property
    def duration(self) -> float:
        return float(self.get("sim.duration", "10"))

    def output_dir(self) -> Path:
        return Path(self.get("output.dir", f"runs/{self.get('plant.name', 'experiment')}"))


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return ExperimentConfig(parse_config(path.read_text(), env), str(path))
