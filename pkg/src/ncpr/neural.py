"""The co-state projection network: MLP, Adam, and checkpoint I/O.

The network maps a state (or error state) of size ``p`` to an ``n x q``
matrix whose row ``i`` is the projected co-state ``lambda_{k+i}^T g(z_{k+i})``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

__all__ = [
    "MlpParams",
    "AdamState",
    "CheckpointError",
    "NonFiniteGradientError",
    "ACTIVATIONS",
    "mlp_init",
    "cpnn_forward",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = {"tanh": 0, "sin": 1}
_ACT_FN = {"tanh": dc.tanh, "sin": dc.sin}
MAGIC = b"CPNN1"


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or inf; the update was not applied."""


@dataclass
class MlpParams:
    """Weights ``W[l]`` (out x in) and biases ``b[l]`` of an affine-output MLP."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    p: int
    n: int
    q: int
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty lists of equal length")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        fan_in = self.p
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or W.shape[1] != fan_in or b.shape != (W.shape[0],):
                raise ValueError(f"layer {i}: weight {W.shape} / bias {b.shape} do not chain from {fan_in}")
            fan_in = W.shape[0]
        if fan_in != self.n * self.q:
            raise ValueError(f"output dim {fan_in} != n*q = {self.n * self.q}")

    def arrays(self) -> list[np.ndarray]:
        """Parameters in canonical order ``[W0, b0, W1, b1, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, arrays, like: MlpParams) -> MlpParams:
        return cls(list(arrays[0::2]), list(arrays[1::2]), like.p, like.n, like.q, like.activation)

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    @property
    def hidden(self) -> list[int]:
        return [W.shape[0] for W in self.weights[:-1]]


def mlp_init(p: int, n: int, q: int, hidden=(64, 64), seed: int = 0, activation: str = "tanh") -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    dims = [p, *hidden, n * q]
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"all layer sizes must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, p, n, q, activation)


def cpnn_forward(params: MlpParams, z, tape: dc.Tape | None = None, leaves=None):
    """Predicted projected co-state trajectory, shape ``(n, q)``.

    Without a tape this is a plain numpy evaluation. With a tape, parameters
    are recorded as gradient leaves (or taken from ``leaves`` if the caller
    already registered them, in :meth:`MlpParams.arrays` order) and the
    result is a :class:`~ncpr.diffcore.Var`.
    """
    if dc._shape(z) != (params.p,):
        raise ValueError(f"state must have shape ({params.p},), got {dc._shape(z)}")
    if tape is None:
        h = np.asarray(dc.value_of(z), dtype=np.float64)
        act = np.tanh if params.activation == "tanh" else np.sin
        last = len(params.weights) - 1
        for i, (W, b) in enumerate(zip(params.weights, params.biases)):
            h = W @ h + b
            if i < last:
                h = act(h)
        return h.reshape(params.n, params.q)
    if leaves is None:
        leaves = [tape.var(a) for a in params.arrays()]
    act = _ACT_FN[params.activation]
    h = z
    nlayers = len(params.weights)
    for i in range(nlayers):
        h = dc.add(dc.matvec(leaves[2 * i], h), leaves[2 * i + 1])
        if i < nlayers - 1:
            h = act(h)
    return dc.reshape(h, (params.n, params.q))


@dataclass
class AdamState:
    """Adam moment estimates, one pair per parameter array."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams) -> AdamState:
        arrs = params.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs])


def adam_step(params: MlpParams, grads, state: AdamState, lr: float) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update. Inputs are not mutated.

    Raises :class:`NonFiniteGradientError` (leaving everything untouched) if
    any gradient entry is NaN or inf.
    """
    arrs = params.arrays()
    if len(grads) != len(arrs):
        raise ValueError(f"expected {len(arrs)} gradient arrays, got {len(grads)}")
    for a, g in zip(arrs, grads):
        if np.shape(g) != a.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; step rejected")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_arrs, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrs, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_arrs.append(a - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, b1, b2, state.eps)
    return MlpParams.from_arrays(new_arrs, params), new_state


def save_checkpoint(params: MlpParams) -> bytes:
    """Serialize to the ``CPNN1`` little-endian binary format."""
    parts = [MAGIC, struct.pack("<I", len(params.weights))]
    for W, b in zip(params.weights, params.biases):
        rows, cols = W.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(struct.pack("<IIII", params.p, params.n, params.q, ACTIVATIONS[params.activation]))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.pos = 0

    def take(self, nbytes: int, what: str) -> memoryview:
        if self.pos + nbytes > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.data[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out

    def u32(self, count: int, what: str) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count, what))

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def load_checkpoint(data: bytes, p: int | None = None, n: int | None = None, q: int | None = None) -> MlpParams:
    """Parse a ``CPNN1`` checkpoint; optionally require given dimensions."""
    r = _Reader(bytes(data))
    if bytes(r.take(len(MAGIC), "magic")) != MAGIC:
        raise CheckpointError("bad magic; not a CPNN1 checkpoint")
    (nlayers,) = r.u32(1, "layer count")
    if nlayers == 0 or nlayers > 1024:
        raise CheckpointError(f"implausible layer count {nlayers}")
    weights, biases = [], []
    for i in range(nlayers):
        rows, cols = r.u32(2, f"layer {i} dims")
        weights.append(r.f64(rows * cols, f"layer {i} weights").reshape(rows, cols))
        biases.append(r.f64(rows, f"layer {i} biases"))
    cp, cn, cq, tag = r.u32(4, "metadata")
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after metadata")
    names = {v: k for k, v in ACTIVATIONS.items()}
    if tag not in names:
        raise CheckpointError(f"unknown activation tag {tag}")
    for label, want, got in (("p", p, cp), ("n", n, cn), ("q", q, cq)):
        if want is not None and want != got:
            raise CheckpointError(f"dimension mismatch: checkpoint has {label}={got}, expected {want}")
    try:
        return MlpParams(weights, biases, cp, cn, cq, names[tag])
    except ValueError as exc:
        raise CheckpointError(f"inconsistent layer dims: {exc}") from exc
