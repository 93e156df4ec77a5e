"""Exact statevector simulation of the hardware-efficient RY / controlled-Z ansatz.

States carry an optional leading batch axis: ``amplitudes`` has shape
``(..., 2**n)`` with qubit 0 as the most significant bit. A whole Edge or Node
Network block therefore runs its ``N_E`` or ``N_V`` circuits as one array.

Two independent gradient routes are provided: adjoint reverse mode through the
complex amplitudes (:func:`pqc_grad_exact`) and the two-point shift rule
(:func:`pqc_grad_parameter_shift`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad

MAX_QUBITS = 12
DEGENERATE_NORM = 1e-12
ENCODINGS = ("angle", "amplitude", "parallel")
READOUTS = ("z", "probs", "amplitudes")


@dataclass
class StateVector:
    n_qubits: int
    amplitudes: np.ndarray
    degenerate: np.ndarray | bool = False

    def __post_init__(self):
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}], got {self.n_qubits}")
        amps = np.asarray(self.amplitudes)
        # real states stay float64 until a complex gate touches them
        self.amplitudes = amps.astype(np.float64 if np.isrealobj(amps) else np.complex128, copy=False)
        if self.amplitudes.shape[-1] != 2 ** self.n_qubits:
            raise ValueError(f"expected {2 ** self.n_qubits} amplitudes, got {self.amplitudes.shape[-1]}")

    @classmethod
    def zero(cls, n_qubits: int, batch: tuple[int, ...] = ()) -> "StateVector":
        amps = np.zeros(batch + (2 ** n_qubits,))
        amps[..., 0] = 1.0
        return cls(n_qubits, amps)

    def probabilities(self) -> np.ndarray:
        return self.amplitudes.real ** 2 + self.amplitudes.imag ** 2

    def norm(self) -> np.ndarray:
        return np.sqrt(self.probabilities().sum(axis=-1))


class Gate(NamedTuple):
    name: str
    qubits: tuple[int, ...]
    param: int | None = None
    angle: float = 0.0


# --- gate kernels ----------------------------------------------------------

def _split(amps: np.ndarray, n: int, q: int) -> np.ndarray:
    return amps.reshape(amps.shape[:-1] + (2 ** q, 2, 2 ** (n - q - 1)))


def _bcast(angle, amps: np.ndarray):
    """Angles of shape batch (or scalar) -> broadcastable against the split view."""
    a = np.asarray(angle, dtype=float)
    return a.reshape(a.shape + (1, 1)) if a.ndim else a


def apply_1q(amps: np.ndarray, n: int, q: int, m) -> np.ndarray:
    """Apply a 2x2 matrix ``m = ((m00, m01), (m10, m11))``; entries may be batched."""
    v = _split(amps, n, q)
    a0 = v[..., 0, :]
    a1 = v[..., 1, :]
    dtype = np.result_type(amps, *(np.asarray(e) for row in m for e in row))
    out = np.empty(v.shape, dtype=dtype)
    out[..., 0, :] = m[0][0] * a0 + m[0][1] * a1
    out[..., 1, :] = m[1][0] * a0 + m[1][1] * a1
    return out.reshape(amps.shape)


def _rotation(name: str, angle, amps) -> tuple:
    t = _bcast(angle, amps)
    c, s = np.cos(t / 2), np.sin(t / 2)
    if name == "ry":
        return ((c, -s), (s, c))
    if name == "rx":
        return ((c, -1j * s), (-1j * s, c))
    if name == "rz":
        return ((np.exp(-0.5j * t), 0.0), (0.0, np.exp(0.5j * t)))
    raise ValueError(f"unknown rotation {name!r}")


_PAULI = {
    "ry": ((0.0, -1j), (1j, 0.0)),
    "rx": ((0.0, 1.0), (1.0, 0.0)),
    "rz": ((1.0, 0.0), (0.0, -1.0)),
}


@lru_cache(maxsize=None)
def _bits(n: int) -> np.ndarray:
    k = np.arange(2 ** n)
    return np.stack([(k >> (n - 1 - q)) & 1 for q in range(n)], axis=1)


@lru_cache(maxsize=None)
def _cz_phase(n: int, pairs: tuple[tuple[int, int], ...]) -> np.ndarray:
    bits = _bits(n)
    sign = np.ones(2 ** n)
    for a, b in pairs:
        sign = sign * np.where(bits[:, a] & bits[:, b], -1.0, 1.0)
    return sign


def apply_gate(amps: np.ndarray, n: int, gate: Gate, angle=None, inverse: bool = False) -> np.ndarray:
    if gate.name == "cz":
        return amps * _cz_phase(n, (tuple(gate.qubits),))
    if gate.name == "cz_ring":
        return amps * _cz_phase(n, ring_pairs_of(gate.qubits))
    theta = gate.angle if angle is None else angle
    if inverse:
        theta = -np.asarray(theta)
    return apply_1q(amps, n, gate.qubits[0], _rotation(gate.name, theta, amps))


def ring_pairs(n: int) -> tuple[tuple[int, int], ...]:
    if n < 2:
        return ()
    if n == 2:
        return ((0, 1),)
    return tuple((q, (q + 1) % n) for q in range(n))


def ring_pairs_of(qubits: tuple[int, ...]) -> tuple[tuple[int, int], ...]:
    return tuple((qubits[a], qubits[b]) for a, b in ring_pairs(len(qubits)))


def run_gates(state: StateVector, gates: Sequence[Gate]) -> StateVector:
    amps = state.amplitudes
    for gate in gates:
        amps = apply_gate(amps, state.n_qubits, gate)
    return StateVector(state.n_qubits, amps, state.degenerate)


def inverse_gates(gates: Sequence[Gate]) -> list[Gate]:
    # CZ gates are self-inverse
    return [g if g.name.startswith("cz") else g._replace(angle=-g.angle) for g in reversed(gates)]


# --- the trainable ansatz --------------------------------------------------

@dataclass(frozen=True)
class CircuitSpec:
    """``n_layers`` of (RY on every qubit, entangler) followed by a closing RY layer.

    Angles are laid out ``(layer, qubit)``: ``n_qubits * (n_layers + 1)`` in total.
    """

    n_qubits: int
    n_layers: int = 3
    entangler: str = "cz_ring"

    def __post_init__(self):
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}]")
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        if self.entangler not in ("cz_ring", "none"):
            raise ValueError(f"unknown entangler {self.entangler!r}")

    @property
    def n_thetas(self) -> int:
        return self.n_qubits * (self.n_layers + 1)

    def gates(self, thetas=None) -> list[Gate]:
        n = self.n_qubits
        th = np.zeros(self.n_thetas) if thetas is None else np.asarray(thetas, dtype=float).ravel()
        if th.size != self.n_thetas:
            raise ValueError(f"expected {self.n_thetas} angles, got {th.size}")
        if not np.all(np.isfinite(th)):
            raise ValueError("circuit angles must be finite")
        out = []
        for layer in range(self.n_layers + 1):
            for q in range(n):
                idx = layer * n + q
                out.append(Gate("ry", (q,), idx, float(th[idx])))
            if layer < self.n_layers and self.entangler == "cz_ring" and n > 1:
                out.append(Gate("cz_ring", tuple(range(n))))
        return out


def run_pqc(state: StateVector, circuit: CircuitSpec, thetas) -> StateVector:
    if state.n_qubits != circuit.n_qubits:
        raise ValueError(f"state has {state.n_qubits} qubits, circuit {circuit.n_qubits}")
    return run_gates(state, circuit.gates(thetas))


# --- encodings -------------------------------------------------------------

def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")


def angle_encode(features) -> StateVector:
    """``prod_i RY(x_i)|0>`` on one qubit per feature (last axis)."""
    x = np.asarray(features, dtype=float)
    _check_finite(x)
    n = x.shape[-1]
    state = StateVector.zero(n, x.shape[:-1])
    amps = state.amplitudes
    for q in range(n):
        amps = apply_1q(amps, n, q, _rotation("ry", x[..., q], amps))
    return StateVector(n, amps)


def _n_qubits_for(length: int) -> int:
    n = int(round(np.log2(length))) if length > 0 else -1
    if n < 1 or 2 ** n != length:
        raise ValueError(f"feature length {length} is not a power of two >= 2")
    return n


def _normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    degenerate = norm[..., 0] <= DEGENERATE_NORM
    safe = np.where(norm > DEGENERATE_NORM, norm, 1.0)
    unit = x / safe
    unit[degenerate] = 0.0
    unit[degenerate, 0] = 1.0
    return unit, norm[..., 0], degenerate


def amplitude_encode(features) -> StateVector:
    """Real amplitudes ``x / |x|``; a (near) zero vector maps to ``|0...0>`` and is flagged."""
    x = np.asarray(features, dtype=float)
    _check_finite(x)
    n = _n_qubits_for(x.shape[-1])
    unit, _, degenerate = _normalize(x)
    return StateVector(n, unit, degenerate if degenerate.ndim else bool(degenerate))


def parallel_encode(features) -> StateVector:
    """Tensor square ``|psi> (x) |psi>`` of the amplitude-encoded state on twice the qubits."""
    single = amplitude_encode(features)
    a = single.amplitudes
    amps = (a[..., :, None] * a[..., None, :]).reshape(a.shape[:-1] + (a.shape[-1] ** 2,))
    return StateVector(2 * single.n_qubits, amps, single.degenerate)


# --- readouts --------------------------------------------------------------

def readout_z(state: StateVector) -> np.ndarray:
    zsign = 1.0 - 2.0 * _bits(state.n_qubits)
    return state.probabilities() @ zsign


def _marginal_index(n: int, measured: tuple[int, ...]) -> np.ndarray:
    bits = _bits(n)[:, list(measured)]
    weights = 2 ** np.arange(len(measured) - 1, -1, -1)
    return bits @ weights


def readout_probs(state: StateVector, measured_qubits: Sequence[int] | None = None) -> np.ndarray:
    """Marginal computational-basis probabilities of ``measured_qubits`` (in that order)."""
    n = state.n_qubits
    measured = tuple(range(n)) if measured_qubits is None else tuple(measured_qubits)
    if not measured:
        raise ValueError("at least one qubit must be measured")
    if len(set(measured)) != len(measured) or not all(0 <= q < n for q in measured):
        raise ValueError(f"invalid measured qubits {measured} for {n} qubits")
    p = state.probabilities()
    if measured == tuple(range(len(measured))):
        m = len(measured)
        return p.reshape(p.shape[:-1] + (2 ** m, 2 ** (n - m))).sum(axis=-1)
    idx = _marginal_index(n, measured)
    out = np.zeros(p.shape[:-1] + (2 ** len(measured),))
    for k in range(2 ** len(measured)):
        out[..., k] = p[..., idx == k].sum(axis=-1)
    return out


# --- hybrid layer: encoding -> circuit -> readout ---------------------------

@dataclass(frozen=True)
class PQCLayer:
    """One parametrized-circuit stage of a hybrid block.

    ``measured`` selects the qubits of a probability readout (all by default);
    the parallel encoding measures only the first copy.
    """

    encoding: str
    circuit: CircuitSpec
    readout: str = "probs"
    measured: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.encoding not in ENCODINGS:
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.readout not in READOUTS:
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.encoding == "parallel" and self.circuit.n_qubits % 2:
            raise ValueError("parallel encoding needs an even qubit count")

    @property
    def n_features(self) -> int:
        n = self.circuit.n_qubits
        return {"angle": n, "amplitude": 2 ** n, "parallel": 2 ** (n // 2)}[self.encoding]

    @property
    def measured_qubits(self) -> tuple[int, ...]:
        if self.measured is not None:
            return tuple(self.measured)
        n = self.circuit.n_qubits
        return tuple(range(n // 2)) if self.encoding == "parallel" else tuple(range(n))

    @property
    def n_outputs(self) -> int:
        if self.readout == "z":
            return self.circuit.n_qubits
        if self.readout == "amplitudes":
            return 2 ** self.circuit.n_qubits
        return 2 ** len(self.measured_qubits)

    def encode(self, features) -> StateVector:
        x = np.asarray(features, dtype=float)
        if x.shape[-1] != self.n_features:
            raise ValueError(f"{self.encoding} encoding on {self.circuit.n_qubits} qubits takes "
                             f"{self.n_features} features, got {x.shape[-1]}")
        return {"angle": angle_encode, "amplitude": amplitude_encode, "parallel": parallel_encode}[self.encoding](x)

    def read(self, state: StateVector) -> np.ndarray:
        if self.readout == "z":
            return readout_z(state)
        if self.readout == "amplitudes":
            return state.amplitudes.real.copy()
        return readout_probs(state, self.measured_qubits)


@dataclass
class PQCRecord:
    layer: PQCLayer
    features: np.ndarray
    thetas: np.ndarray
    final: StateVector
    outputs: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    encoded: np.ndarray | None = None
    matrix: np.ndarray | None = None


def pqc_forward(layer: PQCLayer, features, thetas) -> PQCRecord:
    """Run a batch of circuits (features have shape ``(batch, n_features)``)."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    th = np.asarray(thetas, dtype=float).ravel()
    state = layer.encode(x)
    matrix = None
    if x.shape[0] > 2 ** layer.circuit.n_qubits:
        # more circuits than basis states: cheaper to build the circuit matrix once
        matrix = circuit_matrix(layer.circuit, th)
        final = StateVector(state.n_qubits, state.amplitudes @ matrix, state.degenerate)
    else:
        final = run_pqc(state, layer.circuit, th)
    out = layer.read(final)
    degenerate = np.broadcast_to(np.asarray(state.degenerate, dtype=bool), x.shape[:-1]).copy()
    return PQCRecord(layer, x, th, final, out, degenerate, state.amplitudes, matrix)


def _readout_cotangent(layer: PQCLayer, amps: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = layer.circuit.n_qubits
    if layer.readout == "z":
        zsign = 1.0 - 2.0 * _bits(n)
        return 2.0 * (g @ zsign.T) * amps
    if layer.readout == "amplitudes":
        return g.astype(np.complex128)
    measured = layer.measured_qubits
    if measured == tuple(range(len(measured))):
        m = len(measured)
        full = np.repeat(g, 2 ** (n - m), axis=-1)
    else:
        full = g[..., _marginal_index(n, measured)]
    return 2.0 * full * amps


def _generator_overlap(lam: np.ndarray, amps: np.ndarray, n: int, gate: Gate) -> np.ndarray:
    """``Im <lam| G |amps> / 2`` per batch entry, G the Pauli generating the rotation."""
    q = gate.qubits[0]
    if gate.name == "ry":
        # Im <lam|Y|a> = Re(<lam_1|a_0> - <lam_0|a_1>), no complex temporaries needed
        lv, av = _split(lam, n, q), _split(amps, n, q)
        cross = np.conj(lv[..., 1, :]) * av[..., 0, :] - np.conj(lv[..., 0, :]) * av[..., 1, :]
        return 0.5 * np.real(cross.sum(axis=(-2, -1)))
    g_amps = apply_1q(amps, n, q, _PAULI[gate.name])
    return 0.5 * np.imag(np.sum(np.conj(lam) * g_amps, axis=-1))


def _adjoint_sweep(gates: Sequence[Gate], n: int, amps: np.ndarray, lam: np.ndarray, n_thetas: int):
    """Walk the gates backwards, un-applying them to both the state and its cotangent."""
    grad = np.zeros(n_thetas)
    for gate in reversed(gates):
        if gate.param is not None:
            grad[gate.param] += _generator_overlap(lam, amps, n, gate).sum()
        amps = apply_gate(amps, n, gate, inverse=True)
        lam = apply_gate(lam, n, gate, inverse=True)
    return grad, amps, lam


def circuit_matrix(circuit: CircuitSpec, thetas) -> np.ndarray:
    """Row-convention transfer matrix ``M`` with ``psi_out = psi_in @ M`` (i.e. ``U.T``)."""
    eye = np.eye(2 ** circuit.n_qubits)
    return run_gates(StateVector(circuit.n_qubits, eye), circuit.gates(thetas)).amplitudes


def pqc_grad_exact(record: PQCRecord, upstream_grad) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint-mode gradients of ``sum(upstream * outputs)`` w.r.t. angles and features.

    Returns ``(grad_thetas, grad_features)``; degenerate amplitude-encoded samples get
    a zero feature gradient (their flag is on the record).
    """
    layer = record.layer
    n = layer.circuit.n_qubits
    g = np.asarray(upstream_grad, dtype=float).reshape(record.outputs.shape)
    amps = record.final.amplitudes
    lam = _readout_cotangent(layer, amps, g)

    gates = layer.circuit.gates(record.thetas)
    if record.matrix is None:
        grad_thetas, amps, lam = _adjoint_sweep(gates, n, amps, lam, layer.circuit.n_thetas)
    else:
        # psi_out = psi_in @ M: cotangent of M is psi_in^H lam, and each row of M is a circuit run
        amps = record.encoded
        lam_matrix = np.conj(amps).T @ lam
        lam = lam @ np.conj(record.matrix).T
        grad_thetas, _, _ = _adjoint_sweep(gates, n, record.matrix, lam_matrix, layer.circuit.n_thetas)

    x = record.features
    if layer.encoding == "angle":
        grad_x = np.zeros_like(x)
        for q in reversed(range(n)):
            gate = Gate("ry", (q,))
            grad_x[:, q] = _generator_overlap(lam, amps, n, gate)
            amps = apply_gate(amps, n, gate, angle=x[:, q], inverse=True)
            lam = apply_gate(lam, n, gate, angle=x[:, q], inverse=True)
        return grad_thetas, grad_x

    unit, norm, degenerate = _normalize(x)
    lam_r = lam.real
    if layer.encoding == "parallel":
        d = unit.shape[-1]
        lam_m = lam_r.reshape(lam_r.shape[:-1] + (d, d))
        lam_r = np.einsum("bij,bj->bi", lam_m, unit) + np.einsum("bji,bj->bi", lam_m, unit)
    safe = np.where(degenerate, 1.0, norm)[:, None]
    grad_x = (lam_r - unit * np.sum(unit * lam_r, axis=-1, keepdims=True)) / safe
    grad_x[degenerate] = 0.0
    return grad_thetas, grad_x


def pqc_grad_parameter_shift(expectation: Callable[[np.ndarray], np.ndarray], thetas) -> np.ndarray:
    """Jacobian of ``expectation(thetas)`` by the two-point shift rule for RY generators.

    The last axis of the result runs over the angles.
    """
    th = np.asarray(thetas, dtype=float).ravel()
    cols = []
    for i in range(th.size):
        plus, minus = th.copy(), th.copy()
        plus[i] += np.pi / 2
        minus[i] -= np.pi / 2
        cols.append(0.5 * (np.asarray(expectation(plus)) - np.asarray(expectation(minus))))
    return np.stack(cols, axis=-1)


def pqc_node(layer: PQCLayer, features: ad.Tensor, thetas: ad.Tensor) -> ad.Tensor:
    """Autodiff op wrapping :func:`pqc_forward` with :func:`pqc_grad_exact` as its VJP."""
    record = pqc_forward(layer, features.value, thetas.value)

    def vjp(g):
        grad_thetas, grad_x = pqc_grad_exact(record, g)
        return grad_x, grad_thetas.reshape(thetas.shape)

    return ad.make_node(record.outputs, (features, thetas), vjp)
