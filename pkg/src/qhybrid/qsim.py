"""Exact statevector simulation for small qubit registers.

Basis ordering: wire 0 is the most significant bit of the basis index, so
``|b_0 b_1 ... b_{n-1}>`` lives at index ``sum(b_i * 2**(n-1-i))``.

The private ``_apply_*`` kernels accept amplitude arrays with any number of
leading batch axes (shape ``(..., 2**n)``); the public functions work on a
single :class:`StateVector`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import cos, sin

import numpy as np

from .errors import (
    DuplicateWires,
    LengthMismatch,
    QubitMismatch,
    TooManyQubits,
    WireOutOfRange,
    ZeroNormInput,
    InvalidBit,
)

ZERO_NORM_TOL = 1e-12
ORACLE_MAX_QUBITS = 10

_SQRT2_INV = 1.0 / np.sqrt(2.0)
_FIXED = {
    "X": np.array([[0, 1], [1, 0]], dtype=np.complex128),
    "Z": np.array([[1, 0], [0, -1]], dtype=np.complex128),
    "H": np.array([[1, 1], [1, -1]], dtype=np.complex128) * _SQRT2_INV,
}
_ALIASES = {"PAULIX": "X", "PAULIZ": "Z", "HADAMARD": "H", "CX": "CNOT"}
ROTATIONS = ("RX", "RY", "RZ")


def rx(theta: float) -> np.ndarray:
    c, s = cos(theta / 2), sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=np.complex128)


def ry(theta: float) -> np.ndarray:
    c, s = cos(theta / 2), sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=np.complex128)


def rz(theta: float) -> np.ndarray:
    return np.array(
        [[np.exp(-0.5j * theta), 0], [0, np.exp(0.5j * theta)]], dtype=np.complex128
    )


_ROTATION_MATRIX = {"RX": rx, "RY": ry, "RZ": rz}


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateVector:
    amplitudes: np.ndarray
    n_qubits: int

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.n_qubits < 1:
            raise ValueError("n_qubits must be positive")
        if amps.shape != (2**self.n_qubits,):
            raise LengthMismatch(
                f"expected {2**self.n_qubits} amplitudes, got shape {amps.shape}"
            )
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def zero(cls, n_qubits: int) -> "StateVector":
        amps = np.zeros(2**n_qubits, dtype=np.complex128)
        amps[0] = 1.0
        return cls(amps, n_qubits)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2


@dataclass(frozen=True)
class Gate:
    """A named gate acting on ``wires``.

    ``kind`` is one of RX, RY, RZ, CNOT, X, Z, H (PauliX/PauliZ/Hadamard are
    accepted as aliases). For CNOT, ``wires == (control, target)``.
    """

    kind: str
    wires: tuple[int, ...]
    angle: float | None = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.upper(), self.kind.upper())
        if kind not in _FIXED and kind not in ROTATIONS and kind != "CNOT":
            raise ValueError(f"unknown gate kind {self.kind!r}")
        wires = tuple(int(w) for w in np.atleast_1d(self.wires))
        expected = 2 if kind == "CNOT" else 1
        if len(wires) != expected:
            raise ValueError(f"{kind} acts on {expected} wire(s), got {wires}")
        if len(set(wires)) != len(wires):
            raise DuplicateWires(f"{kind} wires must be distinct, got {wires}")
        if kind in ROTATIONS and self.angle is None:
            raise ValueError(f"{kind} needs an angle")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "wires", wires)

    def matrix(self) -> np.ndarray:
        """Unitary on the gate's own wires (2x2, or 4x4 for CNOT with control as MSB)."""
        if self.kind in ROTATIONS:
            return _ROTATION_MATRIX[self.kind](float(self.angle))
        if self.kind == "CNOT":
            m = np.eye(4, dtype=np.complex128)
            m[2:, 2:] = _FIXED["X"]
            return m
        return _FIXED[self.kind].copy()


@dataclass
class CircuitSpec:
    """Layered entangler circuit: per layer, RX on every wire then a CNOT ring."""

    n_qubits: int
    n_layers: int
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n_qubits < 1 or self.n_layers < 1:
            raise ValueError("n_qubits and n_layers must be positive")
        if self.weights is None:
            self.weights = np.zeros((self.n_layers, self.n_qubits))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.n_layers, self.n_qubits):
            raise LengthMismatch(
                f"weights shape {self.weights.shape} != "
                f"({self.n_layers}, {self.n_qubits})"
            )

    @classmethod
    def random(cls, n_qubits: int, n_layers: int, rng=None) -> "CircuitSpec":
        rng = np.random.default_rng(rng)
        return cls(n_qubits, n_layers, rng.uniform(0, 2 * np.pi, (n_layers, n_qubits)))

    def gates(self) -> list[Gate]:
        out = []
        for layer in self.weights:
            out.extend(Gate("RX", (k,), float(t)) for k, t in enumerate(layer))
            out.extend(Gate("CNOT", pair) for pair in ring_pairs(self.n_qubits))
        return out


@dataclass(frozen=True)
class PauliZObservable:
    wire: int
    eigenvalues: tuple[float, float] = (1.0, -1.0)

    def projectors(self, n_qubits: int) -> tuple[np.ndarray, np.ndarray]:
        """Basis indices where the wire's bit is 0 and 1, respectively."""
        _check_wire(self.wire, n_qubits)
        bits = _bit_table(n_qubits)[:, self.wire]
        idx = np.arange(2**n_qubits)
        return idx[bits == 0], idx[bits == 1]

    def expectation(self, state: StateVector) -> float:
        probs = state.probabilities()
        total = 0.0
        for lam, proj in zip(self.eigenvalues, self.projectors(state.n_qubits)):
            total += lam * probs[proj].sum()
        return float(total)


def ring_pairs(n_qubits: int) -> list[tuple[int, int]]:
    """(control, target) pairs of the entangling ring.

    n=1 has no CNOT; n=2 uses a single CNOT(0, 1) because the closed ring
    would apply it twice and cancel.
    """
    if n_qubits == 1:
        return []
    if n_qubits == 2:
        return [(0, 1)]
    return [(k, (k + 1) % n_qubits) for k in range(n_qubits)]


# ---------------------------------------------------------------------------
# Batched kernels
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _bit_table(n_qubits: int) -> np.ndarray:
    idx = np.arange(2**n_qubits)[:, None]
    shifts = np.arange(n_qubits - 1, -1, -1)[None, :]
    table = (idx >> shifts) & 1
    table.setflags(write=False)
    return table


@lru_cache(maxsize=None)
def z_signs(n_qubits: int) -> np.ndarray:
    """(2**n, n) matrix of Pauli-Z eigenvalues, +1 where bit i is 0."""
    signs = 1.0 - 2.0 * _bit_table(n_qubits)
    signs.setflags(write=False)
    return signs


@lru_cache(maxsize=None)
def _cnot_perm(n_qubits: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(2**n_qubits)
    cbit = 1 << (n_qubits - 1 - control)
    tbit = 1 << (n_qubits - 1 - target)
    perm = np.where(idx & cbit, idx ^ tbit, idx)
    perm.setflags(write=False)
    return perm


def _apply_1q(amps: np.ndarray, matrix: np.ndarray, wire: int, n_qubits: int) -> np.ndarray:
    lead = amps.shape[:-1]
    view = amps.reshape(lead + (2**wire, 2, 2 ** (n_qubits - wire - 1)))
    out = np.einsum("ij,...ajb->...aib", matrix, view)
    return out.reshape(amps.shape)


def _apply_cnot(amps: np.ndarray, control: int, target: int, n_qubits: int) -> np.ndarray:
    # CNOT is a self-inverse basis permutation
    return amps[..., _cnot_perm(n_qubits, control, target)]


def _apply_ring(amps: np.ndarray, n_qubits: int, inverse: bool = False) -> np.ndarray:
    pairs = ring_pairs(n_qubits)
    for c, t in reversed(pairs) if inverse else pairs:
        amps = _apply_cnot(amps, c, t, n_qubits)
    return amps


def _apply_rx_layer(amps: np.ndarray, angles: np.ndarray, n_qubits: int) -> np.ndarray:
    for k in range(n_qubits):
        amps = _apply_1q(amps, rx(angles[k]), k, n_qubits)
    return amps


def _run_layers(amps: np.ndarray, weights: np.ndarray, keep_states: bool = False):
    """Apply every entangler layer; optionally return each layer's input state."""
    n_qubits = weights.shape[1]
    states = [amps] if keep_states else None
    for layer in weights:
        amps = _apply_ring(_apply_rx_layer(amps, layer, n_qubits), n_qubits)
        if keep_states:
            states.append(amps)
    return amps, states


def _expectations(amps: np.ndarray, n_qubits: int) -> np.ndarray:
    probs = amps.real**2 + amps.imag**2
    return probs @ z_signs(n_qubits)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def _n_from_length(length: int) -> int:
    n = int(length).bit_length() - 1
    if n < 1 or 2**n != length:
        raise LengthMismatch(f"length {length} is not a power of two >= 2")
    return n


def _check_wire(wire: int, n_qubits: int) -> None:
    if not 0 <= wire < n_qubits:
        raise WireOutOfRange(f"wire {wire} outside [0, {n_qubits})")


def amplitude_embed(features, n_qubits: int | None = None) -> StateVector:
    x = np.asarray(features, dtype=np.float64).ravel()
    if n_qubits is None:
        n_qubits = _n_from_length(x.size)
    elif x.size != 2**n_qubits:
        raise LengthMismatch(f"need {2**n_qubits} features for {n_qubits} qubits, got {x.size}")
    norm = np.linalg.norm(x)
    if norm < ZERO_NORM_TOL:
        raise ZeroNormInput("cannot amplitude-embed a zero vector")
    return StateVector((x / norm).astype(np.complex128), n_qubits)


def angle_embed(features, n_qubits: int | None = None) -> StateVector:
    x = np.asarray(features, dtype=np.float64).ravel()
    if n_qubits is not None and x.size != n_qubits:
        raise LengthMismatch(f"need {n_qubits} angles, got {x.size}")
    amps = np.ones(1, dtype=np.complex128)
    for theta in x:
        amps = np.kron(amps, np.array([cos(theta / 2), sin(theta / 2)]))
    return StateVector(amps, x.size)


def basis_embed(bits) -> StateVector:
    b = np.asarray(bits).ravel()
    if b.size == 0 or not np.all((b == 0) | (b == 1)):
        raise InvalidBit(f"bits must be 0/1, got {bits!r}")
    n = b.size
    index = int(sum(int(v) << (n - 1 - i) for i, v in enumerate(b)))
    amps = np.zeros(2**n, dtype=np.complex128)
    amps[index] = 1.0
    return StateVector(amps, n)


def apply_gate(state: StateVector, gate: Gate) -> StateVector:
    n = state.n_qubits
    for w in gate.wires:
        _check_wire(w, n)
    if gate.kind == "CNOT":
        amps = _apply_cnot(state.amplitudes, gate.wires[0], gate.wires[1], n)
    else:
        amps = _apply_1q(state.amplitudes, gate.matrix(), gate.wires[0], n)
    return StateVector(amps, n)


def entangler_layer(state: StateVector, layer_weights) -> StateVector:
    w = np.asarray(layer_weights, dtype=np.float64).ravel()
    n = state.n_qubits
    if w.size != n:
        raise LengthMismatch(f"need {n} layer weights, got {w.size}")
    return StateVector(_apply_ring(_apply_rx_layer(state.amplitudes, w, n), n), n)


def expectation_z(state: StateVector, wire: int) -> float:
    _check_wire(wire, state.n_qubits)
    return float(_expectations(state.amplitudes, state.n_qubits)[wire])


def circuit_forward(spec: CircuitSpec, input_state: StateVector):
    """Run all layers; return the final state and <Z_i> for every wire."""
    if input_state.n_qubits != spec.n_qubits:
        raise QubitMismatch(
            f"state has {input_state.n_qubits} qubits, circuit has {spec.n_qubits}"
        )
    amps, _ = _run_layers(input_state.amplitudes, spec.weights)
    return StateVector(amps, spec.n_qubits), _expectations(amps, spec.n_qubits)


# ---------------------------------------------------------------------------
# Dense reference construction (tests and verification only)
# ---------------------------------------------------------------------------


def _embed_1q(matrix: np.ndarray, wire: int, n_qubits: int) -> np.ndarray:
    ops = [np.eye(2, dtype=np.complex128)] * n_qubits
    ops[wire] = matrix
    out = np.ones((1, 1), dtype=np.complex128)
    for op in ops:
        out = np.kron(out, op)
    return out


def _dense_cnot(control: int, target: int, n_qubits: int) -> np.ndarray:
    p0 = np.array([[1, 0], [0, 0]], dtype=np.complex128)
    p1 = np.array([[0, 0], [0, 1]], dtype=np.complex128)
    return _embed_1q(p0, control, n_qubits) + _embed_1q(p1, control, n_qubits) @ _embed_1q(
        _FIXED["X"], target, n_qubits
    )


def dense_gate_matrix(gate: Gate, n_qubits: int) -> np.ndarray:
    if gate.kind == "CNOT":
        return _dense_cnot(gate.wires[0], gate.wires[1], n_qubits)
    return _embed_1q(gate.matrix(), gate.wires[0], n_qubits)


def dense_unitary_oracle(spec: CircuitSpec) -> np.ndarray:
    """Full 2**n x 2**n matrix of the circuit, built from Kronecker products."""
    n = spec.n_qubits
    if n > ORACLE_MAX_QUBITS:
        raise TooManyQubits(f"dense oracle limited to {ORACLE_MAX_QUBITS} qubits")
    u = np.eye(2**n, dtype=np.complex128)
    for gate in spec.gates():
        u = dense_gate_matrix(gate, n) @ u
    return u


# ---------------------------------------------------------------------------
# ASCII rendering
# ---------------------------------------------------------------------------


def render_circuit(spec: CircuitSpec) -> str:
    """One line per wire; each column is an RX layer or one CNOT of the ring."""
    n = spec.n_qubits
    columns: list[list[str]] = []
    for layer in spec.weights:
        columns.append([f"RX({t:.2f})" for t in layer])
        for c, t in ring_pairs(n):
            col = ["─"] * n
            col[c], col[t] = "●", "⊕"
            lo, hi = min(c, t), max(c, t)
            for w in range(lo + 1, hi):
                col[w] = "│"
            columns.append(col)
    label_w = len(str(n - 1))
    lines = []
    for w in range(n):
        parts = [f"{w:>{label_w}}: "]
        for col in columns:
            width = max(len(cell) for cell in col)
            parts.append("──" + col[w].center(width, "─"))
        parts.append("──┤ ⟨Z⟩")
        lines.append("".join(parts))
    return "\n".join(lines) + "\n"
