"""Gradients of Pauli-Z readouts through the amplitude-embedded entangler circuit.

The training path is a reverse sweep over cached per-layer states. The
parameter-shift rule is kept as an independent oracle for tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import qsim
from .errors import IndexOutOfRange, LengthMismatch, WireOutOfRange, ZeroNormInput
from .qsim import CircuitSpec


@dataclass
class QuantumGradients:
    d_weights: np.ndarray
    d_input_features: np.ndarray


def normalize_features(x: np.ndarray, floor: float = 0.0):
    """Return ``x / max(||x||, floor)`` row-wise along with the row norms.

    With ``floor == 0`` a zero row is an error; with a positive floor it maps
    to the zero vector.
    """
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if floor == 0.0 and np.any(norms < qsim.ZERO_NORM_TOL):
        raise ZeroNormInput("cannot amplitude-embed a zero vector")
    return x / np.maximum(norms, floor), norms


def normalization_vjp(x: np.ndarray, norms: np.ndarray, grad_out: np.ndarray, floor: float = 0.0):
    """Pull ``grad_out`` back through ``x -> x / max(||x||, floor)``.

    Above the floor the Jacobian is (I - xh xh^T) / ||x||; below it, I / floor.
    """
    above = norms > floor
    r = np.where(above, norms, np.maximum(floor, 1e-300))
    xh = x / r
    radial = np.sum(xh * grad_out, axis=-1, keepdims=True)
    return np.where(above, (grad_out - xh * radial) / r, grad_out / r)


def batched_forward(features: np.ndarray, weights: np.ndarray, floor: float = 0.0):
    """Expectations for a batch of raw feature rows, plus what backward needs."""
    x = np.asarray(features, dtype=np.float64)
    n = weights.shape[1]
    if x.shape[-1] != 2**n:
        raise LengthMismatch(f"need {2**n} features per sample, got {x.shape[-1]}")
    psi0, norms = normalize_features(x, floor)
    final, states = qsim._run_layers(psi0.astype(np.complex128), weights, keep_states=True)
    cache = (x, norms, states)
    return qsim._expectations(final, n), cache


def batched_backward(upstream: np.ndarray, weights: np.ndarray, cache, floor: float = 0.0):
    """Reverse sweep. Returns (d_weights summed over the batch, d_features per row)."""
    x, norms, states = cache
    n_layers, n = weights.shape
    u = np.asarray(upstream, dtype=np.float64)
    # adjoint state: M|psi> with M = sum_i u_i Z_i (diagonal)
    lam = (u @ qsim.z_signs(n).T) * states[-1]
    d_weights = np.zeros_like(weights)
    for l in range(n_layers - 1, -1, -1):
        psi = qsim._apply_ring(states[l + 1], n, inverse=True)
        lam = qsim._apply_ring(lam, n, inverse=True)
        for k in range(n - 1, -1, -1):
            # d/dtheta RX = (-i/2) X RX, so dL/dtheta = 2 Re(<lam|(-i/2) X|psi>)
            x_psi = qsim._apply_1q(psi, qsim._FIXED["X"], k, n)
            d_weights[l, k] = np.sum(np.imag(np.sum(np.conj(lam) * x_psi, axis=-1)))
            undo = qsim.rx(-weights[l, k])
            psi = qsim._apply_1q(psi, undo, k, n)
            lam = qsim._apply_1q(lam, undo, k, n)
    # psi0 is real, so the gradient w.r.t. it is 2 Re(lam)
    d_psi0 = 2.0 * lam.real
    return d_weights, normalization_vjp(x, norms, d_psi0, floor)


def expectations(spec: CircuitSpec, input_features) -> np.ndarray:
    x = np.asarray(input_features, dtype=np.float64)
    out, _ = batched_forward(x, spec.weights)
    return out


def adjoint_backward(spec: CircuitSpec, input_features, upstream) -> QuantumGradients:
    x = np.asarray(input_features, dtype=np.float64).ravel()
    u = np.asarray(upstream, dtype=np.float64).ravel()
    if u.size != spec.n_qubits:
        raise LengthMismatch(f"upstream needs {spec.n_qubits} entries, got {u.size}")
    _, cache = batched_forward(x, spec.weights)
    d_w, d_x = batched_backward(u, spec.weights, cache)
    return QuantumGradients(d_w, d_x)


def parameter_shift(spec: CircuitSpec, input_features, wire: int, l: int, k: int) -> float:
    """Two-term shift rule for d<Z_wire>/d theta[l, k]."""
    if not 0 <= l < spec.n_layers or not 0 <= k < spec.n_qubits:
        raise IndexOutOfRange(f"no weight at ({l}, {k})")
    if not 0 <= wire < spec.n_qubits:
        raise WireOutOfRange(f"wire {wire} outside [0, {spec.n_qubits})")
    state = qsim.amplitude_embed(input_features, spec.n_qubits)
    values = []
    for shift in (np.pi / 2, -np.pi / 2):
        w = spec.weights.copy()
        w[l, k] += shift
        shifted = CircuitSpec(spec.n_qubits, spec.n_layers, w)
        _, ev = qsim.circuit_forward(shifted, state)
        values.append(ev[wire])
    return float((values[0] - values[1]) / 2)
