import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qhybrid import qgrad, qsim
from qhybrid.errors import IndexOutOfRange, ZeroNormInput
from qhybrid.qsim import CircuitSpec

from oracles import central_diff, rel_err


def loss_fn(spec, x, u):
    return float(qgrad.expectations(spec, x) @ u)


def test_zero_upstream_gives_zero_gradients():
    spec = CircuitSpec.random(4, 2, 0)
    g = qgrad.adjoint_backward(spec, np.arange(1, 17.0), np.zeros(4))
    assert np.all(g.d_weights == 0) and np.all(g.d_input_features == 0)


def test_single_qubit_closed_form():
    for theta in np.linspace(-3, 3, 13):
        spec = CircuitSpec(1, 1, [[theta]])
        g = qgrad.adjoint_backward(spec, [1.0, 0.0], [1.0])
        assert abs(g.d_weights[0, 0] + np.sin(theta)) < 1e-12


def test_shapes_and_finiteness():
    spec = CircuitSpec.random(3, 4, 1)
    g = qgrad.adjoint_backward(spec, np.linspace(0.1, 1, 8), np.ones(3))
    assert g.d_weights.shape == (4, 3) and g.d_input_features.shape == (8,)
    assert np.all(np.isfinite(g.d_weights)) and np.all(np.isfinite(g.d_input_features))


def test_zero_norm_input_rejected():
    with pytest.raises(ZeroNormInput):
        qgrad.adjoint_backward(CircuitSpec(2, 1), np.zeros(4), np.ones(2))


def test_adjoint_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n, layers = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        spec = CircuitSpec.random(n, layers, rng)
        x, u = rng.normal(size=2**n), rng.normal(size=n)
        g = qgrad.adjoint_backward(spec, x, u)
        fd_w = central_diff(lambda w: loss_fn(CircuitSpec(n, layers, w), x, u), spec.weights)
        fd_x = central_diff(lambda v: loss_fn(spec, v, u), x)
        assert rel_err(g.d_weights, fd_w) < 1e-6
        assert rel_err(g.d_input_features, fd_x) < 1e-6


def test_parameter_shift_examples():
    assert abs(qgrad.parameter_shift(CircuitSpec(1, 1), [1, 0], 0, 0, 0)) < 1e-15
    spec = CircuitSpec(1, 1, [[np.pi / 2]])
    assert abs(qgrad.parameter_shift(spec, [1, 0], 0, 0, 0) + 1) < 1e-12


def test_parameter_shift_index_errors():
    spec = CircuitSpec(2, 1)
    with pytest.raises(IndexOutOfRange):
        qgrad.parameter_shift(spec, [1, 0, 0, 0], 0, 1, 0)
    with pytest.raises(IndexOutOfRange):
        qgrad.parameter_shift(spec, [1, 0, 0, 0], 0, 0, 2)


def test_parameter_shift_matches_adjoint_every_entry():
    rng = np.random.default_rng(1)
    for _ in range(5):
        spec = CircuitSpec.random(3, 2, rng)
        x = rng.normal(size=8)
        for wire in range(3):
            u = np.eye(3)[wire]
            g = qgrad.adjoint_backward(spec, x, u)
            for l in range(2):
                for k in range(3):
                    assert abs(qgrad.parameter_shift(spec, x, wire, l, k) - g.d_weights[l, k]) < 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_input_gradient_orthogonal_to_input(seed):
    rng = np.random.default_rng(seed)
    spec = CircuitSpec.random(4, 2, rng)
    x = rng.normal(size=16) * rng.uniform(0.1, 10)
    g = qgrad.adjoint_backward(spec, x, rng.normal(size=4))
    assert abs(g.d_input_features @ (x / np.linalg.norm(x))) < 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-3, 1e3))
def test_embedding_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    spec = CircuitSpec.random(4, 2, rng)
    x = rng.normal(size=16)
    assert np.max(np.abs(qgrad.expectations(spec, x) - qgrad.expectations(spec, scale * x))) < 1e-12


def test_floored_normalization_gradient():
    rng = np.random.default_rng(3)
    w = rng.uniform(0, 2 * np.pi, (2, 2))
    # rows 0 and 1 sit below the floor, row 2 above it
    x = np.vstack([rng.normal(size=(2, 4)) * 1e-2, rng.normal(size=(1, 4))])
    u = rng.normal(size=(3, 2))
    floor = 0.5

    def f(v):
        ev, _ = qgrad.batched_forward(v, w, floor)
        return float(np.sum(ev * u))

    _, cache = qgrad.batched_forward(x, w, floor)
    _, dx = qgrad.batched_backward(u, w, cache, floor)
    assert rel_err(dx, central_diff(f, x)) < 1e-6


def test_zero_row_with_floor_is_finite():
    w = np.zeros((1, 2))
    ev, cache = qgrad.batched_forward(np.zeros((1, 4)), w, 1e-12)
    assert np.all(ev == 0)
    d_w, d_x = qgrad.batched_backward(np.ones((1, 2)), w, cache, 1e-12)
    assert np.all(np.isfinite(d_w)) and np.all(np.isfinite(d_x))


def test_batched_matches_single_sample():
    rng = np.random.default_rng(4)
    spec = CircuitSpec.random(4, 2, rng)
    x, u = rng.normal(size=(5, 16)), rng.normal(size=(5, 4))
    ev, cache = qgrad.batched_forward(x, spec.weights)
    d_w, d_x = qgrad.batched_backward(u, spec.weights, cache)
    total_w = np.zeros_like(spec.weights)
    for i in range(5):
        g = qgrad.adjoint_backward(spec, x[i], u[i])
        _, ev_i = qsim.circuit_forward(spec, qsim.amplitude_embed(x[i]))
        np.testing.assert_allclose(ev[i], ev_i, atol=1e-14)
        np.testing.assert_allclose(d_x[i], g.d_input_features, atol=1e-14)
        total_w += g.d_weights
    np.testing.assert_allclose(d_w, total_w, atol=1e-13)
