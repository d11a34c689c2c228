import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyattn.activations import (
    ActivationSpec,
    VanishingGradientWarning,
    apply_activation,
    matrix_softmax,
    softmax_jacobian,
    softmax_jacobian_frobenius,
)
from polyattn.numerics import DimensionError, Value, backward, finite_diff_grad
from polyattn import numerics as nx


def fd_jacobian(a, h=1e-5):
    """Central-difference Jacobian of the matrix softmax, rows (i, j), columns (k, l)."""
    n = a.shape[0]
    jac = np.zeros((n * n, n * n))
    for col in range(n * n):
        e = np.zeros(n * n)
        e[col] = h
        e = e.reshape(n, n)
        jac[:, col] = ((matrix_softmax(a + e) - matrix_softmax(a - e)) / (2 * h)).reshape(-1)
    return jac


def test_softmax_of_zero_is_uniform():
    assert np.allclose(matrix_softmax(np.zeros((2, 2))), 0.5, rtol=0, atol=0)


def test_softmax_large_diagonal_tends_to_identity():
    assert np.max(np.abs(matrix_softmax(np.diag([100.0, 100.0])) - np.eye(2))) < 1e-12


def test_softmax_rejects_non_square():
    with pytest.raises(DimensionError):
        matrix_softmax(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        softmax_jacobian(np.zeros((3, 2)))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 64), sigma=st.sampled_from([0.1, 1.0, 10.0]), seed=st.integers(0, 2**32 - 1))
def test_softmax_rows_stochastic_and_bounded(n, sigma, seed):
    a = sigma * np.random.default_rng(seed).standard_normal((n, n))
    f = matrix_softmax(a)
    assert np.all(np.abs(f.sum(axis=1) - 1) < 1e-12)
    assert np.all(f > 0)
    assert np.linalg.norm(f) <= math.sqrt(n) * (1 + 1e-12)
    assert softmax_jacobian_frobenius(a) <= 2 * math.sqrt(n)


def test_jacobian_entries_at_zero():
    jac = softmax_jacobian(np.zeros((2, 2)))
    assert jac.entry(0, 0, 0, 0) == 0.25
    assert jac.entry(0, 0, 0, 1) == -0.25
    assert jac.entry(0, 0, 1, 0) == 0.0


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_jacobian_frobenius_at_zero(n):
    # each of the N^2 outputs has squared gradient norm (N-1)/N^3
    assert softmax_jacobian_frobenius(np.zeros((n, n))) == pytest.approx(math.sqrt((n - 1) / n), rel=1e-14)


def test_jacobian_frobenius_n2_value():
    assert softmax_jacobian_frobenius(np.zeros((2, 2))) == pytest.approx(0.70710678118654752, rel=1e-14)


def test_jacobian_vanishes_when_saturated():
    a = np.diag(np.full(4, 60.0))
    assert softmax_jacobian_frobenius(a) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_matches_finite_differences(seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(2, 7))
    a = gen.uniform(-2, 2, (n, n))
    jac = softmax_jacobian(a)
    full = jac.materialize()
    assert np.max(np.abs(full - fd_jacobian(a))) < 1e-9
    assert jac.frobenius() == pytest.approx(np.linalg.norm(full), rel=1e-12)
    # N nonzero entries per output, all in the same input row
    row = full[1 * n + 0].reshape(n, n)
    assert np.count_nonzero(row[1]) == n and np.count_nonzero(np.delete(row, 1, axis=0)) == 0
    g = gen.standard_normal((n, n))
    assert np.allclose(jac.vjp(g), (g.reshape(-1) @ full).reshape(n, n), atol=1e-14)


# ---------------------------------------------------------------------------
# specs

CANONICAL = [
    "softmax",
    "poly:p=3:scale=none",
    "poly:p=3:scale=fixed:k=16",
    "poly:p=3:scale=fixed:k=auto",
    "poly:p=3:scale=dynamic:init=auto",
    "poly:p=2:scale=fixed:k=0.5",
    "poly:p=1:scale=dynamic:init=0.125",
]


@pytest.mark.parametrize("text", CANONICAL)
def test_spec_text_round_trip(text):
    spec = ActivationSpec.parse(text)
    assert str(spec) == text
    assert ActivationSpec.parse(str(spec)) == spec


@pytest.mark.parametrize(
    "text",
    ["soft", "poly:p=0:scale=none", "poly:p=3", "poly:p=3:scale=fixed:k=-1", "poly:p=3:scale=none:k=2",
     "poly:p=3:scale=weird", "poly:p=3:scale=fixed:k=0"],
)
def test_spec_rejects_bad_text(text):
    with pytest.raises(ValueError):
        ActivationSpec.parse(text)


def test_softmax_spec_takes_no_degree():
    with pytest.raises(ValueError):
        ActivationSpec("softmax", degree=3)


def test_fixed_auto_at_256_divides_by_16():
    spec = ActivationSpec.parse("poly:p=3:scale=fixed:k=auto")
    assert spec.multiplier(256) == 1 / 16
    a = np.random.default_rng(0).standard_normal((256, 256))
    assert np.allclose(apply_activation(spec, a), a**3 / 16, rtol=1e-14, atol=0)


def test_dynamic_auto_initial_multiplier():
    assert ActivationSpec.parse("poly:p=3:scale=dynamic:init=auto").multiplier(64) == 1 / 8


@pytest.mark.parametrize("text", ["poly:p=3:scale=none", "poly:p=3:scale=fixed:k=7", "poly:p=3:scale=dynamic:init=auto"])
def test_odd_polynomial_is_odd(text):
    spec = ActivationSpec.parse(text)
    a = np.random.default_rng(1).standard_normal((6, 6))
    assert np.array_equal(apply_activation(spec, -a), -apply_activation(spec, a))


def test_fixed_scale_homogeneity():
    a = np.random.default_rng(2).standard_normal((8, 8))
    raw = np.linalg.norm(apply_activation(ActivationSpec.poly(3, "none"), a))
    scaled = np.linalg.norm(apply_activation(ActivationSpec.poly(3, "fixed", 5.0), a))
    assert scaled == pytest.approx(raw / 5.0, rel=1e-14)


def test_polynomial_breaks_softmax_properties():
    a = np.random.default_rng(3).standard_normal((16, 16))
    out = apply_activation(ActivationSpec.parse("poly:p=3:scale=fixed:k=auto"), a)
    assert np.any(out < 0)
    assert np.any(np.abs(out.sum(axis=1) - 1) > 1e-3)
    assert np.mean(np.abs(out) > 1e-8) == 1.0


@pytest.mark.parametrize("k", [0.01, 1.0, 300.0])
def test_fixed_scale_preserves_row_argmax(k):
    a = np.random.default_rng(4).standard_normal((10, 10))
    out = apply_activation(ActivationSpec.poly(3, "fixed", k), a)
    assert np.array_equal(out.argmax(axis=1), (a**3).argmax(axis=1))


def test_high_degree_warns():
    with pytest.warns(VanishingGradientWarning):
        apply_activation(ActivationSpec.poly(6, "none"), np.ones((2, 2)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        apply_activation(ActivationSpec.poly(5, "none"), np.ones((2, 2)))


def test_activation_rejects_non_square():
    with pytest.raises(DimensionError):
        apply_activation(ActivationSpec(), np.ones((2, 3)))


@pytest.mark.parametrize("text", ["softmax", "poly:p=3:scale=fixed:k=auto", "poly:p=2:scale=none"])
def test_activation_gradient(text):
    spec = ActivationSpec.parse(text)
    a = np.random.default_rng(5).uniform(-2, 2, (4, 4))
    c = np.random.default_rng(6).standard_normal((4, 4))
    v = Value(a, requires_grad=True)
    backward(nx.sum(nx.mul(apply_activation(spec, v), c)))
    numeric = finite_diff_grad(lambda z: float(np.sum(apply_activation(spec, z) * c)), a)
    assert np.max(np.abs(v.grad - numeric)) / max(1.0, np.max(np.abs(numeric))) < 1e-6


def test_dynamic_scale_receives_gradient():
    spec = ActivationSpec.parse("poly:p=3:scale=dynamic:init=auto")
    a = np.random.default_rng(7).standard_normal((4, 4))
    s = Value(np.asarray(0.5), requires_grad=True)
    backward(nx.sum(apply_activation(spec, a, dynamic_scale=s)))
    assert s.grad == pytest.approx(np.sum(a**3), rel=1e-12)
