import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from polyattn import numerics as nx
from polyattn.numerics import (
    DimensionError,
    RngStream,
    Value,
    backward,
    finite_diff_grad,
    frobenius_norm,
    gaussian_matrix,
    matmul,
)

H = 1e-5


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_matmul_identity_cases():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert np.array_equal(matmul(m, np.eye(2)), m)


def test_matmul_row_by_column():
    # 1*3 + 2*4 = 11
    assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative():
    gen = np.random.default_rng(3)
    a, b, c = (gen.standard_normal((8, 8)) for _ in range(3))
    assert rel_err(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-12


@pytest.mark.parametrize("shape", [(1, 1), (3, 5), (7, 2)])
def test_frobenius_zero(shape):
    assert frobenius_norm(np.zeros(shape)) == 0.0


@pytest.mark.parametrize("n", [1, 4, 9])
def test_frobenius_identity(n):
    assert frobenius_norm(np.eye(n)) == pytest.approx(np.sqrt(n), rel=1e-15)


def test_frobenius_3_4_5():
    assert frobenius_norm([[3.0, 4.0]]) == 5.0


def test_gaussian_variance_large_sample():
    m = gaussian_matrix(RngStream(11), 1000, 1000, 1.0)
    assert 0.99 <= m.var() <= 1.01
    assert abs(m.mean()) < 0.005
    assert np.all(np.isfinite(m))


def test_gaussian_deterministic_and_scaled():
    s = RngStream(5, 2)
    a = gaussian_matrix(s, 4, 3, 1.0)
    assert np.array_equal(a, gaussian_matrix(s, 4, 3, 1.0))
    assert np.array_equal(gaussian_matrix(s, 4, 3, 2.0), 2.0 * a)
    assert not np.array_equal(a, gaussian_matrix(RngStream(5, 3), 4, 3, 1.0))


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_gaussian_rejects_nonpositive_sigma(sigma):
    with pytest.raises(ValueError):
        gaussian_matrix(RngStream(0), 2, 2, sigma)


def test_substreams_independent_of_consumption_order():
    s = RngStream(9)
    first = [s.substream(i).generator().standard_normal(3) for i in range(4)]
    again = [s.substream(i).generator().standard_normal(3) for i in reversed(range(4))][::-1]
    for x, y in zip(first, again):
        assert np.array_equal(x, y)


def test_substreams_reproducible_in_threads():
    from concurrent.futures import ThreadPoolExecutor

    s = RngStream(123, 4)

    def draw(i):
        return gaussian_matrix(s.substream(i), 8, 8, 1.0)

    serial = [draw(i) for i in range(16)]
    with ThreadPoolExecutor(4) as pool:
        parallel = list(pool.map(draw, range(16)))
    assert all(np.array_equal(a, b) for a, b in zip(serial, parallel))


def test_backward_sum_gives_ones():
    m = Value(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(m.sum())
    assert np.array_equal(m.grad, np.ones((2, 3)))


def test_backward_squared_norm_gives_2m():
    data = np.array([[1.0, -2.0], [0.5, 3.0]])
    m = Value(data, requires_grad=True)
    backward(nx.sum(nx.mul(m, m)))
    assert np.array_equal(m.grad, 2 * data)


def test_backward_rejects_non_scalar():
    m = Value(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(DimensionError):
        backward(m)


def test_backward_does_not_accumulate_across_calls():
    m = Value(np.ones((2, 2)), requires_grad=True)
    loss = nx.sum(nx.mul(m, 3.0))
    backward(loss)
    backward(loss)
    assert np.array_equal(m.grad, np.full((2, 2), 3.0))


def test_finite_diff_linear_is_exact():
    g = finite_diff_grad(np.sum, np.random.default_rng(0).standard_normal((3, 4)), H)
    assert np.allclose(g, 1.0, atol=1e-9)


def test_finite_diff_square():
    g = finite_diff_grad(lambda x: x[0, 0] ** 2, np.array([[3.0]]), 1e-5)
    assert abs(g[0, 0] - 6.0) < 1e-8


def test_finite_diff_frobenius_norm():
    m = np.random.default_rng(1).standard_normal((4, 3))
    g = finite_diff_grad(frobenius_norm, m, H)
    assert np.max(np.abs(g - m / frobenius_norm(m))) < 1e-6


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_grad(np.sum, np.ones((1, 1)), 0.0)


# each case builds a scalar from a (3, 3) input and the autodiff graph
OPS = {
    "matmul": lambda x, c: nx.sum(nx.matmul(nx.matmul(x, c), x)),
    "transpose": lambda x, c: nx.sum(nx.mul(nx.transpose(x), c)),
    "add": lambda x, c: nx.sum(nx.mul(nx.add(x, c), nx.add(x, c))),
    "scalar_mul": lambda x, c: nx.sum(nx.mul(nx.mul(x, 2.5), c)),
    "power3": lambda x, c: nx.sum(nx.mul(nx.power(x, 3), c)),
    "power2": lambda x, c: nx.sum(nx.mul(nx.power(x, 2), c)),
    "softmax": lambda x, c: nx.sum(nx.mul(nx.row_softmax(x), c)),
    "gelu": lambda x, c: nx.sum(nx.mul(nx.gelu(x), c)),
    "relu": lambda x, c: nx.sum(nx.mul(nx.relu(x), c)),
    "layer_norm": lambda x, c: nx.sum(nx.mul(nx.layer_norm(x), c)),
    "mean_axis": lambda x, c: nx.sum(nx.mul(nx.mean(nx.mul(x, x), axis=0), c[0])),
    "concat": lambda x, c: nx.sum(nx.mul(nx.concat([x, nx.mul(x, x)], axis=-1), nx.concat([c, c], axis=-1))),
    "cross_entropy": lambda x, c: nx.cross_entropy(nx.matmul(x, c), np.array([0, 2, 1])),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=15, deadline=None)
@given(
    x=arrays(np.float64, (3, 3), elements=st.floats(-2, 2)),
    c=arrays(np.float64, (3, 3), elements=st.floats(-2, 2)),
)
def test_backward_matches_finite_differences(name, x, c):
    op = OPS[name]
    if name == "relu" and np.min(np.abs(x)) < 1e-3:
        return  # kink within reach of the difference step
    if name == "layer_norm" and np.min(x.var(axis=-1)) < 1e-2:
        return  # near-constant rows sit on the eps-dominated, sharply curved branch
    xv = Value(x, requires_grad=True)
    backward(op(xv, c))
    numeric = finite_diff_grad(lambda z: float(op(Value(z), c).data), x, H)
    scale = max(np.max(np.abs(numeric)), 1.0)
    assert np.max(np.abs(xv.grad - numeric)) / scale < 1e-6


def test_embedding_gradient_scatters_rows():
    table = Value(np.random.default_rng(2).standard_normal((4, 3)), requires_grad=True)
    ids = np.array([[0, 2, 2], [3, 0, 1]])
    backward(nx.sum(nx.embedding(table, ids)))
    assert np.array_equal(table.grad, np.array([[2.0] * 3, [1.0] * 3, [2.0] * 3, [1.0] * 3]))


def test_batched_matmul_broadcast_gradient():
    gen = np.random.default_rng(4)
    x = gen.standard_normal((5, 3, 4))
    w = gen.standard_normal((4, 2))
    wv = Value(w, requires_grad=True)
    backward(nx.sum(nx.power(nx.matmul(x, wv), 2)))
    numeric = finite_diff_grad(lambda z: float(np.sum((x @ z) ** 2)), w, H)
    assert rel_err(wv.grad, numeric) < 1e-6
