import csv
import math

import numpy as np
import pytest

from polyattn import numerics as nx
from polyattn.activations import ActivationSpec
from polyattn.attention import (
    AttentionParams,
    BlockParams,
    NormTraceRow,
    attention_head,
    attention_scores,
    init_block,
    record_norms,
    transformer_block,
    write_trace_csv,
)
from polyattn.numerics import DimensionError, backward, finite_diff_grad

SPECS = ["softmax", "poly:p=3:scale=none", "poly:p=3:scale=fixed:k=auto", "poly:p=2:scale=dynamic:init=auto"]


def random_head(gen, D=4, d=2, M=3):
    return AttentionParams(gen.standard_normal((D, d)), gen.standard_normal((D, d)), gen.standard_normal((D, M)))


def test_scores_zero_projections():
    X = np.random.default_rng(0).standard_normal((5, 4))
    p = AttentionParams(np.zeros((4, 2)), np.zeros((4, 2)), np.ones((4, 3)))
    assert np.array_equal(attention_scores(X, p), np.zeros((5, 5)))


def test_scores_single_token_by_hand():
    # x Q = 1 + 2 = 3, x K = 1 + 4 = 5, d = 1
    p = AttentionParams(np.array([[1.0], [1.0]]), np.array([[1.0], [2.0]]), np.eye(2))
    assert attention_scores(np.array([[1.0, 2.0]]), p).tolist() == [[15.0]]


def test_scores_swap_q_k_transposes():
    gen = np.random.default_rng(1)
    X = gen.standard_normal((6, 4))
    p = random_head(gen)
    swapped = AttentionParams(p.K, p.Q, p.V)
    assert np.allclose(attention_scores(X, p), attention_scores(X, swapped).T, rtol=1e-14, atol=1e-14)


def test_scores_width_mismatch():
    with pytest.raises(DimensionError):
        attention_scores(np.ones((3, 5)), random_head(np.random.default_rng(0)))


def test_params_shape_validation():
    with pytest.raises(DimensionError):
        AttentionParams(np.ones((4, 2)), np.ones((4, 3)), np.ones((4, 2)))


def test_softmax_head_with_zero_scores_averages_values():
    gen = np.random.default_rng(2)
    X = gen.standard_normal((5, 4))
    p = AttentionParams(np.zeros((4, 2)), np.zeros((4, 2)), gen.standard_normal((4, 3)))
    out = attention_head(X, p, ActivationSpec())
    assert np.allclose(out, np.tile((X @ p.V).mean(axis=0), (5, 1)), rtol=1e-14, atol=1e-14)


def test_cubic_head_constant_scores_by_hand():
    # identical rows x = [1, 1]: x Q = 1, x K = 1, so every score is 1 and
    # each output row is 1^3 * ([1, 2] + [1, 2])
    X = np.ones((2, 2))
    p = AttentionParams(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]), np.array([[1.0, 0.0], [0.0, 2.0]]))
    out = attention_head(X, p, ActivationSpec.parse("poly:p=3:scale=none"))
    assert out.tolist() == [[2.0, 4.0], [2.0, 4.0]]


@pytest.mark.parametrize("text", SPECS)
def test_head_output_shape(text):
    gen = np.random.default_rng(3)
    out = attention_head(gen.standard_normal((7, 4)), random_head(gen), ActivationSpec.parse(text))
    assert out.shape == (7, 3)


@pytest.mark.parametrize("text", SPECS)
def test_head_permutation_equivariance(text):
    gen = np.random.default_rng(4)
    X = gen.standard_normal((6, 4))
    p = random_head(gen)
    perm = gen.permutation(6)
    spec = ActivationSpec.parse(text)
    assert np.allclose(attention_head(X[perm], p, spec), attention_head(X, p, spec)[perm], rtol=1e-12, atol=1e-12)


def test_softmax_output_is_convex_combination():
    gen = np.random.default_rng(5)
    X = 3 * gen.standard_normal((9, 4))
    p = random_head(gen)
    out = attention_head(X, p, ActivationSpec())
    xv = X @ p.V
    assert np.all(out >= xv.min(axis=0) - 1e-12) and np.all(out <= xv.max(axis=0) + 1e-12)


def plain_block(heads, D, hidden, activation=ActivationSpec(), W_o=None, W1=None, b1=None, W2=None, b2=None):
    M = heads[0].M
    return BlockParams(
        heads=heads,
        W_o=np.eye(len(heads) * M, D) if W_o is None else W_o,
        W1=np.zeros((D, hidden)) if W1 is None else W1,
        b1=np.zeros(hidden) if b1 is None else b1,
        W2=np.zeros((hidden, D)) if W2 is None else W2,
        b2=np.zeros(D) if b2 is None else b2,
        activation=activation,
    )


def test_block_zero_mlp_returns_attention_residual():
    gen = np.random.default_rng(6)
    X = gen.standard_normal((4, 3))
    head = random_head(gen, D=3, d=2, M=3)
    b2 = np.array([0.5, -1.0, 2.0])
    block = plain_block([head], 3, 5, b2=b2)
    expected = attention_head(X, head, ActivationSpec()) + X + b2
    assert np.allclose(transformer_block(X, block), expected, rtol=1e-14, atol=1e-14)


def test_block_uniform_attention_by_hand():
    # Q = K = 0 gives uniform weights, so A(X) is the column mean [2, 3]
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    head = AttentionParams(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2))
    W1 = np.array([[1.0, 0.0], [0.0, -1.0]])
    W2 = np.array([[2.0, 0.0], [0.0, 1.0]])
    block = plain_block([head], 2, 2, W1=W1, W2=W2)
    y = np.array([[3.0, 5.0], [5.0, 7.0]])
    h = y @ W1
    gelu = 0.5 * h * (1 + np.tanh(math.sqrt(2 / math.pi) * (h + 0.044715 * h**3)))
    assert np.allclose(transformer_block(X, block), y + gelu @ W2, rtol=1e-14, atol=1e-14)


def test_block_width_mismatch():
    gen = np.random.default_rng(7)
    with pytest.raises(ValueError):
        plain_block([random_head(gen, D=4, M=3)], 4, 5, W_o=np.zeros((2, 4)))
    block = plain_block([random_head(gen, D=4, M=3)], 4, 5, W_o=np.zeros((3, 4)))
    with pytest.raises(ValueError):
        transformer_block(np.ones((2, 5)), block)


def block_gradient_errors(seed: int, norm: str = "none") -> float:
    """Largest relative error between autodiff and central differences over all block parameters."""
    gen = np.random.default_rng(seed)
    N, D = int(gen.integers(2, 9)), int(gen.integers(2, 9))
    d, M = int(gen.integers(1, 5)), int(gen.integers(1, 5))
    spec = ActivationSpec.parse(SPECS[seed % len(SPECS)])
    block = init_block(gen, D, d, M, heads=2, activation=spec, hidden=6, seq_len=N, norm=norm)
    X = gen.uniform(-1, 1, (N, D))
    C = gen.standard_normal((N, D))
    params = block.values()

    def loss_of():
        return nx.sum(nx.mul(transformer_block(X, block), C))

    backward(loss_of())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        original = p.data.copy()

        def f(z):
            p.data = z
            out = float(loss_of().data)
            p.data = original
            return out

        numeric = finite_diff_grad(f, original)
        p.data = original
        worst = max(worst, np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-3))
    return worst


@pytest.mark.parametrize("seed", range(4))
def test_block_gradients_match_finite_differences(seed):
    assert block_gradient_errors(seed) < 1e-5


def test_block_gradients_with_pre_norm():
    assert block_gradient_errors(11, norm="pre") < 1e-5


def test_record_norms_softmax_bound():
    gen = np.random.default_rng(8)
    X = gen.standard_normal((3, 16, 4))
    records = []
    for _ in range(2):
        attention_head(X, random_head(gen), ActivationSpec(), records=records)
    rows = record_norms(records, step=5, layer=1, spec=ActivationSpec())
    assert [r.head for r in rows] == [0, 1]
    for r in rows:
        assert 0 <= r.attn_frob <= 4.0 and r.jac_frob <= 8.0 and r.step == 5


def test_record_norms_fixed_scale_homogeneity():
    gen = np.random.default_rng(9)
    X = gen.standard_normal((16, 4))
    head = random_head(gen)
    raw, scaled = [], []
    attention_head(X, head, ActivationSpec.poly(3, "none"), records=raw)
    attention_head(X, head, ActivationSpec.poly(3, "fixed"), records=scaled)
    r = record_norms(raw, 0, 0, ActivationSpec.poly(3, "none"))[0]
    s = record_norms(scaled, 0, 0, ActivationSpec.poly(3, "fixed"))[0]
    assert s.attn_frob == pytest.approx(r.attn_frob / 4, rel=1e-13)
    assert s.jac_frob == pytest.approx(r.jac_frob / 4, rel=1e-13)


@pytest.mark.parametrize("p", [2, 3, 5])
def test_record_norms_zero_scores(p):
    X = np.random.default_rng(10).standard_normal((6, 4))
    head = AttentionParams(np.zeros((4, 2)), np.zeros((4, 2)), np.ones((4, 2)))
    recs = []
    spec = ActivationSpec.poly(p, "fixed")
    attention_head(X, head, spec, records=recs)
    row = record_norms(recs, 0, 0, spec)[0]
    assert row.attn_frob == 0.0


def test_trace_csv_schema(tmp_path):
    rows = [NormTraceRow(0, 0, 0, 1.0, 2.5, "softmax"), NormTraceRow(50, 1, 1, 1 / 3, None, "softmax")]
    path = tmp_path / "trace.csv"
    write_trace_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,layer,head,attn_frob,jac_frob,activation"
    assert lines[2] == "50,1,1,0.333333333,,softmax"
    assert list(csv.reader(lines))[1] == ["0", "0", "0", "1", "2.5", "softmax"]
