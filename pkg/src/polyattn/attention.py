"""Dot-product attention heads and the transformer block ``T(x) = F(A(x) + x)``.

Tokens are rows: ``X`` is ``(N, D)`` (or ``(B, N, D)`` for a batch) and the
queries are ``X @ Q``. ``F`` carries its own residual, ``F(y) = y + MLP(y)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .activations import ActivationSpec, apply_activation
from .numerics import DimensionError, Value, add, concat, gelu, ipow, layer_norm, matmul, relu, transpose

__all__ = [
    "AttentionParams",
    "BlockParams",
    "HeadRecord",
    "NormTraceRow",
    "TRACE_FIELDS",
    "attention_head",
    "attention_scores",
    "init_block",
    "record_norms",
    "rescore_records",
    "transformer_block",
    "write_trace_csv",
]

TRACE_FIELDS = ("step", "layer", "head", "attn_frob", "jac_frob", "activation")


def _shape(x) -> tuple:
    return x.data.shape if isinstance(x, Value) else np.shape(x)


@dataclass
class AttentionParams:
    Q: Value | np.ndarray
    K: Value | np.ndarray
    V: Value | np.ndarray

    def __post_init__(self):
        sq, sk, sv = _shape(self.Q), _shape(self.K), _shape(self.V)
        if len(sq) != 2 or sq != sk or len(sv) != 2 or sv[0] != sq[0]:
            raise DimensionError(f"need Q, K of shape (D, d) and V of shape (D, M); got Q{sq}, K{sk}, V{sv}")

    @property
    def D(self) -> int:
        return _shape(self.Q)[0]

    @property
    def d(self) -> int:
        return _shape(self.Q)[1]

    @property
    def M(self) -> int:
        return _shape(self.V)[1]

    def values(self) -> list:
        return [self.Q, self.K, self.V]


@dataclass
class BlockParams:
    """Weights of one transformer block.

    The concatenated head outputs (width ``n * M``) are mapped back to width
    ``D`` by ``W_o`` before the attention residual; ``W1, b1, W2, b2`` form
    the MLP inside ``F``. ``scale`` is the learnable multiplier used only by
    dynamically scaled polynomial activations. ``norm="pre"`` layer-normalizes
    the inputs of the attention heads and of the MLP (the residual paths stay
    unnormalized); ``"none"`` is the plain block.
    """

    heads: list[AttentionParams]
    W_o: Value | np.ndarray
    W1: Value | np.ndarray
    b1: Value | np.ndarray
    W2: Value | np.ndarray
    b2: Value | np.ndarray
    activation: ActivationSpec = field(default_factory=ActivationSpec)
    nonlinearity: str = "gelu"
    scale: Value | None = None
    norm: str = "none"

    def __post_init__(self):
        if not self.heads:
            raise ValueError("a block needs at least one head")
        D, d, M = self.heads[0].D, self.heads[0].d, self.heads[0].M
        for h in self.heads:
            if (h.D, h.d, h.M) != (D, d, M):
                raise ValueError("all heads must share D, d and M")
        width = len(self.heads) * M
        hidden = _shape(self.W1)[1] if len(_shape(self.W1)) == 2 else -1
        expected = {
            "W_o": (width, D),
            "W1": (D, hidden),
            "b1": (hidden,),
            "W2": (hidden, D),
            "b2": (D,),
        }
        for name, shp in expected.items():
            if _shape(getattr(self, name)) != shp:
                raise ValueError(f"{name} has shape {_shape(getattr(self, name))}, expected {shp}")
        if self.nonlinearity not in ("gelu", "relu"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.norm not in ("none", "pre"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def D(self) -> int:
        return self.heads[0].D

    def values(self) -> list:
        out = [v for h in self.heads for v in h.values()]
        out += [self.W_o, self.W1, self.b1, self.W2, self.b2]
        if self.scale is not None:
            out.append(self.scale)
        return out


def init_block(
    rng: np.random.Generator,
    D: int,
    d: int,
    M: int,
    heads: int,
    activation: ActivationSpec,
    hidden: int | None = None,
    seq_len: int | None = None,
    nonlinearity: str = "gelu",
    norm: str = "none",
) -> BlockParams:
    """Trainable block with scaled Gaussian initialisation."""
    hidden = hidden or 2 * D

    def w(rows, cols, name):
        return Value(rng.standard_normal((rows, cols)) / math.sqrt(rows), requires_grad=True, name=name)

    hs = [AttentionParams(w(D, d, f"Q{i}"), w(D, d, f"K{i}"), w(D, M, f"V{i}")) for i in range(heads)]
    scale = None
    if activation.kind == "poly" and activation.scaling == "dynamic":
        if seq_len is None:
            raise ValueError("dynamic scaling needs the sequence length to initialise its scale")
        scale = Value(np.asarray(activation.multiplier(seq_len)), requires_grad=True, name="scale")
    return BlockParams(
        heads=hs,
        W_o=w(heads * M, D, "W_o"),
        W1=w(D, hidden, "W1"),
        b1=Value(np.zeros(hidden), requires_grad=True, name="b1"),
        W2=w(hidden, D, "W2"),
        b2=Value(np.zeros(D), requires_grad=True, name="b2"),
        activation=activation,
        nonlinearity=nonlinearity,
        scale=scale,
        norm=norm,
    )


def attention_scores(X, params: AttentionParams):
    """Pre-activation scores ``(X Q)(X K)^T / sqrt(d)``."""
    if _shape(X)[-1] != params.D:
        raise DimensionError(f"input width {_shape(X)[-1]} does not match projection rows {params.D}")
    q = matmul(X, params.Q)
    k = matmul(X, params.K)
    return matmul(q, transpose(k)) * (1.0 / math.sqrt(params.d))


@dataclass
class HeadRecord:
    """Retained activations of one head from the last forward pass."""

    scores: np.ndarray
    weights: np.ndarray


def attention_head(X, params: AttentionParams, spec: ActivationSpec, dynamic_scale: Value | None = None, records: list | None = None):
    """``phi(scores) @ (X V)``; appends a :class:`HeadRecord` to ``records`` if given."""
    scores = attention_scores(X, params)
    weights = apply_activation(spec, scores, dynamic_scale=dynamic_scale)
    if records is not None:
        records.append(HeadRecord(_data(scores).copy(), _data(weights).copy()))
    return matmul(weights, matmul(X, params.V))


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Value) else np.asarray(x)


def transformer_block(X, block: BlockParams, records: list | None = None):
    """One block: ``y = A(X) + X`` then ``y + MLP(y)``."""
    if _shape(X)[-1] != block.D:
        raise ValueError(f"input width {_shape(X)[-1]} does not match block width {block.D}")
    pre = block.norm == "pre"
    a_in = layer_norm(X) if pre else X
    outs = [attention_head(a_in, h, block.activation, block.scale, records) for h in block.heads]
    merged = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
    y = add(matmul(merged, block.W_o), X)
    act = gelu if block.nonlinearity == "gelu" else relu
    hidden = act(add(matmul(layer_norm(y) if pre else y, block.W1), block.b1))
    out = add(y, add(matmul(hidden, block.W2), block.b2))
    if isinstance(X, Value) or any(isinstance(v, Value) for v in block.values()):
        return out
    return out.data


@dataclass(frozen=True)
class NormTraceRow:
    step: int
    layer: int
    head: int
    attn_frob: float
    jac_frob: float | None
    activation: str = ""

    def as_csv_row(self) -> list[str]:
        jac = "" if self.jac_frob is None else f"{self.jac_frob:.9g}"
        return [str(self.step), str(self.layer), str(self.head), f"{self.attn_frob:.9g}", jac, self.activation]


def _batched(a: np.ndarray) -> np.ndarray:
    return a[None] if a.ndim == 2 else a.reshape(-1, *a.shape[-2:])


def _softmax_jac_frob(f: np.ndarray) -> np.ndarray:
    # batched form of SoftmaxJacobian.frobenius, evaluated from the softmax output
    row_sq = np.sum(f * f, axis=-1, keepdims=True)
    return np.sqrt(np.sum(f * f * (1.0 - 2.0 * f + row_sq), axis=(-2, -1)))


def record_norms(
    records: list[HeadRecord],
    step: int,
    layer: int,
    spec: ActivationSpec,
    scale: float | None = None,
) -> list[NormTraceRow]:
    """Frobenius norms of each head's attention matrix and of its derivative.

    For a batch the per-sample norms are averaged. The derivative norm is the
    analytic softmax Jacobian norm, or for polynomials the norm of the
    entrywise derivative ``p * m * x**(p-1)`` where ``m`` is the multiplier
    (``scale`` overrides it for learned scales).
    """
    rows = []
    for h, rec in enumerate(records):
        w = _batched(rec.weights)
        s = _batched(rec.scores)
        attn = float(np.mean(np.sqrt(np.sum(w * w, axis=(-2, -1)))))
        if spec.kind == "softmax":
            jac = float(np.mean(_softmax_jac_frob(w)))
        else:
            p = spec.degree
            m = spec.multiplier(s.shape[-1]) if scale is None else scale
            deriv = p * m * ipow(s, p - 1)
            jac = float(np.mean(np.sqrt(np.sum(deriv * deriv, axis=(-2, -1)))))
        rows.append(NormTraceRow(step, layer, h, attn, jac, str(spec)))
    return rows


def rescore_records(records: list[HeadRecord], spec: ActivationSpec, seq_len: int | None = None) -> list[HeadRecord]:
    """The same scores passed through a different activation (used for matched-score comparisons)."""
    return [HeadRecord(r.scores, apply_activation(spec, r.scores, seq_len=seq_len)) for r in records]


def write_trace_csv(rows: Iterable[NormTraceRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for r in rows:
            writer.writerow(r.as_csv_row())
