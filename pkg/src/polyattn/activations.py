"""Attention activations: the matrix softmax map and scaled polynomials.

The text form of an :class:`ActivationSpec` is used in configs and CSV labels::

    softmax
    poly:p=3:scale=none
    poly:p=3:scale=fixed:k=16
    poly:p=3:scale=fixed:k=auto
    poly:p=3:scale=dynamic:init=auto
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, Value, ipow, mul, power, row_softmax

__all__ = [
    "ActivationSpec",
    "SoftmaxJacobian",
    "VanishingGradientWarning",
    "apply_activation",
    "matrix_softmax",
    "softmax_jacobian",
    "softmax_jacobian_frobenius",
]

SCALINGS = ("none", "fixed", "dynamic")


class VanishingGradientWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ActivationSpec:
    """Which attention activation to apply.

    ``value`` is the divisor ``k`` for fixed scaling and the initial multiplier
    for dynamic scaling. ``None`` means "auto": derived from the sequence
    length at call time (``k = sqrt(N)``, ``init = 1/sqrt(N)``).
    """

    kind: str = "softmax"
    degree: int | None = None
    scaling: str | None = None
    value: float | None = None

    def __post_init__(self):
        if self.kind == "softmax":
            if self.degree is not None or self.scaling is not None or self.value is not None:
                raise ValueError("softmax takes no degree or scaling")
        elif self.kind == "poly":
            if self.degree is None or int(self.degree) != self.degree or self.degree < 1:
                raise ValueError(f"polynomial degree must be a positive integer, got {self.degree!r}")
            if self.scaling not in SCALINGS:
                raise ValueError(f"scaling must be one of {SCALINGS}, got {self.scaling!r}")
            if self.scaling == "none" and self.value is not None:
                raise ValueError("scale=none takes no value")
            if self.value is not None and not (self.value > 0 and math.isfinite(self.value)):
                raise ValueError(f"scale value must be a positive finite real, got {self.value!r}")
        else:
            raise ValueError(f"unknown activation kind {self.kind!r}")

    @classmethod
    def softmax(cls) -> "ActivationSpec":
        return cls()

    @classmethod
    def poly(cls, p: int = 3, scaling: str = "none", value: float | None = None) -> "ActivationSpec":
        return cls("poly", p, scaling, value)

    @classmethod
    def parse(cls, text: str) -> "ActivationSpec":
        text = text.strip()
        if text == "softmax":
            return cls()
        parts = text.split(":")
        if parts[0] != "poly":
            raise ValueError(f"cannot parse activation {text!r}")
        fields = {}
        for part in parts[1:]:
            key, sep, val = part.partition("=")
            if not sep or key in fields:
                raise ValueError(f"cannot parse activation {text!r}")
            fields[key] = val
        try:
            p = int(fields.pop("p"))
            scaling = fields.pop("scale")
        except (KeyError, ValueError):
            raise ValueError(f"cannot parse activation {text!r}") from None
        key = {"none": None, "fixed": "k", "dynamic": "init"}.get(scaling)
        value = None
        if key is not None:
            raw = fields.pop(key, "auto")
            value = None if raw == "auto" else float(raw)
        if fields:
            raise ValueError(f"unexpected fields {sorted(fields)} in activation {text!r}")
        return cls("poly", p, scaling, value)

    def __str__(self) -> str:
        if self.kind == "softmax":
            return "softmax"
        head = f"poly:p={self.degree}:scale={self.scaling}"
        if self.scaling == "none":
            return head
        key = "k" if self.scaling == "fixed" else "init"
        return f"{head}:{key}={'auto' if self.value is None else _fmt(self.value)}"

    def multiplier(self, seq_len: int) -> float:
        """Constant factor applied to ``x**p`` (initial value for dynamic scaling)."""
        if self.kind != "poly":
            raise ValueError("softmax has no polynomial multiplier")
        if self.scaling == "none":
            return 1.0
        if self.scaling == "fixed":
            k = math.sqrt(seq_len) if self.value is None else self.value
            return 1.0 / k
        return 1.0 / math.sqrt(seq_len) if self.value is None else float(self.value)


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def _square(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    return a


def matrix_softmax(a) -> np.ndarray:
    """Row-wise softmax of a square matrix."""
    return row_softmax(_square(a))


@dataclass(frozen=True)
class SoftmaxJacobian:
    """Derivative of the matrix softmax map, kept in per-row form.

    ``dF[i, j] / dA[k, l]`` is ``F[i, j] * (delta_jl - F[i, l])`` when ``k == i``
    and zero otherwise, so only the N x N matrix ``base`` is stored.
    """

    base: np.ndarray

    @property
    def n(self) -> int:
        return self.base.shape[0]

    def entry(self, i: int, j: int, k: int, l: int) -> float:
        if k != i:
            return 0.0
        f = self.base
        return float(f[i, j] * ((j == l) - f[i, l]))

    def row_block(self, i: int) -> np.ndarray:
        """``block[j, l] = dF[i, j] / dA[i, l]``."""
        f = self.base[i]
        return np.diag(f) - np.outer(f, f)

    def materialize(self) -> np.ndarray:
        """Full (N*N) x (N*N) Jacobian; row index ``i*N + j``, column ``k*N + l``."""
        n = self.n
        jac = np.zeros((n * n, n * n))
        for i in range(n):
            jac[i * n:(i + 1) * n, i * n:(i + 1) * n] = self.row_block(i)
        return jac

    def vjp(self, g: np.ndarray) -> np.ndarray:
        f = self.base
        return f * (g - np.sum(g * f, axis=1, keepdims=True))

    def frobenius(self) -> float:
        f = self.base
        row_sq = np.sum(f * f, axis=1, keepdims=True)
        # sum_l (F_ij (delta_jl - F_il))^2 = F_ij^2 (1 - 2 F_ij + sum_l F_il^2)
        return float(np.sqrt(np.sum(f * f * (1.0 - 2.0 * f + row_sq))))


def softmax_jacobian(a) -> SoftmaxJacobian:
    return SoftmaxJacobian(matrix_softmax(a))


def softmax_jacobian_frobenius(a) -> float:
    """Frobenius norm over all N^2 x N^2 entries of the softmax Jacobian at ``a``."""
    return softmax_jacobian(a).frobenius()


def apply_activation(spec: ActivationSpec, scores, seq_len: int | None = None, dynamic_scale: Value | None = None):
    """Apply ``spec`` to a (possibly batched) square score matrix.

    ``dynamic_scale`` is the learnable multiplier for dynamic scaling; when it
    is omitted the initial value is used as a constant.
    """
    data = scores.data if isinstance(scores, Value) else np.asarray(scores)
    if data.ndim < 2 or data.shape[-1] != data.shape[-2]:
        raise DimensionError(f"expected square score matrices, got shape {data.shape}")
    n = data.shape[-1] if seq_len is None else seq_len
    if spec.kind == "softmax":
        return row_softmax(scores)
    if spec.degree >= 6:
        warnings.warn(
            f"polynomial degree {spec.degree} has near-flat gradients around zero and tends not to train",
            VanishingGradientWarning,
            stacklevel=2,
        )
    if not isinstance(scores, Value) and dynamic_scale is None:
        return ipow(data, spec.degree) * spec.multiplier(n)
    out = power(scores, spec.degree)
    if spec.scaling == "dynamic" and dynamic_scale is not None:
        return mul(out, dynamic_scale)
    if spec.scaling == "none":
        return out
    return mul(out, spec.multiplier(n))
