"""Norm bounds for softmax attention and Monte-Carlo moments of polynomial attention.

Two random score models are sampled:

* ``proof``: ``C = A @ B`` with ``A`` (N, D) ~ N(0, sigma_x^2) and ``B`` (D, N)
  ~ N(0, sigma_t^2) independent. Closed forms are stated for this product.
* ``full``: ``X Q K^T X^T / sqrt(d)`` with ``X`` ~ N(0, sigma_x^2) and ``Q, K``
  ~ N(0, sigma_t^2).

All ``sigma`` arguments are standard deviations. Trials are drawn in fixed-size
chunks, each from its own substream, so results do not depend on how chunks
are scheduled.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .numerics import RngStream, Value, backward, ipow, matmul, mul, power, sum as vsum, transpose

__all__ = [
    "BoundViolation",
    "MOMENT_FIELDS",
    "MomentEstimate",
    "MomentRow",
    "PolyFrobResult",
    "ScalingFit",
    "SoftmaxBoundReport",
    "TheoryModelParams",
    "closed_form_entry_moment",
    "closed_form_grad_moment_p1",
    "double_factorial",
    "exact_entry_moment",
    "exact_grad_moment_p1",
    "fit_scaling_exponent",
    "mc_grad_frob",
    "mc_poly_frob",
    "softmax_bound_ratios",
    "verify_softmax_bounds",
    "write_moments_csv",
]

MOMENT_FIELDS = ("quantity", "N", "D", "d", "p", "sampler", "scaled", "mean", "std_error", "closed_form", "z_score")

# rounding slack for the deterministic bounds; a saturated row hits sqrt(N) exactly
BOUND_RTOL = 1e-12


class BoundViolation(AssertionError):
    pass


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    std_error: float
    trials: int
    quantity: str = ""

    def __post_init__(self):
        if self.trials < 2:
            raise ValueError("a moment estimate needs at least 2 trials")

    @classmethod
    def from_samples(cls, samples: np.ndarray, quantity: str = "") -> "MomentEstimate":
        samples = np.asarray(samples, dtype=np.float64)
        n = samples.size
        return cls(float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n)), n, quantity)

    def z_score(self, expected: float) -> float:
        return (self.mean - expected) / self.std_error


@dataclass(frozen=True)
class TheoryModelParams:
    N: int
    D: int
    d: int = 1
    p: int = 1
    sigma_x: float = 1.0
    sigma_t: float = 1.0
    sampler: str = "proof"

    def __post_init__(self):
        for name in ("N", "D", "d", "p"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not (self.sigma_x > 0 and self.sigma_t > 0):
            raise ValueError("sigmas must be positive")
        if self.sampler not in ("proof", "full"):
            raise ValueError(f"sampler must be 'proof' or 'full', got {self.sampler!r}")


# ---------------------------------------------------------------------------
# softmax bounds


def softmax_bound_ratios(a: np.ndarray) -> tuple[float, float]:
    """``(||softmax(A)||_F / sqrt(N), ||grad softmax(A)||_F / (2 sqrt(N)))`` for square or stacked ``a``."""
    f = _softmax(np.asarray(a, dtype=np.float64))
    n = f.shape[-1]
    sm, jac = _softmax_norms(f)
    return float(np.max(sm) / math.sqrt(n)), float(np.max(jac) / (2 * math.sqrt(n)))


def _softmax(a: np.ndarray) -> np.ndarray:
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _softmax_norms(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sq = f * f
    row_sq = sq.sum(axis=-1, keepdims=True)
    sm = np.sqrt(sq.sum(axis=(-2, -1)))
    jac = np.sqrt(np.sum(sq * (1.0 - 2.0 * f + row_sq), axis=(-2, -1)))
    return sm, jac


@dataclass
class SoftmaxBoundReport:
    """Largest observed norm-to-bound ratios, keyed by ``(N, sigma)``."""

    softmax_ratio: dict = field(default_factory=dict)
    jacobian_ratio: dict = field(default_factory=dict)
    samples: int = 0

    def max_ratio_per_N(self) -> dict[int, tuple[float, float]]:
        out: dict[int, tuple[float, float]] = {}
        for (n, _), r in self.softmax_ratio.items():
            prev = out.get(n, (0.0, 0.0))
            out[n] = (max(prev[0], r), prev[1])
        for (n, _), r in self.jacobian_ratio.items():
            out[n] = (out[n][0], max(out[n][1], r))
        return out


def verify_softmax_bounds(
    Ns: Sequence[int],
    samples_per_N: int,
    sigma_list: Sequence[float],
    stream: RngStream,
    chunk: int = 2000,
) -> SoftmaxBoundReport:
    """Check ``||softmax(A)||_F <= sqrt(N)`` and ``||grad softmax(A)||_F <= 2 sqrt(N)`` on Gaussian ``A``.

    Raises :class:`BoundViolation` naming the stream and sample index of the
    first counterexample.
    """
    if not Ns:
        raise ValueError("Ns must be nonempty")
    report = SoftmaxBoundReport()
    for n in Ns:
        for s_idx, sigma in enumerate(sigma_list):
            sm_max = jac_max = 0.0
            for c_idx, start in enumerate(range(0, samples_per_N, chunk)):
                count = min(chunk, samples_per_N - start)
                sub = stream.substream(n).substream(s_idx).substream(c_idx)
                a = sigma * sub.generator().standard_normal((count, n, n))
                sm, jac = _softmax_norms(_softmax(a))
                sm_r = sm / math.sqrt(n)
                jac_r = jac / (2 * math.sqrt(n))
                bad = np.flatnonzero((sm_r > 1 + BOUND_RTOL) | (jac_r > 1 + BOUND_RTOL))
                if bad.size:
                    i = int(bad[0])
                    raise BoundViolation(
                        f"bound violated at N={n}, sigma={sigma}: seed={stream.seed} stream_id={sub.stream_id} "
                        f"sample={i} softmax ratio={sm_r[i]!r} jacobian ratio={jac_r[i]!r}"
                    )
                sm_max = max(sm_max, float(sm_r.max()))
                jac_max = max(jac_max, float(jac_r.max()))
            report.softmax_ratio[(n, sigma)] = sm_max
            report.jacobian_ratio[(n, sigma)] = jac_max
            report.samples += samples_per_N
    return report


# ---------------------------------------------------------------------------
# sampling


def _chunk_size(params: TheoryModelParams) -> int:
    per_trial = params.N * max(params.N, params.D, params.d)
    return max(1, min(4096, (1 << 21) // per_trial))


def _chunks(trials: int, size: int):
    for idx, start in enumerate(range(0, trials, size)):
        yield idx, min(size, trials - start)


def _sample_scores(params: TheoryModelParams, gen: np.random.Generator, count: int) -> np.ndarray:
    N, D, d = params.N, params.D, params.d
    if params.sampler == "proof":
        a = params.sigma_x * gen.standard_normal((count, N, D))
        b = params.sigma_t * gen.standard_normal((count, D, N))
        return a @ b
    x = params.sigma_x * gen.standard_normal((count, N, D))
    q = params.sigma_t * gen.standard_normal((count, D, d))
    k = params.sigma_t * gen.standard_normal((count, D, d))
    return (x @ q) @ np.swapaxes(x @ k, -1, -2) / math.sqrt(d)


@dataclass(frozen=True)
class PolyFrobResult:
    """Estimates from one polynomial-norm Monte-Carlo run.

    ``frob`` is the headline ``E||phi(scores)||_F`` (scaled by ``1/sqrt(N)`` if
    requested); ``frob_sq`` and ``entry_sq`` are unscaled second moments of the
    whole matrix and of entry (0, 0), for comparison with closed forms.
    """

    frob: MomentEstimate
    frob_sq: MomentEstimate
    entry_sq: MomentEstimate
    unscaled_norms: np.ndarray
    norms: np.ndarray


def mc_poly_frob(params: TheoryModelParams, scaled: bool, trials: int, stream: RngStream) -> PolyFrobResult:
    """Monte-Carlo estimate of ``E||scores^p||_F`` (entrywise power), optionally divided by ``sqrt(N)``."""
    if trials < 100:
        raise ValueError("need at least 100 trials")
    unscaled, frob_sq, entry_sq = [], [], []
    for idx, count in _chunks(trials, _chunk_size(params)):
        s = _sample_scores(params, stream.substream(idx).generator(), count)
        phi = ipow(s, params.p)
        sq = np.sum(phi * phi, axis=(-2, -1))
        frob_sq.append(sq)
        unscaled.append(np.sqrt(sq))
        entry_sq.append(phi[:, 0, 0] ** 2)
    unscaled_norms = np.concatenate(unscaled)
    norms = unscaled_norms / math.sqrt(params.N) if scaled else unscaled_norms
    return PolyFrobResult(
        frob=MomentEstimate.from_samples(norms, "frob"),
        frob_sq=MomentEstimate.from_samples(np.concatenate(frob_sq), "frob_sq"),
        entry_sq=MomentEstimate.from_samples(np.concatenate(entry_sq), "entry_sq"),
        unscaled_norms=unscaled_norms,
        norms=norms,
    )


def _grad_sq_autodiff(x: np.ndarray, q: np.ndarray, k: np.ndarray, p: int, divide_sqrt_d: bool) -> np.ndarray:
    """Per-trial ``sum_ij ||d s_ij^p / dQ||_F^2`` with one backward pass per entry (i, j)."""
    n = x.shape[1]
    Q = Value(q, requires_grad=True)
    scores = matmul(matmul(matmul(x, Q), transpose(k)), transpose(x))
    phi = power(scores, p)
    if divide_sqrt_d:
        phi = mul(phi, 1.0 / math.sqrt(q.shape[-1]))
    total = np.zeros(x.shape[0])
    mask = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            mask[i, j] = 1.0
            # trials are independent, so summing over them keeps each trial's gradient separate
            backward(vsum(mul(phi, mask)))
            total += np.sum(Q.grad * Q.grad, axis=(-2, -1))
            mask[i, j] = 0.0
    return total


def _grad_sq_analytic(x: np.ndarray, q: np.ndarray, k: np.ndarray, p: int, divide_sqrt_d: bool) -> np.ndarray:
    # d s_ij / dQ = x_i (K^T x_j)^T, so ||d s_ij^p / dQ||^2 = p^2 s_ij^(2p-2) ||x_i||^2 ||K^T x_j||^2
    s = (x @ q) @ np.swapaxes(x @ k, -1, -2)
    xn = np.sum(x * x, axis=-1)
    kx = x @ k
    kn = np.sum(kx * kx, axis=-1)
    per = p * p * ipow(s, 2 * p - 2) * xn[:, :, None] * kn[:, None, :]
    out = per.sum(axis=(-2, -1))
    return out / q.shape[-1] if divide_sqrt_d else out


def mc_grad_frob(
    params: TheoryModelParams,
    trials: int,
    stream: RngStream,
    method: str = "autodiff",
    divide_sqrt_d: bool = False,
) -> MomentEstimate:
    """Monte-Carlo estimate of ``E||d (X Q K^T X^T)^p / dQ||_F^2`` in the full model.

    ``divide_sqrt_d`` divides the powered matrix by ``sqrt(d)`` before
    differentiating. ``method`` selects reverse-mode autodiff or the explicit
    per-entry formula.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials")
    if params.sampler != "full":
        raise ValueError("the Q-gradient is defined for the full model only")
    fn = {"autodiff": _grad_sq_autodiff, "analytic": _grad_sq_analytic}[method]
    N, D, d = params.N, params.D, params.d
    out = []
    for idx, count in _chunks(trials, _chunk_size(params)):
        gen = stream.substream(idx).generator()
        x = params.sigma_x * gen.standard_normal((count, N, D))
        q = params.sigma_t * gen.standard_normal((count, D, d))
        k = params.sigma_t * gen.standard_normal((count, D, d))
        out.append(fn(x, q, k, params.p, divide_sqrt_d))
    return MomentEstimate.from_samples(np.concatenate(out), "grad_frob_sq")


# ---------------------------------------------------------------------------
# closed forms


def double_factorial(n: int) -> int:
    if n <= 0:
        return 1
    return math.prod(range(n, 0, -2))


def closed_form_entry_moment(D: int, p: int, sigma1: float = 1.0, sigma2: float = 1.0) -> float:
    """Leading-order ``E(c_11^(2p))`` for ``C = A B``: ``D!/(D-p)! (2p-1)!! sigma1^2p sigma2^2p``.

    Counts only the terms in which ``p`` distinct summands each appear squared;
    exact for ``p = 1``.
    """
    if p < 1:
        raise ValueError("p must be a positive integer")
    if p > D:
        raise ValueError(f"p={p} exceeds D={D}; the falling factorial D!/(D-p)! vanishes")
    return math.perm(D, p) * double_factorial(2 * p - 1) * sigma1 ** (2 * p) * sigma2 ** (2 * p)


def exact_entry_moment(D: int, p: int, sigma1: float = 1.0, sigma2: float = 1.0) -> float:
    """Exact ``E(c_11^(2p))`` where ``c_11`` is a sum of ``D`` i.i.d. products of Gaussians."""
    order = 2 * p
    # raw moments of w = a*b with unit variances: E w^(2m) = ((2m-1)!!)^2, odd moments vanish
    w = [Fraction(double_factorial(m - 1) ** 2) if m % 2 == 0 else Fraction(0) for m in range(order + 1)]
    w[0] = Fraction(1)
    total = [Fraction(1)] + [Fraction(0)] * order
    for _ in range(D):
        total = [sum(math.comb(n, j) * total[j] * w[n - j] for j in range(n + 1)) for n in range(order + 1)]
    return float(total[order]) * sigma1**order * sigma2**order


def closed_form_grad_moment_p1(N: int, D: int, d: int, sigma_x: float = 1.0, sigma_w: float = 1.0) -> float:
    """Two-class approximation ``3NDd sx^4 sw^2 + N(N-1)D(D-1)d sx^4 sw^2`` of ``E||d(XQK^TX^T)/dQ||_F^2``.

    This keeps only the (i=j, m=k) and (i!=j, m!=k) index classes; see
    :func:`exact_grad_moment_p1` for the full expectation.
    """
    for v in (N, D, d, sigma_x, sigma_w):
        if not v > 0:
            raise ValueError("all arguments must be positive")
    c = sigma_x**4 * sigma_w**2
    return (3 * N * D * d + N * (N - 1) * D * (D - 1) * d) * c


def exact_grad_moment_p1(N: int, D: int, d: int, sigma_x: float = 1.0, sigma_w: float = 1.0) -> float:
    """Exact ``E||d(XQK^TX^T)/dQ||_F^2 = N D d (N D + 2) sx^4 sw^2``."""
    return N * D * d * (N * D + 2) * sigma_x**4 * sigma_w**2


# ---------------------------------------------------------------------------
# scaling fits


@dataclass(frozen=True)
class ScalingFit:
    exponent: float
    intercept: float
    r_squared: float
    points: tuple


def fit_scaling_exponent(points: Iterable[tuple[float, float]]) -> ScalingFit:
    """Least-squares fit of ``log(mean) = exponent * log(N) + intercept``."""
    pts = tuple((float(n), float(m)) for n, m in points)
    if len({n for n, _ in pts}) < 4:
        raise ValueError("need at least 4 distinct N values")
    if any(m <= 0 or n <= 0 for n, m in pts):
        raise ValueError("N and means must be positive")
    x = np.log([n for n, _ in pts])
    y = np.log([m for _, m in pts])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return ScalingFit(float(slope), float(intercept), min(1.0, max(0.0, r2)), pts)


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class MomentRow:
    quantity: str
    params: TheoryModelParams
    scaled: bool
    estimate: MomentEstimate
    closed_form: float | None = None

    @property
    def z_score(self) -> float | None:
        if self.closed_form is None:
            return None
        return self.estimate.z_score(self.closed_form)

    def as_csv_row(self) -> list[str]:
        p = self.params
        z = self.z_score
        return [
            self.quantity,
            str(p.N),
            str(p.D),
            str(p.d),
            str(p.p),
            p.sampler,
            "true" if self.scaled else "false",
            f"{self.estimate.mean:.9g}",
            f"{self.estimate.std_error:.9g}",
            "" if self.closed_form is None else f"{self.closed_form:.9g}",
            "" if z is None else f"{z:.9g}",
        ]


def write_moments_csv(rows: Iterable[MomentRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MOMENT_FIELDS)
        for r in rows:
            writer.writerow(r.as_csv_row())
