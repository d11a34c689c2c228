"""Token classifier built from stacked attention blocks, with an sklearn-style interface."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y
from threadpoolctl import threadpool_limits

from ..activations import ActivationSpec
from ..attention import NormTraceRow, init_block, record_norms, transformer_block
from ..numerics import RngStream, Value, add, backward, cross_entropy, embedding, matmul, mean

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50


class Adam:
    """Adam with decoupled weight decay (AdamW when ``weight_decay > 0``)."""

    def __init__(self, params: list[Value], lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.wd:
                p.data -= self.lr * self.wd * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: list[Value], lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.wd = weight_decay

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            if self.wd:
                p.data -= self.lr * self.wd * p.data
            p.data -= self.lr * p.grad


@dataclass
class TrainingLog:
    losses: list[float] = field(default_factory=list)
    trace: list[NormTraceRow] = field(default_factory=list)
    diverged: bool = False
    divergence_step: int | None = None
    stopped_on_nan: bool = False


class TransformerClassifier(ClassifierMixin, BaseEstimator):
    """Embedding, ``depth`` attention blocks, mean-pool and a linear read-out.

    ``activation`` is an activation text form such as ``"softmax"`` or
    ``"poly:p=3:scale=fixed:k=auto"``. Inputs are integer token arrays of
    shape ``(n_samples, N)``. ``fit`` draws ``batch``-sized minibatches from
    the training set for ``steps`` optimizer steps.
    """

    def __init__(
        self,
        activation: str = "softmax",
        depth: int = 2,
        heads: int = 2,
        D: int = 32,
        d: int = 16,
        M: int = 16,
        vocab: int | None = None,
        optimizer: str = "adam",
        lr: float = 3e-4,
        betas: tuple = (0.9, 0.999),
        weight_decay: float = 0.0,
        steps: int = 2000,
        batch: int = 32,
        seed: int = 0,
        trace_interval: int = 50,
        positional: bool = False,
        norm: str = "pre",
    ):
        self.activation = activation
        self.depth = depth
        self.heads = heads
        self.D = D
        self.d = d
        self.M = M
        self.vocab = vocab
        self.optimizer = optimizer
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.steps = steps
        self.batch = batch
        self.seed = seed
        self.trace_interval = trace_interval
        self.positional = positional
        self.norm = norm

    # -- parameters -------------------------------------------------------

    def _init_params(self, vocab: int, seq_len: int, n_classes: int) -> None:
        spec = ActivationSpec.parse(self.activation)
        gen = RngStream(self.seed, 1).generator()
        self.spec_ = spec
        self.seq_len_ = seq_len
        self.vocab_ = vocab
        self.embed_ = Value(gen.standard_normal((vocab, self.D)), requires_grad=True, name="embed")
        self.pos_ = (
            Value(0.1 * gen.standard_normal((seq_len, self.D)), requires_grad=True, name="pos") if self.positional else None
        )
        self.blocks_ = [
            init_block(gen, self.D, self.d, self.M, self.heads, spec, seq_len=seq_len, norm=self.norm) for _ in range(self.depth)
        ]
        self.W_out_ = Value(gen.standard_normal((self.D, n_classes)) / math.sqrt(self.D), requires_grad=True, name="W_out")
        self.b_out_ = Value(np.zeros(n_classes), requires_grad=True, name="b_out")

    def parameters(self) -> list[Value]:
        ps = [self.embed_]
        if self.pos_ is not None:
            ps.append(self.pos_)
        for b in self.blocks_:
            ps.extend(b.values())
        return ps + [self.W_out_, self.b_out_]

    def _logits(self, tokens: np.ndarray, records: list | None = None):
        h = embedding(self.embed_, tokens)
        if self.pos_ is not None:
            h = add(h, self.pos_)
        for layer, block in enumerate(self.blocks_):
            rec = [] if records is not None else None
            h = transformer_block(h, block, rec)
            if records is not None:
                records.append(rec)
        pooled = mean(h, axis=-2)
        return add(matmul(pooled, self.W_out_), self.b_out_)

    # -- training ---------------------------------------------------------

    def _make_optimizer(self):
        if self.optimizer == "adam":
            return Adam(self.parameters(), self.lr, tuple(self.betas), self.weight_decay)
        if self.optimizer == "sgd":
            return SGD(self.parameters(), self.lr, self.weight_decay)
        raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def _fit_batches(self, batches: Callable[[int], tuple[np.ndarray, np.ndarray]], on_trace=None) -> TrainingLog:
        log = TrainingLog()
        opt = self._make_optimizer()
        initial = None
        above = 0
        with threadpool_limits(1):
            for step in range(self.steps):
                x, y = batches(step)
                records = [] if step % self.trace_interval == 0 or step == self.steps - 1 else None
                loss = cross_entropy(self._logits(x, records), self.classes_index_(y))
                value = float(loss.data)
                log.losses.append(value)
                if records is not None:
                    if on_trace is not None:
                        on_trace(step, records)
                    for layer, rec in enumerate(records):
                        scale = None if self.blocks_[layer].scale is None else float(self.blocks_[layer].scale.data)
                        log.trace.extend(record_norms(rec, step, layer, self.spec_, scale))
                if initial is None:
                    initial = value
                if not math.isfinite(value):
                    log.diverged, log.divergence_step, log.stopped_on_nan = True, step, True
                    break
                above = above + 1 if value > DIVERGENCE_FACTOR * initial else 0
                if above >= DIVERGENCE_PATIENCE and not log.diverged:
                    log.diverged, log.divergence_step = True, step
                backward(loss)
                opt.step()
                if not all(np.all(np.isfinite(p.data)) for p in opt.params):
                    log.diverged, log.divergence_step, log.stopped_on_nan = True, step, True
                    break
        self.log_ = log
        return log

    def classes_index_(self, y: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.classes_, y)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.int64)
        if X.min() < 0:
            raise ValueError("token ids must be nonnegative")
        self.classes_ = unique_labels(y)
        vocab = self.vocab or int(X.max()) + 1
        self.n_features_in_ = X.shape[1]
        self._init_params(vocab, X.shape[1], len(self.classes_))
        gen = RngStream(self.seed, 2).generator()

        def batches(step):
            idx = gen.integers(0, X.shape[0], self.batch)
            return X[idx], y[idx]

        self._fit_batches(batches)
        return self

    def fit_stream(
        self,
        batches: Callable[[int], tuple[np.ndarray, np.ndarray]],
        seq_len: int,
        vocab: int,
        classes,
        on_trace=None,
    ) -> "TransformerClassifier":
        """Train on freshly generated batches; ``batches(step)`` returns ``(tokens, labels)``.

        ``on_trace(step, records)`` is called at every traced step with the
        per-layer lists of head records.
        """
        self.classes_ = np.asarray(classes)
        self.n_features_in_ = seq_len
        self._init_params(vocab, seq_len, len(self.classes_))
        self._fit_batches(batches, on_trace)
        return self

    # -- inference --------------------------------------------------------

    def _check_tokens(self, X) -> np.ndarray:
        check_is_fitted(self, "blocks_")
        X = check_array(X, dtype=np.int64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected sequences of length {self.n_features_in_}, got {X.shape[1]}")
        if X.min() < 0 or X.max() >= self.vocab_:
            raise ValueError("token id out of range")
        return X

    def decision_function(self, X) -> np.ndarray:
        X = self._check_tokens(X)
        with threadpool_limits(1):
            out = [self._logits(X[i:i + 256]).data for i in range(0, X.shape[0], 256)]
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def attention_records(self, X) -> list[list]:
        """Per-layer lists of :class:`~polyattn.attention.HeadRecord` for one forward pass."""
        X = self._check_tokens(X)
        records: list = []
        self._logits(X, records)
        return records
