"""Synthetic sequence-classification tasks."""

from __future__ import annotations

import numpy as np

from ..numerics import RngStream
from .config import TASKS, ConfigError


def _balanced_labels(gen: np.random.Generator, n_classes: int, batch: int) -> np.ndarray:
    # stratified: every class appears floor(batch / n_classes) or one more times
    return gen.permutation(np.arange(batch) % n_classes)


def _majority(gen, N, vocab, batch):
    labels = _balanced_labels(gen, vocab, batch)
    x = np.empty((batch, N), dtype=np.int64)
    for b in range(batch):
        while True:
            seq = gen.integers(0, vocab, N)
            counts = np.bincount(seq, minlength=vocab)
            top = counts.max()
            if np.count_nonzero(counts == top) == 1:
                break
        # relabel so the unique most frequent token is the drawn label
        winner = int(np.argmax(counts))
        perm = np.arange(vocab)
        perm[[winner, labels[b]]] = perm[[labels[b], winner]]
        x[b] = perm[seq]
    return x, labels


def _copy_first(gen, N, vocab, batch):
    labels = _balanced_labels(gen, vocab, batch)
    x = gen.integers(0, vocab, (batch, N))
    x[:, 0] = labels
    return x, labels


def _sparse_key_lookup(gen, N, vocab, batch):
    marker = vocab - 1
    labels = _balanced_labels(gen, vocab - 1, batch)
    x = gen.integers(0, vocab - 1, (batch, N))
    pos = gen.integers(0, N - 1, batch)
    rows = np.arange(batch)
    x[rows, pos] = marker
    x[rows, pos + 1] = labels
    return x, labels


_GENERATORS = {
    "majority": _majority,
    "copy-first-token": _copy_first,
    "sparse-key-lookup": _sparse_key_lookup,
}


def generate_task(kind: str, N: int, vocab: int, batch: int, stream: RngStream | np.random.Generator):
    """Draw ``batch`` token sequences of length ``N`` and their labels.

    * ``majority``: label is the strictly most frequent token.
    * ``copy-first-token``: label is the first token.
    * ``sparse-key-lookup``: token ``vocab - 1`` is a marker placed once; the
      label is the token right after it.
    """
    if kind not in TASKS:
        raise ConfigError(f"unknown task {kind!r}; expected one of {TASKS}")
    if N < 2 or vocab < 2:
        raise ConfigError("N and vocab must be at least 2")
    gen = stream.generator() if isinstance(stream, RngStream) else stream
    return _GENERATORS[kind](gen, N, vocab, batch)


def majority_label(seq) -> int:
    counts = np.bincount(np.asarray(seq))
    return int(np.argmax(counts))
