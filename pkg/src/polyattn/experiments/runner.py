"""Training runs and the scale sweep."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..attention import NormTraceRow
from ..numerics import RngStream
from .config import ExperimentConfig
from .model import TransformerClassifier
from .tasks import generate_task

SWEEP_FIELDS = ("N", "k", "replicate", "final_loss", "accuracy", "diverged")

# substream ids under the run seed
_TRAIN_STREAM = 10
_EVAL_STREAM = 11


@dataclass
class RunResult:
    final_loss: float
    final_accuracy: float | None
    diverged: bool
    divergence_step: int | None = None
    norm_trace: list[NormTraceRow] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def make_classifier(config: ExperimentConfig) -> TransformerClassifier:
    return TransformerClassifier(
        activation=config.activation,
        depth=config.depth,
        heads=config.heads,
        D=config.D,
        d=config.d,
        M=config.M,
        vocab=config.vocab,
        optimizer=config.optimizer,
        lr=config.lr,
        betas=config.betas,
        weight_decay=config.weight_decay,
        steps=config.steps,
        batch=config.batch,
        seed=config.seed,
        trace_interval=config.trace_interval,
        positional=config.positional,
        norm=config.norm,
    )


def eval_set(config: ExperimentConfig):
    return generate_task(config.task, config.N, config.vocab, config.eval_size, RngStream(config.seed, _EVAL_STREAM))


def train(config: ExperimentConfig, return_model: bool = False, on_trace=None):
    """Train on fresh task batches and score on a held-out set drawn from a separate stream.

    ``on_trace`` is forwarded to :meth:`TransformerClassifier.fit_stream`.
    """
    train_stream = RngStream(config.seed, _TRAIN_STREAM)

    def batches(step):
        return generate_task(config.task, config.N, config.vocab, config.batch, train_stream.substream(step))

    clf = make_classifier(config)
    clf.fit_stream(batches, config.N, config.vocab, np.arange(config.n_classes), on_trace)
    log = clf.log_
    accuracy = None
    if not log.diverged:
        x, y = eval_set(config)
        accuracy = float(clf.score(x, y))
    result = RunResult(
        final_loss=log.losses[-1] if log.losses else math.nan,
        final_accuracy=accuracy,
        diverged=log.diverged,
        divergence_step=log.divergence_step,
        norm_trace=log.trace,
        losses=log.losses,
    )
    return (result, clf) if return_model else result


@dataclass(frozen=True)
class SweepGrid:
    Ns: tuple[int, ...]
    ks: tuple[float, ...]
    replicates: int = 3

    def __post_init__(self):
        if not self.Ns or not self.ks or self.replicates < 1:
            raise ValueError("sweep grid needs Ns, ks and at least one replicate")
        if any(k <= 0 for k in self.ks):
            raise ValueError("scales k must be positive")
        if math.log10(max(self.ks) / min(self.ks)) < 3 - 1e-9:
            raise ValueError("k values must span at least three decades")

    @classmethod
    def log_spaced(cls, Ns, k_min=1e-3, k_max=1e3, per_decade=1, replicates=3) -> "SweepGrid":
        decades = math.log10(k_max / k_min)
        n = int(round(decades * per_decade)) + 1
        ks = tuple(float(k) for k in np.logspace(math.log10(k_min), math.log10(k_max), n))
        return cls(tuple(Ns), ks, replicates)


@dataclass(frozen=True)
class SweepRow:
    N: int
    k: float
    replicate: int
    final_loss: float
    accuracy: float | None
    diverged: bool

    def as_csv_row(self) -> list[str]:
        acc = "" if self.accuracy is None else f"{self.accuracy:.9g}"
        return [str(self.N), f"{self.k:.9g}", str(self.replicate), f"{self.final_loss:.9g}", acc,
                "true" if self.diverged else "false"]


def _sweep_cell(args) -> SweepRow:
    config, N, k, rep = args
    res = train(config)
    return SweepRow(N, k, rep, res.final_loss, res.final_accuracy, res.diverged)


def sweep_config(base: ExperimentConfig, N: int, k: float, replicate: int) -> ExperimentConfig:
    return base.replace(N=N, activation=f"poly:p=3:scale=fixed:k={k!r}", seed=base.seed + replicate)


def scale_sweep(grid: SweepGrid, base: ExperimentConfig, workers: int = 1) -> tuple[list[SweepRow], dict[int, float]]:
    """Train ``x**3 / k`` for every (N, k, replicate); return rows and the per-N best k.

    A diverged run scores accuracy 0 in the per-cell mean. Ties in mean
    accuracy go to the smallest k.
    """
    jobs = [(sweep_config(base, N, k, r), N, k, r) for N in grid.Ns for k in grid.ks for r in range(grid.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(j) for j in jobs]
    rows.sort(key=lambda r: (r.N, r.k, r.replicate))
    return rows, best_k(rows)


def best_k(rows: list[SweepRow]) -> dict[int, float]:
    acc: dict[tuple[int, float], list[float]] = {}
    for r in rows:
        acc.setdefault((r.N, r.k), []).append(0.0 if r.accuracy is None else r.accuracy)
    out: dict[int, float] = {}
    for N in sorted({n for n, _ in acc}):
        cells = sorted((k, float(np.mean(v))) for (n, k), v in acc.items() if n == N)
        top = max(m for _, m in cells)
        out[N] = next(k for k, m in cells if m == top)
    return out


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow(r.as_csv_row())


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 8))
