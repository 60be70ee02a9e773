"""Adam, mini-batching and the epoch loop with dev-set model selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .evaluation import MetricsReport, group_scores, mean_metrics
from .model import MCAN, binary_cross_entropy, l2_penalty
from .tensor import Tensor, no_grad
from .text import Pair, Vocabulary, encode_batch, ids_array

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """A training batch produced a non-finite loss."""


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place, from each parameter's ``.grad``."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"no gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class Batch:
    q_ids: np.ndarray
    q_mask: np.ndarray
    d_ids: np.ndarray
    d_mask: np.ndarray
    labels: np.ndarray
    index: np.ndarray  # positions of these pairs in the source list


def encode_pairs(pairs: Sequence[Pair], vocab: Vocabulary, hard_cap: int, index=None) -> Batch:
    q_seqs, q_mask = encode_batch([p.query for p in pairs], vocab, hard_cap)
    d_seqs, d_mask = encode_batch([p.doc for p in pairs], vocab, hard_cap)
    return Batch(
        ids_array(q_seqs), q_mask, ids_array(d_seqs), d_mask,
        np.array([p.label for p in pairs], dtype=np.int64),
        np.arange(len(pairs)) if index is None else np.asarray(index),
    )


def make_batches(
    pairs: Sequence[Pair],
    batch_size: int,
    rng: np.random.Generator | None,
    vocab: Vocabulary,
    hard_cap: int = 50,
) -> list[Batch]:
    """Shuffle with ``rng`` (None keeps file order) and slice into encoded batches."""
    if not pairs:
        raise ValueError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(pairs)) if rng is None else rng.permutation(len(pairs))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batches.append(encode_pairs([pairs[i] for i in idx], vocab, hard_cap, idx))
    return batches


def score_pairs(model: MCAN, pairs: Sequence[Pair], vocab: Vocabulary, batch_size: int = 64) -> np.ndarray:
    scores = np.empty(len(pairs))
    for b in make_batches(pairs, batch_size, None, vocab, model.config.max_len):
        scores[b.index] = model.score(b.q_ids, b.q_mask, b.d_ids, b.d_mask)
    bad = np.flatnonzero(~np.isfinite(scores))
    if bad.size:
        raise NumericError(f"non-finite score for {bad.size} pair(s), first at row {bad[0]}")
    return scores


def evaluate(model: MCAN, pairs: Sequence[Pair], vocab: Vocabulary, batch_size: int = 64) -> MetricsReport:
    scores = score_pairs(model, pairs, vocab, batch_size)
    groups = group_scores(
        [p.query_id for p in pairs], [p.doc_id for p in pairs], [p.label for p in pairs], scores
    )
    return mean_metrics(groups)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    lr: float = 3e-4
    select_metric: str = "MAP"
    patience: int = 5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    metrics: dict[str, float]
    best: bool

    def to_line(self) -> str:
        fields = [f"epoch={self.epoch}", f"loss={self.loss!r}"]
        fields += [f"{k}={v!r}" for k, v in self.metrics.items()]
        fields.append(f"best={int(self.best)}")
        return "\t".join(fields)

    @classmethod
    def from_line(cls, line: str) -> "EpochRecord":
        values = dict(field.split("=", 1) for field in line.strip().split("\t"))
        epoch, loss, best = int(values.pop("epoch")), float(values.pop("loss")), values.pop("best") == "1"
        return cls(epoch, loss, {k: float(v) for k, v in values.items()}, best)


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    log: list[EpochRecord]
    best_epoch: int
    best_metrics: dict[str, float] | None


def batch_loss(model: MCAN, batch: Batch, training: bool, rng) -> tuple[Tensor, Tensor]:
    """Return ``(total, data_term)`` for one batch."""
    probs = model.forward(batch.q_ids, batch.q_mask, batch.d_ids, batch.d_mask, training, rng)
    data = binary_cross_entropy(probs, batch.labels)
    params = list(model.trainable().values())
    if model.config.l2 == 0 or not params:
        return data, data
    return data + l2_penalty(params) * model.config.l2, data


def train(
    model: MCAN,
    train_pairs: Sequence[Pair],
    dev_pairs: Sequence[Pair] | None,
    vocab: Vocabulary,
    config: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Fit ``model`` in place and leave it holding the best dev checkpoint.

    Every epoch reshuffles with a generator derived from ``(seed, epoch)``
    and draws dropout masks from a second derived generator, so a run is a
    pure function of its inputs.
    """
    state = AdamState(lr=config.lr)
    params = model.trainable()
    best_state = model.state_dict()
    best_score = -math.inf
    best_epoch, best_metrics = 0, None
    log: list[EpochRecord] = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        shuffle_rng = np.random.default_rng([config.seed, epoch, 0])
        dropout_rng = np.random.default_rng([config.seed, epoch, 1])
        batches = make_batches(train_pairs, config.batch_size, shuffle_rng, vocab, model.config.max_len)
        total = 0.0
        for number, batch in enumerate(batches):
            model.zero_grad()
            objective, _ = batch_loss(model, batch, True, dropout_rng)
            value = objective.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {number}")
            objective.backward()
            adam_step(params, state)
            total += value
        mean_loss = total / len(train_pairs)
        metrics: dict[str, float] = {}
        improved = False
        if dev_pairs:
            report = evaluate(model, dev_pairs, vocab)
            metrics = {k: float(v) for k, v in report.as_dict().items() if not k.endswith("_groups")}
            score = metrics[config.select_metric]
            improved = score > best_score
        else:
            improved = True
            score = -mean_loss
        if improved:
            best_score, best_epoch, best_metrics = score, epoch, metrics or None
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
        record = EpochRecord(epoch, mean_loss, metrics, improved)
        log.append(record)
        logger.info(record.to_line())
        if stale >= config.patience:
            break
    model.load_state_dict(best_state)
    return TrainResult(best_state, log, best_epoch, best_metrics)
