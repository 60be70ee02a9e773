"""Ranking metrics over query groups: MAP, MRR, P@1 and R_n@K."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

DEFAULT_RECALL_AT: tuple[tuple[int, int], ...] = ((2, 1), (10, 1), (10, 2), (10, 5))


@dataclass(frozen=True)
class Candidate:
    doc_id: str
    label: int
    score: float


@dataclass(frozen=True)
class QueryGroup:
    query_id: str
    candidates: tuple[Candidate, ...]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError(f"query group {self.query_id!r} has no candidates")
        for c in self.candidates:
            if c.label not in (0, 1):
                raise ValueError(f"query group {self.query_id!r}: label {c.label!r} is not 0/1")
            if not math.isfinite(c.score):
                raise ValueError(f"query group {self.query_id!r}: non-finite score")

    @property
    def has_relevant(self) -> bool:
        return any(c.label == 1 for c in self.candidates)


def rank(group: QueryGroup) -> list[Candidate]:
    """Candidates by descending score; ties keep their input order."""
    return sorted(group.candidates, key=lambda c: -c.score)


def _relevant_ranks(group: QueryGroup) -> list[int]:
    ranks = [i for i, c in enumerate(rank(group), start=1) if c.label == 1]
    if not ranks:
        raise ValueError(f"query group {group.query_id!r} has no relevant candidate")
    return ranks


def average_precision(group: QueryGroup) -> float:
    ranks = _relevant_ranks(group)
    return sum(hits / r for hits, r in enumerate(ranks, start=1)) / len(ranks)


def reciprocal_rank(group: QueryGroup) -> float:
    return 1.0 / _relevant_ranks(group)[0]


def precision_at_1(group: QueryGroup) -> float:
    return float(rank(group)[0].label == 1)


def recall_at(group: QueryGroup, k: int) -> float:
    """1.0 if a relevant candidate is within the top ``k``."""
    return float(_relevant_ranks(group)[0] <= k)


@dataclass
class MetricsReport:
    map: float
    mrr: float
    p_at_1: float
    recall: dict[tuple[int, int], float] = field(default_factory=dict)
    evaluated: int = 0
    dropped: int = 0

    def as_dict(self) -> dict[str, float]:
        out = {"MAP": self.map, "MRR": self.mrr, "P@1": self.p_at_1}
        for (n, k), value in self.recall.items():
            out[f"R{n}@{k}"] = value
        out["evaluated_groups"] = self.evaluated
        out["dropped_groups"] = self.dropped
        return out

    def __getitem__(self, name: str) -> float:
        return self.as_dict()[name]

    def to_tsv(self) -> str:
        """One ``name<TAB>value`` line per metric (floats in round-trip repr)."""
        return "".join(f"{k}\t{v!r}\n" for k, v in self.as_dict().items())

    def to_text(self) -> str:
        return "".join(
            f"{k} = {v:.4f}\n" if isinstance(v, float) else f"{k} = {v}\n"
            for k, v in self.as_dict().items()
        )

    @staticmethod
    def parse_tsv(text: str) -> dict[str, float]:
        values = {}
        for line in text.splitlines():
            if line.strip():
                name, value = line.split("\t")
                values[name] = float(value)
        return values


def mean_metrics(
    groups: Iterable[QueryGroup], recall_at_k: Sequence[tuple[int, int]] = DEFAULT_RECALL_AT
) -> MetricsReport:
    """Average per-group metrics; groups without a relevant candidate are dropped.

    ``R_n@K`` only averages over groups with exactly ``n`` candidates and is
    omitted when there are none.
    """
    groups = list(groups)
    usable = [g for g in groups if g.has_relevant]
    if not usable:
        raise ValueError("no query group with a relevant candidate to evaluate")
    n = len(usable)
    recall = {}
    for size, k in recall_at_k:
        sized = [g for g in usable if len(g.candidates) == size]
        if sized:
            recall[(size, k)] = sum(recall_at(g, k) for g in sized) / len(sized)
    return MetricsReport(
        map=sum(average_precision(g) for g in usable) / n,
        mrr=sum(reciprocal_rank(g) for g in usable) / n,
        p_at_1=sum(precision_at_1(g) for g in usable) / n,
        recall=recall,
        evaluated=n,
        dropped=len(groups) - n,
    )


def group_scores(query_ids, doc_ids, labels, scores) -> list[QueryGroup]:
    """Bundle flat per-pair columns into query groups, in first-seen order."""
    buckets: dict[str, list[Candidate]] = {}
    for qid, did, label, score in zip(query_ids, doc_ids, labels, scores):
        buckets.setdefault(qid, []).append(Candidate(str(did), int(label), float(score)))
    return [QueryGroup(qid, tuple(cands)) for qid, cands in buckets.items()]
