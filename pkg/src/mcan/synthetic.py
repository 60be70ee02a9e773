"""Generated lexical-overlap ranking corpora for smoke runs and the toy fixture.

Each query group holds one positive document that repeats at least two of the
query's tokens and several negatives drawn only from tokens the query does
not use.  A ranker that learns word overlap separates them perfectly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .text import Pair


def token_names(vocab_size: int) -> list[str]:
    width = len(str(vocab_size - 1))
    return [f"w{i:0{width}d}" for i in range(vocab_size)]


def overlap_corpus(
    n_groups: int,
    vocab_size: int = 50,
    n_negatives: int = 4,
    seed: int = 0,
    query_len: tuple[int, int] = (4, 6),
    doc_len: tuple[int, int] = (4, 7),
    prefix: str = "q",
) -> list[Pair]:
    rng = np.random.default_rng(seed)
    names = np.array(token_names(vocab_size))
    pairs = []
    for g in range(n_groups):
        qid = f"{prefix}{g}"
        q_len = int(rng.integers(query_len[0], query_len[1] + 1))
        query_idx = rng.choice(vocab_size, size=q_len, replace=False)
        others = np.setdiff1d(np.arange(vocab_size), query_idx)
        shared = rng.choice(query_idx, size=int(rng.integers(2, min(3, q_len) + 1)), replace=False)
        extra = rng.choice(others, size=int(rng.integers(2, 4)), replace=False)
        positive = rng.permutation(np.concatenate([shared, extra]))
        docs = [(positive, 1)]
        for _ in range(n_negatives):
            n = int(rng.integers(doc_len[0], doc_len[1] + 1))
            docs.append((rng.choice(others, size=n, replace=False), 0))
        for k in rng.permutation(len(docs)):
            doc, label = docs[k]
            pairs.append(Pair(qid, tuple(names[query_idx]), tuple(names[doc]), label, ""))
    return _number_docs(pairs)


def _number_docs(pairs: list[Pair]) -> list[Pair]:
    counts: dict[str, int] = {}
    out = []
    for p in pairs:
        n = counts.get(p.query_id, 0)
        counts[p.query_id] = n + 1
        out.append(Pair(p.query_id, p.query, p.doc, p.label, str(n)))
    return out


def random_vectors(tokens, dim: int, seed: int = 0, scale: float = 0.4) -> dict[str, np.ndarray]:
    """Gaussian word vectors; the default per-component std matches 300d GloVe."""
    rng = np.random.default_rng(seed)
    return {t: rng.normal(0.0, scale, size=dim) for t in tokens}


def write_embeddings(path, vectors: dict[str, np.ndarray]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for token, vec in vectors.items():
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")
