"""Tokenization, vocabularies, embedding files and the pair dataset format."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD = 0
UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

OOV_INIT_RANGE = 0.01

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class DataError(ValueError):
    """Malformed input file; the message carries the path and line number."""


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it into word and punctuation tokens.

    >>> tokenize("It began in 1923.")
    ['it', 'began', 'in', '1923', '.']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Token ids with PAD fixed at 0 and UNK at 1; corpus tokens start at 2."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(
            self, "index", {tok: i + 2 for i, tok in enumerate(self.tokens)}
        )

    def __len__(self) -> int:
        return len(self.tokens) + 2

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token(self, token_id: int) -> str:
        if token_id == PAD:
            return PAD_TOKEN
        if token_id == UNK:
            return UNK_TOKEN
        return self.tokens[token_id - 2]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token(int(i)) for i in ids if int(i) != PAD]


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Admit tokens seen at least ``min_count`` times, most frequent first.

    Ties are broken lexicographically so the id assignment is deterministic.
    """
    if min_count < 0:
        raise ValueError("min_count must be non-negative")
    counts = Counter(tok for seq in corpus for tok in seq)
    admitted = [tok for tok, n in counts.items() if n >= max(min_count, 1)]
    admitted.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(tuple(admitted))


@dataclass
class EmbeddingTable:
    """``|V| x d`` word vectors; row ``PAD`` is all zeros."""

    matrix: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise ValueError(f"embedding matrix must be |V| x d with d > 0, got {self.matrix.shape}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]


def random_embeddings(vocab: Vocabulary, d: int, rng: np.random.Generator) -> EmbeddingTable:
    matrix = rng.uniform(-OOV_INIT_RANGE, OOV_INIT_RANGE, size=(len(vocab), d))
    matrix[PAD] = 0.0
    return EmbeddingTable(matrix)


def load_embeddings(
    path, vocab: Vocabulary, d: int | None = None, rng: np.random.Generator | None = None
) -> EmbeddingTable:
    """Fill an embedding table from a GloVe-style text file.

    Each line is a token followed by ``d`` reals.  Rows for vocabulary
    entries missing from the file (and UNK) are drawn uniformly from
    ``[-0.01, 0.01]`` using ``rng``; the PAD row stays zero.  When ``d`` is
    None it is taken from the first line.
    """
    path = Path(path)
    if rng is None:
        rng = np.random.default_rng(0)
    found: dict[int, np.ndarray] = {}
    first = True
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if d is None:
                d = len(parts) - 1
                if d < 1:
                    raise DataError(f"{path}:{lineno}: line has no vector components")
            if first and len(parts) != d + 1:
                raise DataError(
                    f"{path}:{lineno}: embedding dimension mismatch, "
                    f"file has {len(parts) - 1} components, expected {d}"
                )
            first = False
            if len(parts) != d + 1:
                raise DataError(
                    f"{path}:{lineno}: expected a token and {d} values, got {len(parts)} fields"
                )
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric vector component") from None
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}:{lineno}: non-finite vector component")
            token_id = vocab.index.get(parts[0])
            if token_id is not None and token_id not in found:
                found[token_id] = vec
    if d is None:
        raise DataError(f"{path}: no embedding lines found")
    table = random_embeddings(vocab, d, rng)
    for token_id, vec in found.items():
        table.matrix[token_id] = vec
    return table


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    length: int

    @property
    def padded_length(self) -> int:
        return len(self.ids)


def encode_batch(
    sequences: Sequence[Sequence[str]], vocab: Vocabulary, hard_cap: int = 50
) -> tuple[list[TokenSequence], np.ndarray]:
    """Truncate to ``hard_cap``, then pad to the longest sequence in the batch.

    Returns the encoded sequences and a boolean mask marking real tokens.
    """
    if hard_cap < 1:
        raise ValueError("hard_cap must be at least 1")
    truncated = [list(seq)[:hard_cap] for seq in sequences]
    width = max((len(seq) for seq in truncated), default=0)
    if width == 0:
        raise DataError("every sequence in the batch is empty")
    encoded = []
    mask = np.zeros((len(truncated), width), dtype=bool)
    for row, seq in enumerate(truncated):
        ids = vocab.encode(seq)
        encoded.append(TokenSequence(tuple(ids + [PAD] * (width - len(ids))), len(ids)))
        mask[row, : len(ids)] = True
    return encoded, mask


def ids_array(sequences: Sequence[TokenSequence]) -> np.ndarray:
    return np.array([s.ids for s in sequences], dtype=np.int64)


@dataclass(frozen=True)
class Pair:
    """One labeled query/document row of a dataset file."""

    query_id: str
    query: tuple[str, ...]
    doc: tuple[str, ...]
    label: int
    doc_id: str = ""


def read_pairs(path) -> list[Pair]:
    """Read ``query_id<TAB>query<TAB>doc<TAB>label`` rows.

    Within a query group, documents get ids ``0, 1, ...`` in file order.
    """
    path = Path(path)
    pairs = []
    seen: Counter[str] = Counter()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}")
            qid, query, doc, label = fields
            if label.strip() not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            q_tokens, d_tokens = tokenize(query), tokenize(doc)
            if not q_tokens or not d_tokens:
                raise DataError(f"{path}:{lineno}: empty query or document text")
            pairs.append(
                Pair(qid, tuple(q_tokens), tuple(d_tokens), int(label), str(seen[qid]))
            )
            seen[qid] += 1
    if not pairs:
        raise DataError(f"{path}: no rows")
    return pairs


def write_pairs(path, pairs: Iterable[Pair]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.query_id}\t{' '.join(p.query)}\t{' '.join(p.doc)}\t{p.label}\n")
