"""The full multi-cast attention ranker and its checkpoint format."""

from __future__ import annotations

import dataclasses
import io
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import attention
from .attention import CASTS, COMPRESSIONS, AFFINITY_FORMS
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    dropout,
    embedding_lookup,
    log,
    matmul,
    no_grad,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    sigmoid,
    softmax,
    stack,
    tanh,
)
from .text import EmbeddingTable, Vocabulary

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 300
    encoder_dim: int | None = None  # highway encoder width r; None means embed_dim
    hidden: int = 300
    head: int = 200
    compression: str = "fm"
    fm_k: int = 10
    dropout: float = 0.2
    l2: float = 1e-6
    use_highway: bool = True
    use_lstm: bool = True
    enabled_casts: tuple[str, ...] = CASTS
    affinity: str = "factored"
    affinity_dim: int | None = None
    max_len: int = 50
    trainable_embeddings: bool = False

    def __post_init__(self):
        casts = tuple(c for c in CASTS if c in set(self.enabled_casts))
        if set(self.enabled_casts) - set(CASTS):
            raise ValueError(f"unknown casts {sorted(set(self.enabled_casts) - set(CASTS))}")
        object.__setattr__(self, "enabled_casts", casts)
        for name in ("embed_dim", "hidden", "head", "fm_k", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("encoder_dim", "affinity_dim"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be positive")
        if self.compression not in COMPRESSIONS:
            raise ValueError(f"compression must be one of {COMPRESSIONS}")
        if self.affinity not in AFFINITY_FORMS:
            raise ValueError(f"affinity must be one of {AFFINITY_FORMS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")

    @property
    def word_dim(self) -> int:
        if not self.use_highway:
            return self.embed_dim
        return self.encoder_dim or self.embed_dim

    @property
    def z_dim(self) -> int:
        return 3 * len(self.enabled_casts)

    @property
    def lstm_input_dim(self) -> int:
        return self.word_dim + self.z_dim

    @property
    def pooled_dim(self) -> int:
        return 2 * (self.hidden if self.use_lstm else self.lstm_input_dim)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(value)
            lines.append(f"{f.name}={'' if value is None else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
        return cls(**values)


def _parse_value(key: str, raw: str):
    if key == "enabled_casts":
        return tuple(c for c in raw.split(",") if c)
    if key in ("compression", "affinity"):
        return raw
    if key in ("use_highway", "use_lstm", "trainable_embeddings"):
        if raw not in ("True", "False"):
            raise ValueError(f"{key} must be True or False, got {raw!r}")
        return raw == "True"
    if key in ("dropout", "l2"):
        return float(raw)
    if raw == "":
        return None
    return int(raw)


# Hyperparameters per experiment; embed_dim always comes from the embedding file.
PROFILES: dict[str, dict] = {
    "trecqa": dict(hidden=300, head=200, l2=1e-6, dropout=0.2, fm_k=10),
    "udc": dict(hidden=100, head=100, l2=1e-6, dropout=0.2, fm_k=10),
    "cqa": dict(encoder_dim=200, hidden=200, head=200, l2=1e-6, dropout=0.2, fm_k=10),
    "tweets": dict(hidden=100, head=100, l2=1e-6, dropout=0.2, fm_k=10),
    "custom": dict(hidden=32, head=32, l2=1e-6, dropout=0.2, fm_k=10),
}


# layers


def highway_layer(
    x: Tensor,
    W_H: Tensor,
    b_H: Tensor,
    W_T: Tensor,
    b_T: Tensor,
    W_P: Tensor | None = None,
    b_P: Tensor | None = None,
) -> Tensor:
    """``y = H(x) * T(x) + (1 - T(x)) * x`` with ReLU ``H`` and sigmoid ``T``.

    If the layer changes width, the carried ``x`` is first mapped through
    ``ReLU(x W_P + b_P)``.
    """
    h = relu(matmul(x, W_H) + b_H)
    t = sigmoid(matmul(x, W_T) + b_T)
    carry = x if W_P is None else relu(matmul(x, W_P) + b_P)
    if carry.shape[-1] != h.shape[-1]:
        raise ShapeError(f"highway: carry width {carry.shape[-1]} != output width {h.shape[-1]}")
    return h * t + (1.0 - t) * carry


def lstm_encode(x: Tensor, mask, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """Unidirectional LSTM over ``(B, L, D)`` with zero initial state.

    Gate blocks in ``W``/``U``/``b`` are ordered input, forget, output,
    candidate.  At masked steps the previous state is carried forward
    unchanged, so trailing padding leaves every state at real positions as is.
    """
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"lstm: input width {x.shape[-1]} != expected {W.shape[0]}")
    batch, length, _ = x.shape
    hidden = U.shape[0]
    mask = np.ones((batch, length), dtype=bool) if mask is None else np.asarray(mask, bool)
    projected = matmul(x, W) + b  # all input contributions at once
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    states = []
    for step in range(length):
        gates = projected[:, step, :] + matmul(h, U)
        i = sigmoid(gates[:, :hidden])
        f = sigmoid(gates[:, hidden : 2 * hidden])
        o = sigmoid(gates[:, 2 * hidden : 3 * hidden])
        g = tanh(gates[:, 3 * hidden :])
        c_new = f * c + i * g
        h_new = o * tanh(c_new)
        keep = mask[:, step : step + 1].astype(np.float64)
        c = c_new * keep + c * (1.0 - keep)
        h = h_new * keep + h * (1.0 - keep)
        states.append(h)
    return stack(states, axis=1)


def meanmax_pool(h: Tensor, mask=None) -> Tensor:
    """``[masked mean; masked max]`` over the sequence axis."""
    m = None if mask is None else np.asarray(mask, bool)[..., None]
    return concat([reduce_mean(h, -2, mask=m), reduce_max(h, -2, mask=m)], -1)


def comparison_vector(xq: Tensor, xd: Tensor) -> Tensor:
    if xq.shape != xd.shape:
        raise ShapeError(f"predict: pooled widths differ, {xq.shape} vs {xd.shape}")
    return concat([xq, xd, xq * xd, xq - xd], -1)


def binary_cross_entropy(probs: Tensor, labels) -> Tensor:
    """Summed ``-[y log p + (1 - y) log(1 - p)]`` with ``p`` the positive probability."""
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = labels.astype(np.float64)
    p = probs[:, 1]
    return -reduce_sum(y * log(p, LOG_FLOOR) + (1.0 - y) * log(1.0 - p, LOG_FLOOR))


def l2_penalty(params: Iterator[Tensor] | Sequence[Tensor]) -> Tensor:
    return reduce_sum(concat([(p * p).reshape(-1) for p in params], 0))


def loss(probs: Tensor, labels, params: Sequence[Tensor], l2: float) -> Tensor:
    """Cross entropy plus ``l2 * ||theta||^2`` over the given trainable tensors."""
    if l2 < 0:
        raise ValueError("l2 weight must be non-negative")
    data = binary_cross_entropy(probs, labels)
    if l2 == 0 or not params:
        return data
    return data + l2_penalty(params) * l2


# the network


def _glorot(rng, fan_in, fan_out, name):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def _zeros(shape, name):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _highway_params(rng, prefix: str, d_in: int, d_out: int) -> dict[str, Tensor]:
    p = {
        f"{prefix}.W_H": _glorot(rng, d_in, d_out, f"{prefix}.W_H"),
        f"{prefix}.b_H": _zeros((d_out,), f"{prefix}.b_H"),
        f"{prefix}.W_T": _glorot(rng, d_in, d_out, f"{prefix}.W_T"),
        f"{prefix}.b_T": _zeros((d_out,), f"{prefix}.b_T"),
    }
    if d_in != d_out:
        p[f"{prefix}.W_P"] = _glorot(rng, d_in, d_out, f"{prefix}.W_P")
        p[f"{prefix}.b_P"] = _zeros((d_out,), f"{prefix}.b_P")
    return p


def _dense_params(rng, prefix: str, d_in: int, d_out: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.W": _glorot(rng, d_in, d_out, f"{prefix}.W"),
        f"{prefix}.b": _zeros((d_out,), f"{prefix}.b"),
    }


def parameter_count(config: ModelConfig) -> int:
    """Number of trainable scalars implied by ``config`` (embeddings excluded)."""
    c = config

    def highway(d_in, d_out):
        return 2 * (d_in * d_out + d_out) + (d_in * d_out + d_out if d_in != d_out else 0)

    total = 0
    if c.use_highway:
        total += highway(c.embed_dim, c.word_dim)
    w = c.word_dim
    da = c.affinity_dim or w
    per_affinity = {"factored": w * da + da, "bilinear": w * w, "concat": 2 * w * da + 2 * da}[c.affinity]
    per_comp = {"sm": lambda n: 0, "nn": lambda n: n + 1, "fm": lambda n: 1 + n + n * c.fm_k}[c.compression]
    total += len(c.enabled_casts) * (per_affinity + per_comp(2 * w) + 2 * per_comp(w))
    if c.use_lstm:
        total += 4 * c.hidden * (c.lstm_input_dim + c.hidden + 1)
    comp_in = 4 * c.pooled_dim
    if c.use_highway:
        total += highway(comp_in, c.head) + highway(c.head, c.head)
    else:
        total += (comp_in * c.head + c.head) + (c.head * c.head + c.head)
    return total + c.head * 2 + 2


@dataclass
class MCAN:
    """Multi-cast attention ranker over a fixed vocabulary's embedding table."""

    config: ModelConfig
    embeddings: Tensor
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, embeddings: EmbeddingTable | np.ndarray, seed: int = 0) -> "MCAN":
        matrix = embeddings.matrix if isinstance(embeddings, EmbeddingTable) else np.asarray(embeddings)
        if matrix.shape[1] != config.embed_dim:
            raise ShapeError(f"embedding width {matrix.shape[1]} != config.embed_dim {config.embed_dim}")
        table = Tensor(np.array(matrix, dtype=np.float64), requires_grad=config.trainable_embeddings, name="embedding")
        model = cls(config, table)
        model.params = model._init_params(np.random.default_rng(seed))
        return model

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.config
        p: dict[str, Tensor] = {}
        if c.use_highway:
            p.update(_highway_params(rng, "encoder", c.embed_dim, c.word_dim))
        for cast in c.enabled_casts:
            p.update(
                attention.init_cast_params(
                    rng, cast, c.word_dim, c.compression, c.fm_k, c.affinity, c.affinity_dim
                )
            )
        if c.use_lstm:
            p["lstm.W"] = _glorot(rng, c.lstm_input_dim, 4 * c.hidden, "lstm.W")
            p["lstm.U"] = _glorot(rng, c.hidden, 4 * c.hidden, "lstm.U")
            p["lstm.b"] = _zeros((4 * c.hidden,), "lstm.b")
        comp_in = 4 * c.pooled_dim
        if c.use_highway:
            p.update(_highway_params(rng, "head.H1", comp_in, c.head))
            p.update(_highway_params(rng, "head.H2", c.head, c.head))
        else:
            p.update(_dense_params(rng, "head.ff1", comp_in, c.head))
            p.update(_dense_params(rng, "head.ff2", c.head, c.head))
        p.update(_dense_params(rng, "output", c.head, 2))
        return p

    # parameter access

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.params)
        if self.config.trainable_embeddings:
            out["embedding"] = self.embeddings
        return out

    def num_parameters(self) -> int:
        return sum(p.size for name, p in self.params.items())

    def zero_grad(self) -> None:
        for p in self.trainable().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.trainable().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        targets = self.trainable()
        if set(state) != set(targets):
            missing, extra = set(targets) - set(state), set(state) - set(targets)
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            if value.shape != targets[name].shape:
                raise ShapeError(f"{name}: shape {value.shape} != {targets[name].shape}")
            targets[name].data = np.array(value, dtype=np.float64)

    # forward pieces

    def _highway(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        return highway_layer(
            x, p[f"{prefix}.W_H"], p[f"{prefix}.b_H"], p[f"{prefix}.W_T"], p[f"{prefix}.b_T"],
            p.get(f"{prefix}.W_P"), p.get(f"{prefix}.b_P"),
        )

    def encode_inputs(self, ids) -> Tensor:
        """Embedding lookup followed by the shared highway encoder."""
        w = embedding_lookup(self.embeddings, ids)
        if self.config.use_highway:
            w = self._highway("encoder", w)
        return w

    def _dropout(self, x: Tensor, training: bool, rng) -> Tensor:
        return dropout(x, self.config.dropout, training, rng)

    def cast_features(self, wq: Tensor, wd: Tensor, q_mask, d_mask):
        c = self.config
        return attention.multi_cast(
            wq, wd, self.params, c.compression, q_mask, d_mask, c.enabled_casts, c.affinity
        )

    def _sequence(self, u: Tensor, mask, training, rng) -> Tensor:
        if self.config.use_lstm:
            p = self.params
            u = self._dropout(lstm_encode(u, mask, p["lstm.W"], p["lstm.U"], p["lstm.b"]), training, rng)
        return meanmax_pool(u, mask)

    def predict(self, xq: Tensor, xd: Tensor, training: bool = False, rng=None) -> Tensor:
        """Class probabilities ``(B, 2)``; column 1 is the relevance score."""
        p = self.params
        y = comparison_vector(xq, xd)
        for layer in ("1", "2"):
            if self.config.use_highway:
                y = self._highway(f"head.H{layer}", y)
            else:
                y = relu(matmul(y, p[f"head.ff{layer}.W"]) + p[f"head.ff{layer}.b"])
            y = self._dropout(y, training, rng)
        return softmax(matmul(y, p["output.W"]) + p["output.b"], -1)

    def forward(self, q_ids, q_mask, d_ids, d_mask, training: bool = False, rng=None) -> Tensor:
        q_mask = np.asarray(q_mask, bool)
        d_mask = np.asarray(d_mask, bool)
        wq = self._dropout(self.encode_inputs(q_ids), training, rng)
        wd = self._dropout(self.encode_inputs(d_ids), training, rng)
        zq, zd = self.cast_features(wq, wd, q_mask, d_mask)
        xq = self._sequence(attention.augment(wq, zq), q_mask, training, rng)
        xd = self._sequence(attention.augment(wd, zd), d_mask, training, rng)
        return self.predict(xq, xd, training, rng)

    def loss(self, probs: Tensor, labels) -> Tensor:
        return loss(probs, labels, list(self.trainable().values()), self.config.l2)

    def score(self, q_ids, q_mask, d_ids, d_mask) -> np.ndarray:
        with no_grad():
            return self.forward(q_ids, q_mask, d_ids, d_mask).data[:, 1].copy()

    def features(self, q_ids, q_mask, d_ids, d_mask) -> tuple[np.ndarray, np.ndarray]:
        """Casted features at inference, widened to all 12 slots (disabled casts are 0)."""
        with no_grad():
            wq, wd = self.encode_inputs(q_ids), self.encode_inputs(d_ids)
            zq, zd = self.cast_features(wq, wd, np.asarray(q_mask, bool), np.asarray(d_mask, bool))
        return self._widen(zq, np.shape(q_ids)), self._widen(zd, np.shape(d_ids))

    def _widen(self, z, shape) -> np.ndarray:
        full = np.zeros(tuple(shape) + (3 * len(CASTS),))
        for k, cast in enumerate(self.config.enabled_casts):
            slot = CASTS.index(cast)
            full[..., 3 * slot : 3 * slot + 3] = z.data[..., 3 * k : 3 * k + 3]
        return full


# checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array, dtype="<f8"), allow_pickle=False)
    return buf.getvalue()


def _write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, model: MCAN, vocab: Vocabulary) -> None:
    """Write config, vocabulary, embeddings and parameters into one zip archive.

    Tensors are stored as ``.npy`` members (shape header, little-endian
    float64).  Archive metadata is fixed so equal models give equal bytes.
    """
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "config.txt", model.config.to_text().encode())
        _write(zf, "vocab.txt", "".join(f"{t}\n" for t in vocab.tokens).encode("utf-8"))
        _write(zf, "embedding.npy", _npy_bytes(model.embeddings.data))
        for name, p in model.params.items():
            _write(zf, f"params/{name}.npy", _npy_bytes(p.data))


def load_checkpoint(path) -> tuple[MCAN, Vocabulary]:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        config = ModelConfig.from_text(zf.read("config.txt").decode())
        tokens = zf.read("vocab.txt").decode("utf-8").splitlines()
        embedding = np.load(io.BytesIO(zf.read("embedding.npy")), allow_pickle=False)
        model = MCAN.create(config, embedding)
        state = {}
        for name in zf.namelist():
            if name.startswith("params/"):
                state[name[len("params/") : -len(".npy")]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    if config.trainable_embeddings:
        state["embedding"] = embedding
    model.load_state_dict(state)
    return model, Vocabulary(tuple(tokens))
