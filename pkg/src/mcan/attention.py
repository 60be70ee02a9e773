"""Co-attention, intra-attention and casted attention features.

All functions accept sequences shaped ``(..., L, D)`` with boolean masks
shaped ``(..., L)``; a missing mask means every position is real.  Each
attention cast compares every word ``x`` with an attended counterpart
``x_bar`` three ways (concatenation, product, difference) and compresses each
comparison to one scalar, giving three features per word per cast::

    z = [align: c, m, s | max: c, m, s | mean: c, m, s | intra: c, m, s]

For the extractive (max / mean) casts the pooled vector of a sequence is
broadcast to all of its positions before comparison.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import (
    MaskError,
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    matmul,
    reduce,
    reduce_sum,
    relu,
    reshape,
    softmax,
    transpose,
)

CASTS = ("align", "max", "mean", "intra")
COMPOSITIONS = ("concat", "mul", "sub")
COMPRESSIONS = ("sm", "nn", "fm")
AFFINITY_FORMS = ("factored", "bilinear", "concat")
FEATURE_NAMES = tuple(f"{cast}_{comp}" for cast in CASTS for comp in COMPOSITIONS)

COMPRESSION_INIT_RANGE = 0.05

Params = Mapping[str, Tensor]


def _mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} does not match sequence shape {tuple(shape)}")
    if np.any(~mask.any(axis=-1)):
        raise MaskError("empty sequence reached attention")
    return mask


def _unsqueeze(x: Tensor, axis: int) -> Tensor:
    shape = list(x.shape)
    shape.insert(axis % (x.ndim + 1), 1)
    return reshape(x, tuple(shape))


# affinity


def projection(weight: Tensor, bias: Tensor) -> Callable[[Tensor], Tensor]:
    """The per-cast word transform ``F(x) = ReLU(x W + b)``."""
    return lambda x: relu(matmul(x, weight) + bias)


def affinity(q: Tensor, d: Tensor, F: Callable[[Tensor], Tensor], q_mask=None, d_mask=None) -> Tensor:
    """``s[i, j] = F(q_i) . F(d_j)``, shape ``(..., Lq, Ld)``."""
    _mask(q_mask, q.shape[:-1])
    _mask(d_mask, d.shape[:-1])
    return matmul(F(q), transpose(F(d)))


def bilinear_affinity(q: Tensor, d: Tensor, M: Tensor, q_mask=None, d_mask=None) -> Tensor:
    """``s[i, j] = q_i^T M d_j``."""
    _mask(q_mask, q.shape[:-1])
    _mask(d_mask, d.shape[:-1])
    return matmul(matmul(q, M), transpose(d))


def concat_affinity(
    q: Tensor, d: Tensor, Wq: Tensor, Wd: Tensor, b: Tensor, v: Tensor, q_mask=None, d_mask=None
) -> Tensor:
    """``s[i, j] = v . ReLU(W [q_i; d_j] + b)`` with ``W = [Wq; Wd]``."""
    _mask(q_mask, q.shape[:-1])
    _mask(d_mask, d.shape[:-1])
    hq = _unsqueeze(matmul(q, Wq), -2)  # (..., Lq, 1, H)
    hd = _unsqueeze(matmul(d, Wd), -3)  # (..., 1, Ld, H)
    return matmul(relu(hq + hd + b), v)


# pooling


def extractive_weights(s: Tensor, q_mask=None, d_mask=None, how: str = "max") -> tuple[Tensor, Tensor]:
    """Softmax word weights from row/column max (or mean) pooling of ``s``.

    Returns ``(wq, wd)`` shaped ``(..., Lq)`` and ``(..., Ld)``.
    """
    if how not in ("max", "mean"):
        raise ValueError(f"unknown pooling {how!r}")
    q_mask = _mask(q_mask, s.shape[:-1])
    d_mask = _mask(d_mask, s.shape[:-2] + s.shape[-1:])
    row = reduce(how, s, -1, mask=d_mask[..., None, :])  # each q word vs all of d
    col = reduce(how, s, -2, mask=q_mask[..., :, None])  # each d word vs all of q
    return softmax(row, -1, mask=q_mask), softmax(col, -1, mask=d_mask)


def weighted_sum(w: Tensor, x: Tensor) -> Tensor:
    """``sum_i w_i x_i`` over the sequence axis: ``(..., L), (..., L, D) -> (..., D)``."""
    return reduce_sum(_unsqueeze(w, -1) * x, -2)


def max_pool_coattention(s: Tensor, q: Tensor, d: Tensor, q_mask=None, d_mask=None) -> tuple[Tensor, Tensor]:
    wq, wd = extractive_weights(s, q_mask, d_mask, "max")
    return weighted_sum(wq, q), weighted_sum(wd, d)


def mean_pool_coattention(s: Tensor, q: Tensor, d: Tensor, q_mask=None, d_mask=None) -> tuple[Tensor, Tensor]:
    wq, wd = extractive_weights(s, q_mask, d_mask, "mean")
    return weighted_sum(wq, q), weighted_sum(wd, d)


def alignment_weights(s: Tensor, q_mask=None, d_mask=None) -> tuple[Tensor, Tensor]:
    """Soft alignment matrices, both shaped like ``s``.

    ``aq[..., i, :]`` distributes query word ``i`` over the document and
    ``ad[..., :, j]`` distributes document word ``j`` over the query.
    """
    q_mask = _mask(q_mask, s.shape[:-1])
    d_mask = _mask(d_mask, s.shape[:-2] + s.shape[-1:])
    aq = softmax(s, -1, mask=d_mask[..., None, :])
    ad = softmax(s, -2, mask=q_mask[..., :, None])
    return aq, ad


def alignment_coattention(s: Tensor, q: Tensor, d: Tensor, q_mask=None, d_mask=None) -> tuple[Tensor, Tensor]:
    """Return ``(q_aligned, d_aligned)``.

    ``q_aligned`` has one row per query word, each a blend of document words;
    ``d_aligned`` has one row per document word, each a blend of query words.
    """
    aq, ad = alignment_weights(s, q_mask, d_mask)
    q_aligned = reduce_sum(_unsqueeze(aq, -1) * _unsqueeze(d, -3), -2)
    d_aligned = reduce_sum(_unsqueeze(ad, -1) * _unsqueeze(q, -2), -3)
    return q_aligned, d_aligned


def intra_attention(x: Tensor, F: Callable[[Tensor], Tensor], mask=None) -> Tensor:
    """Align a sequence with itself: ``x'_i = sum_j softmax_j(s_ij) x_j``."""
    s = affinity(x, x, F, mask, mask)
    aligned, _ = alignment_coattention(s, x, x, mask, mask)
    return aligned


# comparison and compression


def compose(x: Tensor, x_bar: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """``([x_bar; x], x_bar * x, x_bar - x)``; ``x_bar`` may broadcast over positions."""
    if x.shape[-1] != x_bar.shape[-1]:
        raise ShapeError(f"compose: widths differ, {x.shape[-1]} vs {x_bar.shape[-1]}")
    if x_bar.shape != x.shape:
        x_bar = broadcast_to(x_bar, x.shape)
    return concat([x_bar, x], -1), x_bar * x, x_bar - x


def compress_sum(v: Tensor) -> Tensor:
    return reduce_sum(v, -1)


def compress_nn(v: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``ReLU(v . w + b)`` with ``weight`` shaped ``(n, 1)``."""
    if weight.shape[0] != v.shape[-1]:
        raise ShapeError(f"compress_nn: weight expects width {weight.shape[0]}, got {v.shape[-1]}")
    out = relu(matmul(v, weight) + bias)
    return reshape(out, out.shape[:-1])


def compress_fm(v: Tensor, w0: Tensor, w: Tensor, V: Tensor) -> Tensor:
    """Second-order factorization machine on the last axis of ``v``.

    The pairwise term uses the linear-time identity
    ``sum_{i<j} <V_i,V_j> v_i v_j = 1/2 sum_f [(sum_i V_if v_i)^2 - sum_i V_if^2 v_i^2]``.
    """
    if V.ndim != 2 or V.shape[1] < 1:
        raise ShapeError(f"compress_fm: factor matrix must be n x k with k >= 1, got {V.shape}")
    if w.shape[0] != v.shape[-1] or V.shape[0] != v.shape[-1]:
        raise ShapeError(f"compress_fm: parameters expect width {w.shape[0]}, got {v.shape[-1]}")
    linear = matmul(v, w)
    xv = matmul(v, V)
    pairwise = reduce_sum(xv * xv - matmul(v * v, V * V), -1) * 0.5
    return reshape(w0, ()) + linear + pairwise


def compress(v: Tensor, kind: str, params: Params, prefix: str) -> Tensor:
    if kind == "sm":
        return compress_sum(v)
    if kind == "nn":
        return compress_nn(v, params[f"{prefix}.w"], params[f"{prefix}.b"])
    if kind == "fm":
        return compress_fm(v, params[f"{prefix}.w0"], params[f"{prefix}.w"], params[f"{prefix}.V"])
    raise ValueError(f"unknown compression {kind!r}")


# parameters


def _uniform(rng, shape, limit, name) -> Tensor:
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)


def _glorot(rng, fan_in, fan_out, name) -> Tensor:
    return _uniform(rng, (fan_in, fan_out), np.sqrt(6.0 / (fan_in + fan_out)), name)


def _zeros(shape, name) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_cast_params(
    rng: np.random.Generator,
    cast: str,
    width: int,
    compression: str,
    fm_k: int = 10,
    affinity_form: str = "factored",
    affinity_dim: int | None = None,
) -> dict[str, Tensor]:
    """Fresh, unshared parameters for one attention cast over ``width``-wide words."""
    if cast not in CASTS:
        raise ValueError(f"unknown cast {cast!r}")
    if compression not in COMPRESSIONS:
        raise ValueError(f"unknown compression {compression!r}")
    da = affinity_dim or width
    base = f"cast.{cast}"
    p: dict[str, Tensor] = {}
    if affinity_form == "factored":
        p[f"{base}.affinity.W"] = _glorot(rng, width, da, f"{base}.affinity.W")
        p[f"{base}.affinity.b"] = _zeros((da,), f"{base}.affinity.b")
    elif affinity_form == "bilinear":
        p[f"{base}.affinity.M"] = _glorot(rng, width, width, f"{base}.affinity.M")
    elif affinity_form == "concat":
        for side in ("Wq", "Wd"):
            p[f"{base}.affinity.{side}"] = _glorot(rng, width, da, f"{base}.affinity.{side}")
        p[f"{base}.affinity.b"] = _zeros((da,), f"{base}.affinity.b")
        p[f"{base}.affinity.v"] = _uniform(rng, (da,), np.sqrt(6.0 / (da + 1)), f"{base}.affinity.v")
    else:
        raise ValueError(f"unknown affinity form {affinity_form!r}")
    for comp in COMPOSITIONS:
        n = 2 * width if comp == "concat" else width
        prefix = f"{base}.{comp}"
        if compression == "nn":
            p[f"{prefix}.w"] = _uniform(rng, (n, 1), COMPRESSION_INIT_RANGE, f"{prefix}.w")
            p[f"{prefix}.b"] = _zeros((1,), f"{prefix}.b")
        elif compression == "fm":
            p[f"{prefix}.w0"] = _zeros((1,), f"{prefix}.w0")
            p[f"{prefix}.w"] = _uniform(rng, (n,), COMPRESSION_INIT_RANGE, f"{prefix}.w")
            p[f"{prefix}.V"] = _uniform(rng, (n, fm_k), COMPRESSION_INIT_RANGE, f"{prefix}.V")
    return p


def cast_affinity(params: Params, cast: str, form: str, q: Tensor, d: Tensor, q_mask=None, d_mask=None) -> Tensor:
    base = f"cast.{cast}.affinity"
    if form == "factored":
        return affinity(q, d, projection(params[f"{base}.W"], params[f"{base}.b"]), q_mask, d_mask)
    if form == "bilinear":
        return bilinear_affinity(q, d, params[f"{base}.M"], q_mask, d_mask)
    if form == "concat":
        return concat_affinity(
            q, d, params[f"{base}.Wq"], params[f"{base}.Wd"],
            params[f"{base}.b"], params[f"{base}.v"], q_mask, d_mask,
        )
    raise ValueError(f"unknown affinity form {form!r}")


# multi-cast


def _cast_features(x: Tensor, x_bar: Tensor, compression: str, params: Params, cast: str) -> list[Tensor]:
    return [
        compress(v, compression, params, f"cast.{cast}.{comp}")
        for comp, v in zip(COMPOSITIONS, compose(x, x_bar))
    ]


def multi_cast(
    q: Tensor,
    d: Tensor,
    params: Params,
    compression: str = "fm",
    q_mask=None,
    d_mask=None,
    enabled_casts: Sequence[str] = CASTS,
    affinity_form: str = "factored",
) -> tuple[Tensor | None, Tensor | None]:
    """Casted features ``(zq, zd)`` shaped ``(..., Lq, 3k)`` and ``(..., Ld, 3k)``.

    ``k`` is the number of enabled casts, kept in canonical order.  Padded
    positions get zero features.  Returns ``(None, None)`` when no cast is
    enabled.
    """
    unknown = set(enabled_casts) - set(CASTS)
    if unknown:
        raise ValueError(f"unknown casts {sorted(unknown)}")
    q_mask = _mask(q_mask, q.shape[:-1])
    d_mask = _mask(d_mask, d.shape[:-1])
    fq: list[Tensor] = []
    fd: list[Tensor] = []
    for cast in CASTS:
        if cast not in enabled_casts:
            continue
        if cast == "intra":
            q_bar = _intra_cast(params, affinity_form, q, q_mask)
            d_bar = _intra_cast(params, affinity_form, d, d_mask)
        else:
            s = cast_affinity(params, cast, affinity_form, q, d, q_mask, d_mask)
            if cast == "align":
                q_bar, d_bar = alignment_coattention(s, q, d, q_mask, d_mask)
            else:
                pool = max_pool_coattention if cast == "max" else mean_pool_coattention
                q_bar, d_bar = pool(s, q, d, q_mask, d_mask)
                q_bar, d_bar = _unsqueeze(q_bar, -2), _unsqueeze(d_bar, -2)
        fq += _cast_features(q, q_bar, compression, params, cast)
        fd += _cast_features(d, d_bar, compression, params, cast)
    if not fq:
        return None, None
    zq = _stack_features(fq) * q_mask[..., None]
    zd = _stack_features(fd) * d_mask[..., None]
    return zq, zd


def _intra_cast(params: Params, form: str, x: Tensor, mask) -> Tensor:
    s = cast_affinity(params, "intra", form, x, x, mask, mask)
    aligned, _ = alignment_coattention(s, x, x, mask, mask)
    return aligned


def _stack_features(features: list[Tensor]) -> Tensor:
    return concat([_unsqueeze(f, -1) for f in features], -1)


def augment(w: Tensor, z: Tensor | None) -> Tensor:
    """Attach casted features to word vectors: ``[w; z]``."""
    return w if z is None else concat([w, z], -1)
