"""Double-precision reference for prefix-shared attention.

Attention over a key/value sequence split into segments can be evaluated
per segment, keeping for every query row the unnormalized weighted-value
accumulator together with the running max logit and the sum of shifted
exponentials. Two such partial results combine exactly (up to round-off)
into the partial result of the concatenated segments, which is what makes
one shared-prefix pass plus per-request distinct passes equivalent to full
attention. Everything here is float64 and deliberately unoptimized: it is
the semantic oracle, not a kernel.

Every segment is fully visible to every query row; causal or sliding-window
masking is out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValidationError(f"{name} must be a 2-D matrix with positive dimensions")
    if not np.isfinite(a).all():
        raise ValidationError(f"{name} contains non-finite entries")
    return a


def _check_kv(q: np.ndarray, k, v, name: str) -> tuple[np.ndarray, np.ndarray]:
    k = _as_matrix(k, f"{name} keys")
    v = _as_matrix(v, f"{name} values")
    if k.shape[1] != q.shape[1]:
        raise ValidationError(
            f"{name} keys have head dim {k.shape[1]}, queries have {q.shape[1]}"
        )
    if v.shape[0] != k.shape[0]:
        raise ValidationError(f"{name} keys and values disagree on sequence length")
    return k, v


@dataclass
class PartialResult:
    """Per-row running state of a segmented softmax-attention evaluation.

    ``o`` is the unnormalized weighted-value accumulator, ``m`` the running
    max logit and ``l`` the sum of exponentials shifted by ``m``. An empty
    segment is represented by m = -inf, l = 0, o = 0 and acts as the
    identity under :func:`merge`.
    """

    o: np.ndarray
    m: np.ndarray
    l: np.ndarray

    @property
    def rows(self) -> int:
        return self.o.shape[0]

    @property
    def value_dim(self) -> int:
        return self.o.shape[1]


def empty_partial(rows: int, value_dim: int) -> PartialResult:
    return PartialResult(
        o=np.zeros((rows, value_dim)),
        m=np.full(rows, -np.inf),
        l=np.zeros(rows),
    )


def partial_attention(q, k, v, scale: float | None = None,
                      logit_offset: float = 0.0) -> PartialResult:
    """Unnormalized attention of ``q`` against one key/value segment.

    ``scale`` defaults to 1/sqrt(head dim). ``logit_offset`` adds a constant
    to every logit; finalized outputs are invariant to it, which the test
    suite uses to probe numerical stability.
    """
    q = _as_matrix(q, "queries")
    if k is None or v is None or np.size(k) == 0:
        dv = np.asarray(v).shape[1] if v is not None and np.asarray(v).ndim == 2 else q.shape[1]
        return empty_partial(q.shape[0], dv)
    k, v = _check_kv(q, k, v, "segment")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    if scale <= 0:
        raise ValidationError("scale must be positive")
    logits = scale * (q @ k.T) + logit_offset
    m = logits.max(axis=1)
    p = np.exp(logits - m[:, None])
    return PartialResult(o=p @ v, m=m, l=p.sum(axis=1))


def merge(a: PartialResult, b: PartialResult) -> PartialResult:
    """Combine partial results of two segments into one.

    Rescales both accumulators to the shared max logit; an all-empty input
    row stays empty. Commutative and associative up to round-off.
    """
    if a.o.shape != b.o.shape:
        raise ValidationError(f"partial result shapes differ: {a.o.shape} vs {b.o.shape}")
    m = np.maximum(a.m, b.m)
    with np.errstate(invalid="ignore"):
        fa = np.exp(a.m - m)
        fb = np.exp(b.m - m)
    fa = np.where(a.l > 0, fa, 0.0)
    fb = np.where(b.l > 0, fb, 0.0)
    return PartialResult(
        o=fa[:, None] * a.o + fb[:, None] * b.o,
        m=m,
        l=fa * a.l + fb * b.l,
    )


def finalize(p: PartialResult) -> np.ndarray:
    """Normalize the accumulator; rejects rows that saw no keys at all."""
    if np.any(p.l <= 0):
        raise ValidationError("cannot finalize: some rows attended to an empty segment set")
    return p.o / p.l[:, None]


def naive_attention(q, k, v, scale: float | None = None) -> np.ndarray:
    """Dense reference: rowwise-stable softmax(scale * Q K^T) V."""
    q = _as_matrix(q, "queries")
    k, v = _check_kv(q, k, v, "full")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    if scale < 0:
        raise ValidationError("scale must be non-negative")
    logits = scale * (q @ k.T)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


@dataclass
class SegmentedKV:
    """Key/value store of one group: a shared prefix plus per-request parts.

    ``prefix`` is a (K, V) pair or None; ``distinct`` holds one (K, V) pair
    (or None) per request, aligned with the query list.
    """

    prefix: tuple[np.ndarray, np.ndarray] | None
    distinct: Sequence[tuple[np.ndarray, np.ndarray] | None]


def prefix_shared_attention(queries: Sequence[np.ndarray], kv: SegmentedKV,
                            scale: float | None = None) -> list[np.ndarray]:
    """Attention of each request against [shared prefix; own distinct KV].

    The prefix partial is computed once over the stacked group queries and
    sliced per request, mirroring how shared-prefix evaluation turns many
    matrix-vector products into a single matrix-matrix product.
    """
    if len(queries) != len(kv.distinct):
        raise ValidationError("one distinct KV pair per request is required")
    qs = [_as_matrix(q, f"queries[{i}]") for i, q in enumerate(queries)]
    d = qs[0].shape[1]
    for q in qs:
        if q.shape[1] != d:
            raise ValidationError("all query matrices must share the head dimension")
    if scale is None:
        scale = 1.0 / np.sqrt(d)

    stacked = np.vstack(qs)
    if kv.prefix is not None:
        pk, pv = kv.prefix
        prefix_all = partial_attention(stacked, pk, pv, scale)
    else:
        prefix_all = None

    outputs = []
    row = 0
    for q, pair in zip(qs, kv.distinct):
        n = q.shape[0]
        if pair is None and prefix_all is None:
            raise ValidationError("request has neither prefix nor distinct keys")
        if pair is not None:
            dk, dv = pair
            part = partial_attention(q, dk, dv, scale)
        else:
            part = empty_partial(n, prefix_all.value_dim)
        if prefix_all is not None:
            prefix_part = PartialResult(
                o=prefix_all.o[row:row + n],
                m=prefix_all.m[row:row + n],
                l=prefix_all.l[row:row + n],
            )
            part = merge(prefix_part, part)
        outputs.append(finalize(part))
        row += n
    return outputs


def run_selftest(trials: int = 50, seed: int = 0) -> dict:
    """Randomized oracle agreement checks; returns a pass/fail summary."""
    rng = np.random.default_rng(seed)
    err_partial = 0.0
    err_split = 0.0
    err_assoc = 0.0
    err_empty = 0.0
    err_group = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 17))
        d = int(rng.integers(1, 33))
        total = int(rng.integers(3, 129))
        q = rng.uniform(-10, 10, (n, d))
        k = rng.uniform(-10, 10, (total, d))
        v = rng.uniform(-10, 10, (total, d))
        scale = 1.0 / np.sqrt(d)
        expect = naive_attention(q, k, v, scale)

        got = finalize(partial_attention(q, k, v, scale))
        err_partial = max(err_partial, float(np.abs(got - expect).max()))

        cut = int(rng.integers(1, total))
        a = partial_attention(q, k[:cut], v[:cut], scale)
        b = partial_attention(q, k[cut:], v[cut:], scale)
        err_split = max(err_split, float(np.abs(finalize(merge(a, b)) - expect).max()))

        if total >= 3:
            c1, c2 = sorted(rng.choice(np.arange(1, total), size=2, replace=False).tolist())
            p1 = partial_attention(q, k[:c1], v[:c1], scale)
            p2 = partial_attention(q, k[c1:c2], v[c1:c2], scale)
            p3 = partial_attention(q, k[c2:], v[c2:], scale)
            left = finalize(merge(merge(p1, p2), p3))
            right = finalize(merge(p1, merge(p2, p3)))
            err_assoc = max(err_assoc, float(np.abs(left - right).max()),
                            float(np.abs(left - expect).max()))

        whole = partial_attention(q, k, v, scale)
        ident = finalize(merge(whole, empty_partial(n, d)))
        err_empty = max(err_empty, float(np.abs(ident - finalize(whole)).max()))

        sizes = rng.integers(1, 5, size=3)
        group_q = [rng.uniform(-10, 10, (int(s), d)) for s in sizes]
        dl = [int(rng.integers(1, 33)) for _ in sizes]
        kvs = SegmentedKV(
            prefix=(k, v),
            distinct=[(rng.uniform(-10, 10, (m, d)), rng.uniform(-10, 10, (m, d))) for m in dl],
        )
        outs = prefix_shared_attention(group_q, kvs, scale)
        for gq, pair, out in zip(group_q, kvs.distinct, outs):
            full_k = np.vstack([k, pair[0]])
            full_v = np.vstack([v, pair[1]])
            ref = naive_attention(gq, full_k, full_v, scale)
            err_group = max(err_group, float(np.abs(out - ref).max()))

    errors = {
        "partial_vs_naive": err_partial,
        "two_way_merge_vs_naive": err_split,
        "three_way_associativity": err_assoc,
        "empty_segment_identity": err_empty,
        "prefix_shared_vs_naive": err_group,
    }
    tolerances = {
        "partial_vs_naive": 1e-12,
        "two_way_merge_vs_naive": 1e-12,
        "three_way_associativity": 1e-10,
        "empty_segment_identity": 1e-12,
        "prefix_shared_vs_naive": 1e-10,
    }
    passed = all(errors[name] <= tolerances[name] for name in errors)
    return {"passed": passed, "trials": trials, "max_abs_errors": errors,
            "tolerances": tolerances}
