"""Scatter/segment kernels and span decoding.

Every kernel has a numba implementation and a pure-numpy one with the same
signature. The numba path is used unless ``KALA_DISABLE_NUMBA`` is set to a
truthy value before import (or numba itself is missing). Both paths stay
importable as ``numpy_kernels`` / ``numba_kernels`` so they can be compared.
"""

import os
from types import SimpleNamespace

import numpy as np

_FLAG = os.environ.get("KALA_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG in ("1", "true", "yes", "on")

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _as_2d(values):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return values.reshape(-1, 1), True
    return values.reshape(values.shape[0], -1), False


# ----------------------------------------------------------------------------
# pure numpy
# ----------------------------------------------------------------------------

def _np_scatter_add_rows(out, index, src):
    np.add.at(out, index, src)


def _np_segment_sum(values, segment, num_segments):
    flat, _ = _as_2d(values)
    out = np.zeros((num_segments, flat.shape[1]))
    np.add.at(out, segment, flat)
    return out.reshape((num_segments,) + np.shape(values)[1:])


def _np_segment_softmax(scores, segment, num_segments, mask):
    scores = np.asarray(scores, dtype=np.float64)
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segment[mask], scores[mask])
    alpha = np.zeros_like(scores)
    live = mask & np.isfinite(seg_max[segment])
    alpha[live] = np.exp(scores[live] - seg_max[segment[live]])
    denom = np.zeros(num_segments)
    np.add.at(denom, segment, alpha)
    alpha[live] = alpha[live] / denom[segment[live]]
    return alpha


def _np_segment_softmax_backward(alpha, grad, segment, num_segments):
    weighted = alpha * grad
    inner = np.zeros(num_segments)
    np.add.at(inner, segment, weighted)
    return weighted - alpha * inner[segment]


def _np_best_span(start_logits, end_logits, valid, max_len):
    n = start_logits.shape[0]
    idx = np.arange(n)
    total = start_logits[:, None] + end_logits[None, :]
    width = idx[None, :] - idx[:, None]
    ok = (width >= 0) & (width < max_len) & valid[:, None] & valid[None, :]
    if not ok.any():
        return -1, -1, -np.inf
    total = np.where(ok, total, -np.inf)
    # row-major argmax: lowest start first, then lowest end (shortest span)
    flat = int(np.argmax(total))
    s, e = divmod(flat, n)
    return s, e, float(total[s, e])


numpy_kernels = SimpleNamespace(
    scatter_add_rows=_np_scatter_add_rows,
    segment_sum=_np_segment_sum,
    segment_softmax=_np_segment_softmax,
    segment_softmax_backward=_np_segment_softmax_backward,
    best_span=_np_best_span,
)


# ----------------------------------------------------------------------------
# numba
# ----------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_scatter_add_2d(out, index, src):
        for k in range(index.shape[0]):
            row = index[k]
            for c in range(src.shape[1]):
                out[row, c] += src[k, c]

    @njit(cache=True)
    def _nb_segment_softmax_kernel(scores, segment, num_segments, mask):
        seg_max = np.full(num_segments, -np.inf)
        for k in range(scores.shape[0]):
            if mask[k] and scores[k] > seg_max[segment[k]]:
                seg_max[segment[k]] = scores[k]
        alpha = np.zeros(scores.shape[0])
        denom = np.zeros(num_segments)
        for k in range(scores.shape[0]):
            s = segment[k]
            if mask[k] and np.isfinite(seg_max[s]):
                alpha[k] = np.exp(scores[k] - seg_max[s])
                denom[s] += alpha[k]
        for k in range(scores.shape[0]):
            if alpha[k] != 0.0:
                alpha[k] = alpha[k] / denom[segment[k]]
        return alpha

    @njit(cache=True)
    def _nb_segment_softmax_backward(alpha, grad, segment, num_segments):
        inner = np.zeros(num_segments)
        for k in range(alpha.shape[0]):
            inner[segment[k]] += alpha[k] * grad[k]
        out = np.empty(alpha.shape[0])
        for k in range(alpha.shape[0]):
            out[k] = alpha[k] * grad[k] - alpha[k] * inner[segment[k]]
        return out

    @njit(cache=True)
    def _nb_best_span_kernel(start_logits, end_logits, valid, max_len):
        n = start_logits.shape[0]
        best_s = -1
        best_e = -1
        best = -np.inf
        for s in range(n):
            if not valid[s]:
                continue
            stop = min(n, s + max_len)
            for e in range(s, stop):
                if not valid[e]:
                    continue
                score = start_logits[s] + end_logits[e]
                if score > best:
                    best = score
                    best_s = s
                    best_e = e
        return best_s, best_e, best

    def _nb_scatter_add_rows(out, index, src):
        view = out.reshape(out.shape[0], -1)
        flat = np.ascontiguousarray(src, dtype=np.float64).reshape(len(index), -1)
        _nb_scatter_add_2d(view, np.ascontiguousarray(index, dtype=np.int64), flat)

    def _nb_segment_sum(values, segment, num_segments):
        flat, _ = _as_2d(values)
        out = np.zeros((num_segments, flat.shape[1]))
        _nb_scatter_add_2d(out, np.ascontiguousarray(segment, dtype=np.int64),
                           np.ascontiguousarray(flat))
        return out.reshape((num_segments,) + np.shape(values)[1:])

    def _nb_segment_softmax(scores, segment, num_segments, mask):
        return _nb_segment_softmax_kernel(
            np.ascontiguousarray(scores, dtype=np.float64),
            np.ascontiguousarray(segment, dtype=np.int64),
            num_segments,
            np.ascontiguousarray(mask, dtype=np.bool_),
        )

    def _nb_segment_softmax_bw(alpha, grad, segment, num_segments):
        return _nb_segment_softmax_backward(
            np.ascontiguousarray(alpha, dtype=np.float64),
            np.ascontiguousarray(grad, dtype=np.float64),
            np.ascontiguousarray(segment, dtype=np.int64),
            num_segments,
        )

    def _nb_best_span(start_logits, end_logits, valid, max_len):
        s, e, score = _nb_best_span_kernel(
            np.ascontiguousarray(start_logits, dtype=np.float64),
            np.ascontiguousarray(end_logits, dtype=np.float64),
            np.ascontiguousarray(valid, dtype=np.bool_),
            int(max_len),
        )
        return int(s), int(e), float(score)

    numba_kernels = SimpleNamespace(
        scatter_add_rows=_nb_scatter_add_rows,
        segment_sum=_nb_segment_sum,
        segment_softmax=_nb_segment_softmax,
        segment_softmax_backward=_nb_segment_softmax_bw,
        best_span=_nb_best_span,
    )
else:  # pragma: no cover
    numba_kernels = None


USING_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED
_active = numba_kernels if USING_NUMBA else numpy_kernels

scatter_add_rows = _active.scatter_add_rows
segment_sum = _active.segment_sum
segment_softmax = _active.segment_softmax
segment_softmax_backward = _active.segment_softmax_backward
best_span = _active.best_span


def backend_name():
    return "numba" if USING_NUMBA else "numpy"
