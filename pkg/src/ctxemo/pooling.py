"""Span pooling: token representations -> one fixed-size vector per utterance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import PoolingError

POOLING_MODES = ("max", "mean")


def _span_arrays(spans, n_rows):
    spans = list(spans)
    starts = np.array([s for s, _ in spans], dtype=np.int64)
    ends = np.array([e for _, e in spans], dtype=np.int64)
    for u, (s, e) in enumerate(spans):
        if e <= s:
            raise PoolingError(f"span {u} ({s}, {e}) is empty")
        if s < 0 or e > n_rows:
            raise PoolingError(f"span {u} ({s}, {e}) out of bounds for {n_rows} rows")
    return starts, ends


@dataclass
class PoolCache:
    mode: str
    n_rows: int
    starts: np.ndarray
    ends: np.ndarray
    argmax: np.ndarray | None = None


def pool_forward(reps, spans, mode: str = "max"):
    """Pool ``reps`` over ``spans``; returns ``(pooled, cache)`` for :func:`pool_backward`."""
    if mode not in POOLING_MODES:
        raise ValueError(f"pooling mode must be one of {POOLING_MODES}, got {mode!r}")
    starts, ends = _span_arrays(spans, reps.shape[0])
    if len(starts) == 0:
        return np.zeros((0, reps.shape[1]), dtype=reps.dtype), PoolCache(mode, reps.shape[0], starts, ends)
    if mode == "max":
        out, arg = kernels.max_pool(reps, starts, ends)
        return out, PoolCache(mode, reps.shape[0], starts, ends, arg)
    return kernels.mean_pool(reps, starts, ends), PoolCache(mode, reps.shape[0], starts, ends)


def pool_backward(grad_out, cache: PoolCache):
    if len(cache.starts) == 0:
        return np.zeros((cache.n_rows, grad_out.shape[1]), dtype=grad_out.dtype)
    if cache.mode == "max":
        # every column's gradient lands on its single (lowest-index) argmax row
        return kernels.max_pool_backward(grad_out, cache.argmax, cache.n_rows)
    return kernels.mean_pool_backward(grad_out, cache.starts, cache.ends, cache.n_rows)


def dynamic_max_pool(reps, spans) -> np.ndarray:
    return pool_forward(reps, spans, "max")[0]


def dynamic_mean_pool(reps, spans) -> np.ndarray:
    return pool_forward(reps, spans, "mean")[0]
