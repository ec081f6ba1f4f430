"""Small numerical helpers shared across modules."""

from __future__ import annotations

import numpy as np


def logsumexp(a: np.ndarray, axis=None) -> np.ndarray | float:
    """Stable log(sum(exp(a))); -inf rows propagate cleanly."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.ravel()[0])
    return np.squeeze(out, axis=axis)


def softmax_rows(logw: np.ndarray) -> np.ndarray:
    """Rowwise softmax of log-weights (m, n) -> (m, n), each row summing to 1."""
    m = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - m)
    w /= w.sum(axis=1, keepdims=True)
    return w


def spawned_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator on an independent stream derived from (seed, key).

    Streams for distinct keys never collide, and the derivation does not
    depend on how work is batched, which is what makes runs reproducible
    under any worker count.
    """
    ss = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(ss))
