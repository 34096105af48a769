"""Small numeric helpers shared by the library, CLI, and tests."""

from __future__ import annotations

import numpy as np


def max_relative_error(a: np.ndarray, ref: np.ndarray) -> float:
    """max |a - ref| normalized by the largest reference magnitude."""
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = max(float(np.max(np.abs(ref))), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(a - ref))) / scale if a.size else 0.0


def mean_relative_error(a: np.ndarray, ref: np.ndarray) -> float:
    """mean |a - ref| normalized by the mean reference magnitude."""
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = max(float(np.mean(np.abs(ref))), np.finfo(np.float64).tiny)
    return float(np.mean(np.abs(a - ref))) / scale if a.size else 0.0


def elementwise_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """max_i |a_i - b_i| / (max(|a_i|, |b_i|) + floor); symmetric, for gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b)) + floor
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def softmax_rows(s: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis in float64; -inf entries get weight 0."""
    s = np.asarray(s, dtype=np.float64)
    m = np.max(s, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore"):
        e = np.exp(s - m)
    e = np.where(np.isfinite(s), e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)
