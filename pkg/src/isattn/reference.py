"""Numerically exact full attention (forward/backward) and the online-softmax accumulator.

This module is the oracle the sparse paths are tested against. All score and
reduction arithmetic happens in float64 regardless of storage precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateRowError, LayoutError
from .tensor import BlockLayout, Tensor4, ensure_tensor4


@dataclass
class GradBundle:
    """Gradients w.r.t. the attention primals; dims match Q/K/V exactly."""

    dq: Tensor4
    dk: Tensor4
    dv: Tensor4


class OnlineState:
    """Running (max, normalizer, output accumulator) for blockwise softmax attention.

    update() folds in one block of scores/values, rescaling the accumulators by
    exp(m - m_new) whenever the running max moves. `weights` multiplies the
    exponentials per score column (used by the Taylor branch, where one column
    stands for a whole block of `valid_rows` identical entries).
    """

    def __init__(self, rows: int, dim: int):
        self.m = np.full(rows, -np.inf)
        self.ell = np.zeros(rows)
        self.o_acc = np.zeros((rows, dim))

    def update(self, scores: np.ndarray, values: np.ndarray, weights=None) -> None:
        scores = np.asarray(scores, dtype=np.float64)
        m_new = np.maximum(self.m, scores.max(axis=1, initial=-np.inf))
        with np.errstate(invalid="ignore"):
            p = np.exp(scores - m_new[:, None])
        p = np.where(np.isfinite(scores), p, 0.0)
        if weights is not None:
            p = p * weights
        delta = self.m - m_new
        delta[~np.isfinite(delta)] = 0.0  # both -inf: nothing accumulated yet
        alpha = np.exp(delta)
        self.ell = self.ell * alpha + p.sum(axis=1)
        self.o_acc = self.o_acc * alpha[:, None] + p @ np.asarray(values, dtype=np.float64)
        self.m = m_new

    def finalize(self) -> np.ndarray:
        if np.any(self.ell <= 0.0):
            raise DegenerateRowError("row with empty key set: normalizer is zero")
        return self.o_acc / self.ell[:, None]


def _default_scale(d: int) -> float:
    return 1.0 / math.sqrt(d)


def _key_mask(mask, B: int, H: int, S_k: int) -> Optional[np.ndarray]:
    """Normalize an optional key-validity mask to bool (B,H,S_k); True = valid key."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (B, H, S_k))
    if mask.shape != (B, H, S_k):
        raise LayoutError(f"key mask shape {mask.shape} != (B,H,S_k)=({B},{H},{S_k})")
    return mask


def full_attention(
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    scale: Optional[float] = None,
    mask=None,
    row_chunk: int = 2048,
) -> Tensor4:
    """Direct softmax attention: O = softmax(scale * Q K^T) V with max-subtraction.

    `mask` optionally marks key validity (False keys get zero weight). Query
    rows are processed in chunks so the score matrix never exceeds
    row_chunk x S_k per head.
    """
    q = ensure_tensor4(q, "Q")
    k = ensure_tensor4(k, "K")
    v = ensure_tensor4(v, "V")
    B, H, S_q, D = q.shape
    if k.shape[:2] != (B, H) or v.shape[:2] != (B, H) or k.shape[3] != D:
        raise LayoutError(f"Q/K/V batch/head/dim mismatch: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[2] != v.shape[2]:
        raise LayoutError(f"K and V sequence lengths differ: {k.shape[2]} vs {v.shape[2]}")
    if scale is None:
        scale = _default_scale(D)
    if scale <= 0:
        raise ConfigError(f"scale must be > 0, got {scale}")
    km = _key_mask(mask, B, H, k.shape[2])
    out = np.empty((B, H, S_q, v.shape[3]), dtype=q.dtype)
    for bi in range(B):
        for hi in range(H):
            kf = k[bi, hi].astype(np.float64)
            vf = v[bi, hi].astype(np.float64)
            for lo in range(0, S_q, row_chunk):
                hi_row = min(lo + row_chunk, S_q)
                s = scale * (q[bi, hi, lo:hi_row].astype(np.float64) @ kf.T)
                if km is not None:
                    s[:, ~km[bi, hi]] = -np.inf
                m = s.max(axis=1)
                if np.any(~np.isfinite(m)):
                    raise DegenerateRowError("query row with all keys masked")
                p = np.exp(s - m[:, None])
                if km is not None:
                    p[:, ~km[bi, hi]] = 0.0
                out[bi, hi, lo:hi_row] = (p @ vf / p.sum(axis=1)[:, None]).astype(q.dtype)
    return out


def online_softmax_attention(
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    scale: Optional[float] = None,
    layout: Optional[BlockLayout] = None,
    mask=None,
    block_order: Optional[Sequence[int]] = None,
) -> Tensor4:
    """Blockwise attention via OnlineState updates; same contract as full_attention.

    `layout` partitions the key axis (defaults to one block of 128 rows);
    `block_order` overrides the ascending visiting order (testing hook).
    """
    q = ensure_tensor4(q, "Q")
    k = ensure_tensor4(k, "K")
    v = ensure_tensor4(v, "V")
    B, H, S_q, D = q.shape
    S_k = k.shape[2]
    if k.shape[:2] != (B, H) or v.shape[:2] != (B, H) or k.shape[3] != D or v.shape[2] != S_k:
        raise LayoutError(f"Q/K/V batch/head/dim mismatch: {q.shape}, {k.shape}, {v.shape}")
    if scale is None:
        scale = _default_scale(D)
    if layout is None:
        layout = BlockLayout(block_size=min(128, S_k), seq_len=S_k)
    if layout.seq_len != S_k:
        raise LayoutError(f"layout.seq_len {layout.seq_len} != key length {S_k}")
    km = _key_mask(mask, B, H, S_k)
    order = range(layout.num_blocks) if block_order is None else block_order
    b = layout.block_size
    out = np.empty((B, H, S_q, v.shape[3]), dtype=q.dtype)
    if S_q == 0:
        return out
    for bi in range(B):
        for hi in range(H):
            qf = q[bi, hi].astype(np.float64)
            state = OnlineState(S_q, v.shape[3])
            for j in order:
                lo, hi_col = j * b, min((j + 1) * b, S_k)
                s = scale * (qf @ k[bi, hi, lo:hi_col].astype(np.float64).T)
                if km is not None:
                    s[:, ~km[bi, hi, lo:hi_col]] = -np.inf
                state.update(s, v[bi, hi, lo:hi_col])
            out[bi, hi] = state.finalize().astype(q.dtype)
    return out


def full_attention_backward(
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    scale: Optional[float] = None,
    do: Tensor4 = None,
    mask=None,
    row_chunk: int = 2048,
) -> GradBundle:
    """Analytic gradients of full_attention, recomputing P from (Q, K) per chunk.

    For P = softmax(scale * Q K^T):
      dV = P^T dO,  dS = P * (dO V^T - rowsum(P * (dO V^T))),
      dQ = scale * dS K,  dK = scale * dS^T Q.
    """
    q = ensure_tensor4(q, "Q")
    k = ensure_tensor4(k, "K")
    v = ensure_tensor4(v, "V")
    do = ensure_tensor4(do, "dO")
    B, H, S_q, D = q.shape
    if do.shape != (B, H, S_q, v.shape[3]):
        raise LayoutError(f"dO shape {do.shape} != output shape {(B, H, S_q, v.shape[3])}")
    if scale is None:
        scale = _default_scale(D)
    km = _key_mask(mask, B, H, k.shape[2])
    dq = np.zeros_like(q, dtype=np.float64)
    dk = np.zeros_like(k, dtype=np.float64)
    dv = np.zeros_like(v, dtype=np.float64)
    for bi in range(B):
        for hi in range(H):
            kf = k[bi, hi].astype(np.float64)
            vf = v[bi, hi].astype(np.float64)
            invalid = None if km is None else ~km[bi, hi]
            for lo in range(0, S_q, row_chunk):
                hi_row = min(lo + row_chunk, S_q)
                qf = q[bi, hi, lo:hi_row].astype(np.float64)
                dof = do[bi, hi, lo:hi_row].astype(np.float64)
                s = scale * (qf @ kf.T)
                if invalid is not None:
                    s[:, invalid] = -np.inf
                m = s.max(axis=1)
                if np.any(~np.isfinite(m)):
                    raise DegenerateRowError("query row with all keys masked")
                p = np.exp(s - m[:, None])
                if invalid is not None:
                    p[:, invalid] = 0.0
                p /= p.sum(axis=1)[:, None]
                g = dof @ vf.T
                ds = p * (g - np.sum(p * g, axis=1)[:, None])
                dq[bi, hi, lo:hi_row] = scale * (ds @ kf)
                dk[bi, hi] += scale * (ds.T @ qf)
                dv[bi, hi] += p.T @ dof
    return GradBundle(dq.astype(q.dtype), dk.astype(k.dtype), dv.astype(v.dtype))
