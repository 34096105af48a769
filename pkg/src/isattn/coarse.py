"""Pooling attention and everything derived from it: coarse scores, context
ranking, the exact-block mask for the Taylor kernel, and sharpness-based
query splitting.

All selections are per (batch, head); every tie breaks toward the lowest
block index so results are identical across runs and thread counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, LayoutError
from .tensor import BlockLayout, IclLayout, Tensor4, block_mean
from .util import softmax_rows


@dataclass
class CoarseSet:
    """Pooled Q/K/V (one row per block) and the scaled block-level score matrix."""

    qc: Tensor4
    kc: Tensor4
    vc: Tensor4
    s_coarse: np.ndarray  # (B, H, N_Q, N_K), float64
    block_size: int
    scale_applied: bool = True

    @property
    def num_query_blocks(self) -> int:
        return self.qc.shape[2]

    @property
    def num_key_blocks(self) -> int:
        return self.kc.shape[2]

    def summary(self) -> dict:
        s = self.s_coarse
        return {
            "query_blocks": self.num_query_blocks,
            "key_blocks": self.num_key_blocks,
            "score_min": float(s.min()),
            "score_max": float(s.max()),
            "score_mean": float(s.mean()),
        }


@dataclass
class SelectionIndex:
    """Retained context block indices, sorted ascending per (batch, head)."""

    indices: np.ndarray  # (B, H, k_ctx) int64
    num_context_blocks: int

    @property
    def k_ctx(self) -> int:
        return self.indices.shape[2]

    def to_text(self) -> str:
        lines = []
        B, H, _ = self.indices.shape
        for bi in range(B):
            for hi in range(H):
                lines.append(f"b={bi} h={hi}: {self.indices[bi, hi].tolist()}")
        return "\n".join(lines)


@dataclass
class BlockMask:
    """Per query block: the key blocks the Taylor kernel computes exactly."""

    indices: np.ndarray  # (B, H, N_Q, k) int64, sorted ascending per row
    num_key_blocks: int

    @property
    def k(self) -> int:
        return self.indices.shape[3]

    def member_mask(self) -> np.ndarray:
        """Boolean (B, H, N_Q, N_K): True where the key block is exact."""
        B, H, N_Q, _ = self.indices.shape
        m = np.zeros((B, H, N_Q, self.num_key_blocks), dtype=bool)
        np.put_along_axis(m, self.indices, True, axis=3)
        return m


@dataclass
class SharpnessSplit:
    """Sharp/flat partition of query blocks plus the sharpness values behind it."""

    sharp: np.ndarray  # (B, H, n_sharp) int64, sorted ascending
    flat: np.ndarray  # (B, H, n_flat) int64, sorted ascending
    sharpness: np.ndarray  # (B, H, T_q) float64

    def to_text(self) -> str:
        lines = []
        B, H, _ = self.sharp.shape
        for bi in range(B):
            for hi in range(H):
                lines.append(
                    f"b={bi} h={hi}: sharp={self.sharp[bi, hi].tolist()} flat={self.flat[bi, hi].tolist()}"
                )
        return "\n".join(lines)


def build_coarse(
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    q_layout: BlockLayout,
    k_layout: BlockLayout,
    scale: Optional[float] = None,
) -> CoarseSet:
    """Compress Q/K/V to block means and score every (query block, key block) pair."""
    if q_layout.block_size != k_layout.block_size:
        raise LayoutError("query and key layouts must share one block size")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[3])
    qc = block_mean(q, q_layout)
    kc = block_mean(k, k_layout)
    vc = block_mean(v, k_layout)
    s = scale * np.einsum("bhid,bhjd->bhij", qc.astype(np.float64), kc.astype(np.float64))
    return CoarseSet(qc=qc, kc=kc, vc=vc, s_coarse=s, block_size=q_layout.block_size)


def _topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, ties to the lowest
    index, returned sorted ascending."""
    if k == 0:
        return np.zeros(scores.shape[:-1] + (0,), dtype=np.int64)
    order = np.argsort(-scores, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1).astype(np.int64)


def rank_context(cs: CoarseSet, icl: IclLayout, alpha_s: float) -> SelectionIndex:
    """Rank context key blocks by their mean coarse score over source query blocks
    and keep the top floor(alpha_s * ceil(L_ctx / b))."""
    if not 0.0 <= alpha_s <= 1.0:
        raise ConfigError(f"alpha_s must be in [0, 1], got {alpha_s}")
    b = cs.block_size
    n_src = -(-icl.l_src // b)
    n_ctx = -(-icl.l_ctx // b) if icl.l_ctx else 0
    if n_src + n_ctx != cs.num_key_blocks or n_src > cs.num_query_blocks:
        raise LayoutError(
            f"icl layout ({icl.l_src}, {icl.l_ctx}) inconsistent with coarse blocks "
            f"({cs.num_query_blocks} x {cs.num_key_blocks}, b={b})"
        )
    B, H = cs.s_coarse.shape[:2]
    if n_ctx == 0:
        return SelectionIndex(indices=np.zeros((B, H, 0), dtype=np.int64), num_context_blocks=0)
    ctx_scores = cs.s_coarse[:, :, :n_src, n_src:].mean(axis=2)
    k_ctx = int(math.floor(alpha_s * n_ctx))
    return SelectionIndex(indices=_topk_rows(ctx_scores, k_ctx), num_context_blocks=n_ctx)


def build_block_mask(cs: CoarseSet, alpha_ns: float) -> BlockMask:
    """Top-k exact key blocks per query block; k = floor(alpha_ns * N_K), at least 1.

    The CoarseSet must already be restricted to the kernel's own key tensor
    (block means recomputed after context selection).
    """
    if not 0.0 < alpha_ns <= 1.0:
        raise ConfigError(f"alpha_ns must be in (0, 1], got {alpha_ns}")
    n_k = cs.num_key_blocks
    k = min(n_k, max(1, int(math.floor(alpha_ns * n_k))))
    return BlockMask(indices=_topk_rows(cs.s_coarse, k), num_key_blocks=n_k)


def sharpness_split(
    cs: CoarseSet,
    icl: IclLayout,
    alpha_f: float,
    softmax_first: bool = True,
) -> SharpnessSplit:
    """Split query blocks into sharp (exact attention) and flat (Taylor kernel).

    Sharpness of a query block is the variance of its coarse scores over the
    source-key blocks, after a row softmax over that slice when softmax_first
    (the attention-distribution variant); raw-score variance otherwise. The
    floor(alpha_f * T_q) least-sharp blocks go flat; boundary ties keep the
    lower block index on the sharp side.
    """
    if not 0.0 <= alpha_f <= 1.0:
        raise ConfigError(f"alpha_f must be in [0, 1], got {alpha_f}")
    b = cs.block_size
    n_src = -(-icl.l_src // b)
    if n_src < 1 or n_src > cs.num_key_blocks:
        raise LayoutError(f"source block count {n_src} out of range for coarse set")
    src_slice = cs.s_coarse[:, :, :, :n_src]
    rows = softmax_rows(src_slice) if softmax_first else src_slice
    m = rows.var(axis=-1)
    B, H, T_q = m.shape
    n_flat = int(math.floor(alpha_f * T_q))
    order = np.argsort(-m, axis=-1, kind="stable")
    sharp = np.sort(order[..., : T_q - n_flat], axis=-1).astype(np.int64)
    flat = np.sort(order[..., T_q - n_flat :], axis=-1).astype(np.int64)
    return SharpnessSplit(sharp=sharp, flat=flat, sharpness=m)
