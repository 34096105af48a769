"""Quantitative verification: per-block Taylor error, the sharpness-based
error bound, sharpness-error correlation, and score/mass statistics over the
source/context quadrants of the attention matrix.

Notation used throughout: for query row i, z_i is the exact score row, z~_i
the surrogate row where every approximated key block's scores collapse to the
block-mean score, S_1 = softmax(z_i), S_2 = softmax(z~_i), and per query block
u: eps_u = E[||S_1 - S_2||^2], M_u = E[||S_2||^2], E2 = E[||dz||^2],
E4 = E[||dz||^4].
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .coarse import BlockMask
from .errors import ConfigError, InputError, LayoutError
from .tensor import BlockLayout, IclLayout, Tensor4, ensure_tensor4
from .util import softmax_rows


@dataclass
class ErrorReport:
    """Per-(batch, head, query block) error decomposition; bound filled in later."""

    eps: np.ndarray  # (B, H, T_q) mean ||S_1 - S_2||^2 over the block's rows
    sharpness: np.ndarray  # (B, H, T_q) mean ||S_2||^2
    e2: np.ndarray  # (B, H, T_q) mean ||dz||^2
    e4: np.ndarray  # (B, H, T_q) mean ||dz||^4
    bound: Optional[np.ndarray] = None


@dataclass
class BoundConstants:
    """Constants of the error bound: (M_u + L*delta) * E2 + C_H * E4.

    L is user-supplied or estimated (the projection-weight norms it formally
    derives from are unavailable here); delta is the block diameter; C_H caps
    the softmax Hessian entries.
    """

    lipschitz: float | np.ndarray = 0.0
    delta: float | np.ndarray = 0.0
    c_hessian: float = 1.0

    def validate(self):
        if (
            np.any(np.asarray(self.lipschitz) < 0)
            or self.c_hessian < 0
            or np.any(np.asarray(self.delta) < 0)
        ):
            raise ConfigError("bound constants must be non-negative")
        return self


@dataclass
class QuadrantStats:
    """Score and softmax-mass statistics for the four source/context slices.

    Keys: "src_src", "src_ctx", "ctx_src", "ctx_ctx". Each maps to a dict with
    mean/max/var. Mass statistics are per query row: the total softmax weight
    the row places on that key group.
    """

    scores: dict
    mass: dict


def taylor_error(
    q: Tensor4,
    k: Tensor4,
    layout: BlockLayout,
    mask: BlockMask,
    scale: Optional[float] = None,
) -> ErrorReport:
    """Compare exact and surrogate attention distributions block by block.

    The surrogate row replicates the mean-key score `valid_rows` times for
    every key block outside the mask, and keeps exact scores inside it.
    """
    q = ensure_tensor4(q, "Q")
    k = ensure_tensor4(k, "K")
    B, H, S_q, D = q.shape
    if k.shape[:2] != (B, H) or k.shape[3] != D:
        raise LayoutError(f"Q/K mismatch: {q.shape} vs {k.shape}")
    if layout.seq_len != k.shape[2]:
        raise LayoutError(f"layout.seq_len {layout.seq_len} != key length {k.shape[2]}")
    b = layout.block_size
    if S_q % b:
        raise LayoutError(f"query length {S_q} not divisible by block size {b}")
    if scale is None:
        scale = 1.0 / math.sqrt(D)
    t_q, t_k = S_q // b, layout.num_blocks
    if mask.num_key_blocks != t_k or mask.indices.shape[:3] != (B, H, t_q):
        raise LayoutError("mask inconsistent with layouts")
    member = mask.member_mask()  # (B, H, T_q, T_k)
    valid = layout.valid_rows
    S_k = layout.seq_len

    eps = np.zeros((B, H, t_q))
    sharp = np.zeros((B, H, t_q))
    e2 = np.zeros((B, H, t_q))
    e4 = np.zeros((B, H, t_q))
    block_of_col = np.repeat(np.arange(t_k), valid)
    for bi in range(B):
        for hi in range(H):
            kf = k[bi, hi].astype(np.float64)
            kc = np.stack([kf[j * b : j * b + valid[j]].mean(axis=0) for j in range(t_k)])
            for u in range(t_q):
                qu = q[bi, hi, u * b : (u + 1) * b].astype(np.float64)
                z = scale * (qu @ kf.T)  # (b, S_k) exact rows over valid keys
                zc = scale * (qu @ kc.T)  # (b, T_k) mean-key scores
                z_tilde = np.where(member[bi, hi, u][block_of_col], z, zc[:, block_of_col])
                dz = z - z_tilde
                s1 = softmax_rows(z)
                s2 = softmax_rows(z_tilde)
                eps[bi, hi, u] = np.mean(np.sum((s1 - s2) ** 2, axis=1))
                sharp[bi, hi, u] = np.mean(np.sum(s2 * s2, axis=1))
                nrm2 = np.sum(dz * dz, axis=1)
                e2[bi, hi, u] = np.mean(nrm2)
                e4[bi, hi, u] = np.mean(nrm2 * nrm2)
    return ErrorReport(eps=eps, sharpness=sharp, e2=e2, e4=e4)


def theorem_bound(report: ErrorReport, constants: BoundConstants) -> np.ndarray:
    """(M_u + L*delta) * E2 + C_H * E4, elementwise over the report's blocks."""
    constants.validate()
    lip = np.asarray(constants.lipschitz)
    bound = (report.sharpness + lip * np.asarray(constants.delta)) * report.e2
    bound = bound + constants.c_hessian * report.e4
    report.bound = bound
    return bound


theorem1_bound = theorem_bound


def block_diameters(q: Tensor4, layout_or_block_size) -> np.ndarray:
    """Max pairwise L2 distance among each block's query rows, (B,H,T_q)."""
    q = ensure_tensor4(q, "Q")
    b = (
        layout_or_block_size.block_size
        if isinstance(layout_or_block_size, BlockLayout)
        else int(layout_or_block_size)
    )
    B, H, S, D = q.shape
    if S % b:
        raise LayoutError(f"query length {S} not divisible by block size {b}")
    t = S // b
    blocks = q.reshape(B, H, t, b, D).astype(np.float64)
    diff = blocks[:, :, :, :, None, :] - blocks[:, :, :, None, :, :]
    return np.sqrt((diff**2).sum(axis=-1)).max(axis=(-2, -1))


def estimate_lipschitz(q: Tensor4, sharpness_rows: np.ndarray, block_size: int) -> np.ndarray:
    """Finite-difference slope surrogate for the Lipschitz constant of f(i) = ||S_2(i)||^2.

    sharpness_rows holds per-row ||S_2||^2 with shape (B,H,S_q); returns the
    max |f(i)-f(j)| / ||q_i-q_j|| over row pairs of each block, (B,H,T_q).
    """
    q = ensure_tensor4(q, "Q")
    B, H, S, D = q.shape
    b = block_size
    t = S // b
    f = np.asarray(sharpness_rows, dtype=np.float64).reshape(B, H, t, b)
    blocks = q.reshape(B, H, t, b, D).astype(np.float64)
    diff = blocks[:, :, :, :, None, :] - blocks[:, :, :, None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    df = np.abs(f[..., :, None] - f[..., None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(dist > 0, df / dist, 0.0)
    return slope.max(axis=(-2, -1))


def row_sharpness(
    q: Tensor4,
    k: Tensor4,
    layout: BlockLayout,
    mask: BlockMask,
    scale: Optional[float] = None,
) -> np.ndarray:
    """Per-row ||S_2||^2 (surrogate distribution energy), shape (B,H,S_q)."""
    q = ensure_tensor4(q, "Q")
    k = ensure_tensor4(k, "K")
    B, H, S_q, D = q.shape
    b = layout.block_size
    if scale is None:
        scale = 1.0 / math.sqrt(D)
    t_q, t_k = S_q // b, layout.num_blocks
    member = mask.member_mask()
    valid = layout.valid_rows
    block_of_col = np.repeat(np.arange(t_k), valid)
    out = np.zeros((B, H, S_q))
    for bi in range(B):
        for hi in range(H):
            kf = k[bi, hi].astype(np.float64)
            kc = np.stack([kf[j * b : j * b + valid[j]].mean(axis=0) for j in range(t_k)])
            for u in range(t_q):
                qu = q[bi, hi, u * b : (u + 1) * b].astype(np.float64)
                z = scale * (qu @ kf.T)
                zc = scale * (qu @ kc.T)
                z_tilde = np.where(member[bi, hi, u][block_of_col], z, zc[:, block_of_col])
                s2 = softmax_rows(z_tilde)
                out[bi, hi, u * b : (u + 1) * b] = np.sum(s2 * s2, axis=1)
    return out


@dataclass
class CorrelationReport:
    pearson_r: float
    spearman_rho: float
    binned_means: np.ndarray  # mean eps per sharpness quantile bin
    defined: bool = True


def sharpness_error_correlation(sharpness, eps, bins: int = 10) -> CorrelationReport:
    """Pearson/Spearman correlation of (M_u, eps_u) plus quantile-binned means of eps."""
    m = np.asarray(sharpness, dtype=np.float64).ravel()
    e = np.asarray(eps, dtype=np.float64).ravel()
    if m.size != e.size or m.size < 10:
        raise InputError(f"need >= 10 paired samples, got {m.size}/{e.size}")
    if np.ptp(m) == 0.0:
        return CorrelationReport(math.nan, math.nan, np.full(bins, math.nan), defined=False)
    pearson = stats.pearsonr(m, e).statistic
    spearman = stats.spearmanr(m, e).statistic
    edges = np.quantile(m, np.linspace(0, 1, bins + 1))
    edges[-1] = np.nextafter(edges[-1], np.inf)
    which = np.clip(np.searchsorted(edges, m, side="right") - 1, 0, bins - 1)
    binned = np.array([e[which == i].mean() if np.any(which == i) else math.nan for i in range(bins)])
    return CorrelationReport(float(pearson), float(spearman), binned)


def quadrant_stats(
    q: Tensor4,
    k: Tensor4,
    icl: IclLayout,
    scale: Optional[float] = None,
) -> QuadrantStats:
    """Score and softmax-mass statistics over the four source/context slices."""
    q = ensure_tensor4(q, "Q")
    k = ensure_tensor4(k, "K")
    if icl.l_ctx < 1:
        raise LayoutError("quadrant statistics need at least one context token")
    B, H, S, D = q.shape
    if k.shape != q.shape or S != icl.total:
        raise LayoutError(f"Q/K/icl mismatch: {q.shape}, {k.shape}, total={icl.total}")
    if scale is None:
        scale = 1.0 / math.sqrt(D)
    ls = icl.l_src
    scores = {key: [] for key in ("src_src", "src_ctx", "ctx_src", "ctx_ctx")}
    mass = {key: [] for key in scores}
    for bi in range(B):
        for hi in range(H):
            s = scale * (q[bi, hi].astype(np.float64) @ k[bi, hi].astype(np.float64).T)
            p = softmax_rows(s)
            scores["src_src"].append(s[:ls, :ls].ravel())
            scores["src_ctx"].append(s[:ls, ls:].ravel())
            scores["ctx_src"].append(s[ls:, :ls].ravel())
            scores["ctx_ctx"].append(s[ls:, ls:].ravel())
            mass["src_src"].append(p[:ls, :ls].sum(axis=1))
            mass["src_ctx"].append(p[:ls, ls:].sum(axis=1))
            mass["ctx_src"].append(p[ls:, :ls].sum(axis=1))
            mass["ctx_ctx"].append(p[ls:, ls:].sum(axis=1))

    def _stats(chunks):
        x = np.concatenate(chunks)
        return {"mean": float(x.mean()), "max": float(x.max()), "var": float(x.var())}

    return QuadrantStats(
        scores={key: _stats(val) for key, val in scores.items()},
        mass={key: _stats(val) for key, val in mass.items()},
    )


def report_to_csv(report: ErrorReport, path) -> None:
    """One CSV row per (batch, head, block): M_u, eps_u, E2, E4, bound, slack."""
    bound = report.bound
    B, H, T = report.eps.shape
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["b", "h", "block", "M_u", "eps_u", "E2", "E4", "bound", "slack"])
        for bi in range(B):
            for hi in range(H):
                for u in range(T):
                    bval = math.nan if bound is None else float(bound[bi, hi, u])
                    slack = math.nan if bound is None else bval - float(report.eps[bi, hi, u])
                    w.writerow(
                        [
                            bi,
                            hi,
                            u,
                            float(report.sharpness[bi, hi, u]),
                            float(report.eps[bi, hi, u]),
                            float(report.e2[bi, hi, u]),
                            float(report.e4[bi, hi, u]),
                            bval,
                            slack,
                        ]
                    )
