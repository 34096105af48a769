"""Block-wise 0th-order Taylor sparse attention.

Per query block, key blocks on the exact list get full online-softmax
updates; every other block is approximated by a single mean-key score whose
exponential is weighted by the block's valid-row count and paired with the
block's mean value row. One (m, ell, O) state spans both kinds of visit, so
the result equals a direct softmax over the surrogate score row in which
each approximated block appears as `valid_rows` copies of its mean score.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .coarse import BlockMask
from .errors import ContractError, LayoutError
from .reference import GradBundle, OnlineState
from .tensor import Tensor4, ensure_tensor4


@dataclass
class FlopCount:
    """Multiply-add tallies, split by branch, plus the all-exact equivalent."""

    exact_mas: int = 0
    taylor_mas: int = 0
    overhead_mas: int = 0
    dense_equivalent_mas: int = 0

    def total(self) -> int:
        return self.exact_mas + self.taylor_mas + self.overhead_mas

    def to_text(self) -> str:
        return (
            f"exact_mas={self.exact_mas}\n"
            f"taylor_mas={self.taylor_mas}\n"
            f"overhead_mas={self.overhead_mas}\n"
            f"dense_equivalent_mas={self.dense_equivalent_mas}\n"
        )


@dataclass
class TaylorKernelInput:
    """Everything the kernel consumes. kc/vc must be the valid-row block means
    of k_new/v_new; key_valid_rows (B,H,T_k) counts valid rows per key block
    (None = all blocks full)."""

    q: Tensor4
    k_new: Tensor4
    v_new: Tensor4
    kc: Tensor4
    vc: Tensor4
    mask: BlockMask
    scale: float
    block_size: int
    key_valid_rows: Optional[np.ndarray] = None

    def validated(self) -> "TaylorKernelInput":
        q = ensure_tensor4(self.q, "Q")
        k = ensure_tensor4(self.k_new, "K_new")
        v = ensure_tensor4(self.v_new, "V_new")
        b = self.block_size
        B, H, S_q, D = q.shape
        if S_q % b:
            raise LayoutError(f"query length {S_q} not divisible by block size {b}")
        if k.shape[2] % b:
            raise LayoutError(f"key length {k.shape[2]} not divisible by block size {b}")
        if k.shape[:2] != (B, H) or k.shape[3] != D or v.shape != k.shape:
            raise LayoutError(f"Q/K_new/V_new mismatch: {q.shape}, {k.shape}, {v.shape}")
        t_q, t_k = S_q // b, k.shape[2] // b
        if self.kc.shape != (B, H, t_k, D) or self.vc.shape != (B, H, t_k, D):
            raise LayoutError(f"kc/vc must have shape (B,H,{t_k},{D})")
        idx = self.mask.indices
        if idx.ndim != 4 or idx.shape[:3] != (B, H, t_q):
            raise LayoutError(f"mask indices shape {idx.shape} != (B,H,{t_q},k)")
        if idx.shape[3] < 1:
            raise ContractError("every query block needs at least one exact key block")
        if self.mask.num_key_blocks != t_k or idx.max(initial=0) >= t_k or idx.min(initial=0) < 0:
            raise ContractError(f"mask indices out of range for {t_k} key blocks")
        if idx.shape[3] > 1 and np.any(np.diff(idx, axis=3) <= 0):
            raise ContractError("mask index lists must be sorted ascending without duplicates")
        if self.key_valid_rows is not None:
            w = np.asarray(self.key_valid_rows, dtype=np.int64)
            if w.shape != (B, H, t_k):
                raise LayoutError(f"key_valid_rows shape {w.shape} != (B,H,{t_k})")
            if w.min() < 1 or w.max() > b:
                raise LayoutError(f"key_valid_rows must lie in [1, {b}]")
        if self.scale <= 0:
            raise LayoutError(f"scale must be > 0, got {self.scale}")
        if __debug__:
            self._check_means()
        return self

    def _check_means(self):
        w = self._weights()
        kb = self.k_new.reshape(*self.kc.shape[:3], self.block_size, -1).astype(np.float64)
        valid = np.arange(self.block_size) < w[..., None]
        means = (kb * valid[..., None]).sum(axis=3) / w[..., None]
        if not np.allclose(means, self.kc.astype(np.float64), rtol=1e-4, atol=1e-5):
            raise ContractError("kc is not the valid-row block mean of k_new")

    def _weights(self) -> np.ndarray:
        B, H, t_k = self.kc.shape[:3]
        if self.key_valid_rows is None:
            return np.full((B, H, t_k), self.block_size, dtype=np.int64)
        return np.asarray(self.key_valid_rows, dtype=np.int64)


def _guarded_alpha(m_old: np.ndarray, m_new: np.ndarray) -> np.ndarray:
    delta = m_old - m_new
    delta[~np.isfinite(delta)] = 0.0
    return np.exp(delta)


def _masked_exp(scores: np.ndarray, m_new: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        p = np.exp(scores - m_new[..., None])
    return np.where(np.isfinite(scores), p, 0.0)


def _head_state(q, k, v, kc, vc, idx, w, scale, b):
    """Run the online pass for one (batch, head); returns final (m, ell, o_acc).

    Exact blocks are visited in ascending index order (slot-by-slot across all
    query blocks), then all Taylor blocks fold in as one batched update.
    """
    t_q, t_k = q.shape[0] // b, k.shape[0] // b
    d = q.shape[1]
    qb = q.reshape(t_q, b, d)
    kb = k.reshape(t_k, b, d)
    vb = v.reshape(t_k, b, d)
    col_valid = np.arange(b) < w[:, None]
    member = np.zeros((t_q, t_k), dtype=bool)
    np.put_along_axis(member, idx, True, axis=1)

    m = np.full((t_q, b), -np.inf)
    ell = np.zeros((t_q, b))
    acc = np.zeros((t_q, b, d))
    for slot in range(idx.shape[1]):
        j = idx[:, slot]
        s = scale * np.matmul(qb, kb[j].transpose(0, 2, 1))
        s = np.where(col_valid[j][:, None, :], s, -np.inf)
        m_new = np.maximum(m, s.max(axis=2))
        p = _masked_exp(s, m_new)
        alpha = _guarded_alpha(m, m_new)
        ell = ell * alpha + p.sum(axis=2)
        acc = acc * alpha[..., None] + np.matmul(p, vb[j])
        m = m_new

    s_c = scale * (qb @ kc.T)
    s_c = np.where(member[:, None, :], -np.inf, s_c)
    m_new = np.maximum(m, s_c.max(axis=2, initial=-np.inf))
    pe = _masked_exp(s_c, m_new) * w
    alpha = _guarded_alpha(m, m_new)
    ell = ell * alpha + pe.sum(axis=2)
    acc = acc * alpha[..., None] + pe @ vc
    return m_new, ell, acc


def taylor_sparse_forward(inp: TaylorKernelInput, visit_rng: Optional[np.random.Generator] = None) -> Tensor4:
    """Forward pass; finalizes O = acc / ell per row.

    visit_rng (testing hook) shuffles the per-query-block visiting order of
    exact and Taylor blocks; results must agree with the default ascending
    order to floating-point reordering error.
    """
    inp = inp.validated()
    q = inp.q
    B, H, S_q, D = q.shape
    out = np.empty((B, H, S_q, inp.v_new.shape[3]), dtype=q.dtype)
    b = inp.block_size
    weights = inp._weights()
    for bi in range(B):
        for hi in range(H):
            args = (
                q[bi, hi].astype(np.float64),
                inp.k_new[bi, hi].astype(np.float64),
                inp.v_new[bi, hi].astype(np.float64),
                inp.kc[bi, hi].astype(np.float64),
                inp.vc[bi, hi].astype(np.float64),
                inp.mask.indices[bi, hi],
                weights[bi, hi],
                inp.scale,
                b,
            )
            if visit_rng is None:
                _, ell, acc = _head_state(*args)
            else:
                ell, acc = _head_state_shuffled(*args, rng=visit_rng)
            out[bi, hi] = (acc / ell[..., None]).reshape(S_q, -1).astype(q.dtype)
    return out


def _head_state_shuffled(q, k, v, kc, vc, idx, w, scale, b, rng):
    """Per-visit online loop with randomized visit order (test path)."""
    t_q, t_k = q.shape[0] // b, k.shape[0] // b
    d = q.shape[1]
    qb = q.reshape(t_q, b, d)
    kb = k.reshape(t_k, b, d)
    vb = v.reshape(t_k, b, d)
    col_valid = np.arange(b) < w[:, None]
    ell = np.zeros((t_q, b))
    acc = np.zeros((t_q, b, d))
    for qi in range(t_q):
        exact = set(idx[qi].tolist())
        visits = [("e", j) for j in sorted(exact)] + [("t", j) for j in range(t_k) if j not in exact]
        rng.shuffle(visits)
        state = OnlineState(b, d)
        for kind, j in visits:
            if kind == "e":
                s = scale * (qb[qi] @ kb[j].T)
                s[:, ~col_valid[j]] = -np.inf
                state.update(s, vb[j])
            else:
                s = scale * (qb[qi] @ kc[j])[:, None]
                state.update(s, vc[j][None, :], weights=float(w[j]))
        acc[qi] = state.o_acc
        ell[qi] = state.ell
    return ell, acc


def taylor_sparse_backward(inp: TaylorKernelInput, do: Tensor4) -> GradBundle:
    """Gradients of the exact forward map, recomputed from (Q, K_new, kc, mask).

    Exact-branch gradients are the standard softmax-attention ones; the Taylor
    branch routes gradients to Q directly and to K_new/V_new through the block
    means (each valid row receives 1/valid_rows of the mean's gradient).
    """
    inp = inp.validated()
    do = ensure_tensor4(do, "dO")
    q = inp.q
    B, H, S_q, D = q.shape
    if do.shape != (B, H, S_q, inp.v_new.shape[3]):
        raise LayoutError(f"dO shape {do.shape} != output shape")
    dq = np.zeros((B, H, S_q, D))
    dk = np.zeros(inp.k_new.shape)
    dv = np.zeros(inp.v_new.shape)
    b = inp.block_size
    weights = inp._weights()
    scale = inp.scale
    for bi in range(B):
        for hi in range(H):
            qf = q[bi, hi].astype(np.float64)
            kf = inp.k_new[bi, hi].astype(np.float64)
            vf = inp.v_new[bi, hi].astype(np.float64)
            kcf = inp.kc[bi, hi].astype(np.float64)
            vcf = inp.vc[bi, hi].astype(np.float64)
            idx = inp.mask.indices[bi, hi]
            w = weights[bi, hi]
            t_q, t_k = S_q // b, kf.shape[0] // b
            m, ell, acc = _head_state(qf, kf, vf, kcf, vcf, idx, w, scale, b)
            o = acc / ell[..., None]

            qb = qf.reshape(t_q, b, D)
            kb = kf.reshape(t_k, b, D)
            vb = vf.reshape(t_k, b, D)
            dob = do[bi, hi].astype(np.float64).reshape(t_q, b, -1)
            rho = (dob * o).sum(axis=2)
            col_valid = np.arange(b) < w[:, None]
            member = np.zeros((t_q, t_k), dtype=bool)
            np.put_along_axis(member, idx, True, axis=1)

            dqb = np.zeros((t_q, b, D))
            dkb = np.zeros((t_k, b, D))
            dvb = np.zeros((t_k, b, D))
            for slot in range(idx.shape[1]):
                j = idx[:, slot]
                s = scale * np.matmul(qb, kb[j].transpose(0, 2, 1))
                s = np.where(col_valid[j][:, None, :], s, -np.inf)
                p = _masked_exp(s, m) / ell[..., None]
                g = np.matmul(dob, vb[j].transpose(0, 2, 1))
                ds = p * (g - rho[..., None])
                dqb += scale * np.matmul(ds, kb[j])
                np.add.at(dkb, j, scale * np.matmul(ds.transpose(0, 2, 1), qb))
                np.add.at(dvb, j, np.matmul(p.transpose(0, 2, 1), dob))

            s_c = scale * (qb @ kcf.T)
            s_c = np.where(member[:, None, :], -np.inf, s_c)
            p_c = _masked_exp(s_c, m) / ell[..., None]
            big_w = p_c * w
            g_c = dob @ vcf.T
            ds_c = big_w * (g_c - rho[..., None])
            dqb += scale * (ds_c @ kcf)
            dkc = scale * np.einsum("qrt,qrd->td", ds_c, qb)
            dvc = np.einsum("qrt,qrd->td", big_w, dob)
            # block-mean adjoint: spread over valid rows
            dkb += np.where(col_valid[..., None], (dkc / w[:, None])[:, None, :], 0.0)
            dvb += np.where(col_valid[..., None], (dvc / w[:, None])[:, None, :], 0.0)

            dq[bi, hi] = dqb.reshape(S_q, D)
            dk[bi, hi] = dkb.reshape(t_k * b, D)
            dv[bi, hi] = dvb.reshape(t_k * b, D)
    return GradBundle(dq.astype(q.dtype), dk.astype(inp.k_new.dtype), dv.astype(inp.v_new.dtype))


def flop_count(inp: TaylorKernelInput) -> FlopCount:
    """Multiply-add tallies implied by the mask: per block pair, the exact branch
    costs 2*b*b*D (scores) + 2*b*b*D (PV); the Taylor branch 2*b*D + 2*b*D."""
    B, H, S_q, D = inp.q.shape
    b = inp.block_size
    t_q = S_q // b
    t_k = inp.k_new.shape[2] // b
    k = inp.mask.indices.shape[3]
    pairs_exact = B * H * t_q * k
    pairs_taylor = B * H * t_q * (t_k - k)
    exact_per_pair = 2 * b * b * D + 2 * b * b * D
    taylor_per_pair = 2 * b * D + 2 * b * D
    return FlopCount(
        exact_mas=pairs_exact * exact_per_pair,
        taylor_mas=pairs_taylor * taylor_per_pair,
        overhead_mas=0,
        dense_equivalent_mas=B * H * t_q * t_k * exact_per_pair,
    )
