"""Five-stage in-context sparse attention pipeline.

Stage 1 compresses Q/K/V to block means and scores blocks coarsely; stage 2
ranks and keeps the top context key/value blocks; stage 3 splits query blocks
by sharpness; stage 4 runs exact online-softmax attention for sharp queries
and the Taylor kernel for flat ones, both against the compacted keys; stage 5
scatters the pieces back, optionally adds the coarse residual, and trims
padding.

Source and context segments are padded to the block size independently, so no
block ever straddles the source/context boundary. Routing (selection, split,
mask) is discrete; the backward pass treats it as a constant of the forward
run.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coarse import (
    BlockMask,
    CoarseSet,
    SelectionIndex,
    SharpnessSplit,
    build_block_mask,
    rank_context,
    sharpness_split,
)
from .errors import ConfigError, LayoutError
from .reference import GradBundle, full_attention_backward, online_softmax_attention
from .tensor import (
    DTYPES,
    BlockLayout,
    IclLayout,
    Tensor4,
    block_mean,
    ensure_tensor4,
    gather_blocks,
    pad_to_blocks,
    scatter_blocks,
)
from .taylor import FlopCount, TaylorKernelInput, flop_count, taylor_sparse_backward, taylor_sparse_forward
from .util import softmax_rows


@dataclass
class IsaConfig:
    """Sparsity knobs and behavioral flags.

    alpha_s: fraction of context key blocks kept by pre-selection.
    alpha_ns: fraction of key blocks the Taylor kernel computes exactly.
    alpha_f: fraction of query blocks routed to the Taylor kernel.
    gamma: coarse-residual weight (0 disables the residual entirely).
    """

    alpha_s: float = 0.125
    alpha_ns: float = 0.0625
    alpha_f: float = 0.5
    gamma: float = 0.0
    block_size: int = 64
    scale: Optional[float] = None
    softmax_first: bool = True
    residual_softmax: bool = True
    deterministic: bool = True  # visits are always ascending; flag kept for interface parity
    precision: str = "single"
    strict: bool = True

    def validate(self) -> "IsaConfig":
        if not 0.0 <= self.alpha_s <= 1.0:
            raise ConfigError(f"alpha_s must be in [0, 1], got {self.alpha_s}")
        if not 0.0 < self.alpha_ns <= 1.0:
            raise ConfigError(f"alpha_ns must be in (0, 1], got {self.alpha_ns}")
        if not 0.0 <= self.alpha_f <= 1.0:
            raise ConfigError(f"alpha_f must be in [0, 1], got {self.alpha_f}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if self.scale is not None and self.scale <= 0.0:
            raise ConfigError(f"scale must be > 0, got {self.scale}")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}, got {self.precision!r}")
        return self


@dataclass
class IsaRouting:
    """The discrete decisions of one forward run; constants for the backward pass."""

    selection: SelectionIndex
    split: SharpnessSplit
    mask: Optional[BlockMask]  # None when no query block is flat


@dataclass
class IsaTrace:
    coarse_summary: dict
    selection: SelectionIndex
    split: SharpnessSplit
    mask: Optional[BlockMask]
    flops: FlopCount
    stage_times_us: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["isa_trace:"]
        lines.append("  coarse:")
        for key, val in self.coarse_summary.items():
            lines.append(f"    {key}: {val}")
        lines.append("  selection:")
        lines.append(f"    k_ctx: {self.selection.k_ctx}")
        for row in self.selection.to_text().splitlines():
            lines.append(f"    {row}")
        lines.append("  split:")
        for row in self.split.to_text().splitlines():
            lines.append(f"    {row}")
        lines.append("  mask:")
        lines.append(f"    k: {0 if self.mask is None else self.mask.k}")
        lines.append("  flops:")
        for row in self.flops.to_text().strip().splitlines():
            key, val = row.split("=", 1)
            lines.append(f"    {key}: {val}")
        lines.append("  stage_times_us:")
        for key, val in self.stage_times_us.items():
            lines.append(f"    {key}: {val:.1f}")
        return "\n".join(lines) + "\n"


class _Assembly:
    """Shared stage-1..3 state for forward and backward."""

    def __init__(self, q, k, v, icl, cfg, routing=None):
        cfg.validate()
        q = ensure_tensor4(q, "Q")
        k = ensure_tensor4(k, "K")
        v = ensure_tensor4(v, "V")
        if not (q.shape == k.shape == v.shape):
            raise LayoutError(f"Q/K/V must share one shape, got {q.shape}, {k.shape}, {v.shape}")
        if q.shape[2] != icl.total:
            raise LayoutError(f"sequence length {q.shape[2]} != icl total {icl.total}")
        b = cfg.block_size
        if cfg.strict and (icl.l_src % b or icl.l_ctx % b):
            raise ConfigError(
                f"strict mode requires L_src and L_ctx divisible by b={b}, got ({icl.l_src}, {icl.l_ctx})"
            )
        dtype = DTYPES[cfg.precision]
        self.q, self.k, self.v = (x.astype(dtype, copy=False) for x in (q, k, v))
        self.icl = icl
        self.cfg = cfg
        self.scale = cfg.scale if cfg.scale is not None else 1.0 / math.sqrt(q.shape[3])
        self.times: dict = {}

        t0 = time.perf_counter()
        self.src_layout = BlockLayout(b, icl.l_src)
        self.ctx_layout = BlockLayout(b, icl.l_ctx) if icl.l_ctx else None
        self.t_src = self.src_layout.num_blocks
        self.t_ctx = self.ctx_layout.num_blocks if self.ctx_layout else 0
        self.t_all = self.t_src + self.t_ctx
        self.qp = self._pad(self.q)
        self.kp = self._pad(self.k)
        self.vp = self._pad(self.v)
        self.padded_layout = BlockLayout(b, self.qp.shape[2])
        # original-row positions inside the padded sequence, for trimming
        self.orig_rows = np.concatenate(
            [np.arange(icl.l_src), self.t_src * b + np.arange(icl.l_ctx)]
        ).astype(np.int64)
        self.seg_valid = np.concatenate(
            [self.src_layout.valid_rows]
            + ([self.ctx_layout.valid_rows] if self.ctx_layout else [])
        )

        # stage 1: coarse scores (and the optional residual's raw ingredients)
        self.qc = self._icl_means(self.q)
        self.kc = self._icl_means(self.k)
        self.vc = self._icl_means(self.v)
        s_coarse = self.scale * np.einsum(
            "bhid,bhjd->bhij", self.qc.astype(np.float64), self.kc.astype(np.float64)
        )
        self.cs = CoarseSet(self.qc, self.kc, self.vc, s_coarse, block_size=b)
        self.times["coarse"] = (time.perf_counter() - t0) * 1e6

        # stage 2: context selection and compacted K/V
        t0 = time.perf_counter()
        self.sel = routing.selection if routing else rank_context(self.cs, icl, cfg.alpha_s)
        kp_ctx = self.kp[:, :, self.t_src * b :]
        vp_ctx = self.vp[:, :, self.t_src * b :]
        if self.t_ctx and self.sel.k_ctx:
            k_sel = gather_blocks(kp_ctx, self.ctx_layout, self.sel.indices)
            v_sel = gather_blocks(vp_ctx, self.ctx_layout, self.sel.indices)
            self.k_new = np.concatenate([self.kp[:, :, : self.t_src * b], k_sel], axis=2)
            self.v_new = np.concatenate([self.vp[:, :, : self.t_src * b], v_sel], axis=2)
        else:
            self.k_new = self.kp[:, :, : self.t_src * b]
            self.v_new = self.vp[:, :, : self.t_src * b]
        B, H = q.shape[:2]
        self.t_new = self.t_src + self.sel.k_ctx
        src_valid = np.broadcast_to(self.src_layout.valid_rows, (B, H, self.t_src))
        if self.sel.k_ctx:
            ctx_valid = self.ctx_layout.valid_rows[self.sel.indices]
            self.valid_new = np.concatenate([src_valid, ctx_valid], axis=2)
        else:
            self.valid_new = src_valid.copy()
        self.key_mask_new = (
            np.arange(b)[None, None, None, :] < self.valid_new[..., None]
        ).reshape(B, H, self.t_new * b)
        self.kc_new = _masked_block_means(self.k_new, self.valid_new, b)
        self.vc_new = _masked_block_means(self.v_new, self.valid_new, b)
        self.times["select"] = (time.perf_counter() - t0) * 1e6

        # stage 3: sharpness split and the flat branch's exact-block mask
        t0 = time.perf_counter()
        self.split = routing.split if routing else sharpness_split(self.cs, icl, cfg.alpha_f, cfg.softmax_first)
        self.n_flat = self.split.flat.shape[2]
        self.n_sharp = self.split.sharp.shape[2]
        if self.n_flat:
            qc_flat = np.take_along_axis(self.qc, self.split.flat[..., None], axis=2)
            s_flat = self.scale * np.einsum(
                "bhid,bhjd->bhij", qc_flat.astype(np.float64), self.kc_new.astype(np.float64)
            )
            cs_flat = CoarseSet(qc_flat, self.kc_new, self.vc_new, s_flat, block_size=b)
            self.mask = routing.mask if routing else build_block_mask(cs_flat, cfg.alpha_ns)
        else:
            self.mask = routing.mask if routing else None
        self.times["split"] = (time.perf_counter() - t0) * 1e6

    def _pad(self, x):
        icl, b = self.icl, self.cfg.block_size
        src = pad_to_blocks(x[:, :, : icl.l_src], self.src_layout)
        if not self.ctx_layout:
            return src
        ctx = pad_to_blocks(x[:, :, icl.l_src :], self.ctx_layout)
        return np.concatenate([src, ctx], axis=2)

    def _icl_means(self, x):
        icl = self.icl
        parts = [block_mean(x[:, :, : icl.l_src], self.src_layout)]
        if self.ctx_layout:
            parts.append(block_mean(x[:, :, icl.l_src :], self.ctx_layout))
        return np.concatenate(parts, axis=2)

    def routing(self) -> IsaRouting:
        return IsaRouting(selection=self.sel, split=self.split, mask=self.mask)

    def kernel_input(self, q_flat) -> TaylorKernelInput:
        return TaylorKernelInput(
            q=q_flat,
            k_new=self.k_new,
            v_new=self.v_new,
            kc=self.kc_new,
            vc=self.vc_new,
            mask=self.mask,
            scale=self.scale,
            block_size=self.cfg.block_size,
            key_valid_rows=self.valid_new,
        )

    def coarse_residual(self) -> np.ndarray:
        """O_coarse, one row per query block, float64."""
        if self.cfg.residual_softmax:
            p = softmax_rows(self.cs.s_coarse)
        else:
            p = self.cs.s_coarse / self.scale  # raw, unscaled scores
        return p @ self.vc.astype(np.float64)

    def pipeline_flops(self) -> FlopCount:
        B, H, _, D = self.q.shape
        b = self.cfg.block_size
        per_exact_pair = 4 * b * b * D
        kernel = (
            flop_count(self.kernel_input(np.zeros((B, H, self.n_flat * b, D), dtype=self.q.dtype)))
            if self.n_flat
            else FlopCount()
        )
        sharp_mas = B * H * self.n_sharp * self.t_new * per_exact_pair
        overhead = 2 * B * H * self.t_all * self.t_all * D  # coarse scoring
        if self.n_flat:
            overhead += 2 * B * H * self.n_flat * self.t_new * D  # mask scores
        if self.cfg.gamma:
            overhead += 2 * B * H * self.t_all * self.t_all * D  # residual P V^c
        return FlopCount(
            exact_mas=kernel.exact_mas + sharp_mas,
            taylor_mas=kernel.taylor_mas,
            overhead_mas=overhead,
            dense_equivalent_mas=B * H * self.t_all * self.t_all * per_exact_pair,
        )


def _masked_block_means(x, valid, b):
    """Per-block means with per-(B,H,block) valid-row counts."""
    B, H, S, D = x.shape
    t = S // b
    blocks = x.reshape(B, H, t, b, D).astype(np.float64)
    keep = np.arange(b)[None, None, None, :] < valid[..., None]
    means = (blocks * keep[..., None]).sum(axis=3) / valid[..., None]
    return means.astype(x.dtype)


def isa_routing(q: Tensor4, k: Tensor4, v: Tensor4, icl: IclLayout, cfg: IsaConfig) -> IsaRouting:
    """Stages 1-3 only: the discrete decisions (selection, split, mask) of a run."""
    return _Assembly(q, k, v, icl, cfg).routing()


def isa_forward(
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    icl: IclLayout,
    cfg: IsaConfig,
    collect_trace: bool = True,
):
    """Run the full pipeline; returns (output, IsaTrace or None)."""
    return _forward(_Assembly(q, k, v, icl, cfg), collect_trace)


def isa_forward_with_routing(
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    icl: IclLayout,
    cfg: IsaConfig,
    routing: IsaRouting,
) -> Tensor4:
    """Forward pass with pinned routing (the map the backward pass differentiates)."""
    return _forward(_Assembly(q, k, v, icl, cfg, routing=routing), collect_trace=False)[0]


def _forward(asm: _Assembly, collect_trace: bool):
    cfg, b = asm.cfg, asm.cfg.block_size
    layout = asm.padded_layout
    key_layout = BlockLayout(b, asm.t_new * b)

    t0 = time.perf_counter()
    parts = []
    if asm.n_sharp:
        q_sharp = gather_blocks(asm.qp, layout, asm.split.sharp)
        o_sharp = online_softmax_attention(
            q_sharp, asm.k_new, asm.v_new, asm.scale, layout=key_layout, mask=asm.key_mask_new
        )
        parts.append((asm.split.sharp, o_sharp))
    if asm.n_flat:
        q_flat = gather_blocks(asm.qp, layout, asm.split.flat)
        o_flat = taylor_sparse_forward(asm.kernel_input(q_flat))
        parts.append((asm.split.flat, o_flat))
    asm.times["kernel"] = (time.perf_counter() - t0) * 1e6

    t0 = time.perf_counter()
    out_pad = np.zeros_like(asm.qp)
    for idx, piece in parts:
        out_pad = scatter_blocks(out_pad, idx, piece)
    if cfg.gamma:
        residual = np.repeat(asm.coarse_residual(), b, axis=2)
        out_pad = (out_pad.astype(np.float64) + cfg.gamma * residual).astype(asm.qp.dtype)
    out = out_pad[:, :, asm.orig_rows]
    asm.times["reconstruct"] = (time.perf_counter() - t0) * 1e6

    trace = None
    if collect_trace:
        trace = IsaTrace(
            coarse_summary=asm.cs.summary(),
            selection=asm.sel,
            split=asm.split,
            mask=asm.mask,
            flops=asm.pipeline_flops(),
            stage_times_us=dict(asm.times),
        )
    return out, trace


def isa_backward(
    q: Tensor4,
    k: Tensor4,
    v: Tensor4,
    icl: IclLayout,
    cfg: IsaConfig,
    do: Tensor4,
) -> GradBundle:
    """Gradients of isa_forward with routing frozen at this forward's decisions.

    Flat-branch gradients come from the Taylor kernel's backward, sharp-branch
    from the exact backward; the context gather's adjoint scatters dK_new/dV_new
    back to original token positions, and the gamma residual contributes through
    the block means' adjoint.
    """
    asm = _Assembly(q, k, v, icl, cfg)
    do = ensure_tensor4(do, "dO")
    if do.shape != asm.q.shape:
        raise LayoutError(f"dO shape {do.shape} != output shape {asm.q.shape}")
    do = do.astype(DTYPES[cfg.precision], copy=False)
    b = cfg.block_size
    B, H, _, D = asm.q.shape
    layout = asm.padded_layout
    key_layout = BlockLayout(b, asm.t_new * b)

    do_pad = np.zeros(asm.qp.shape, dtype=np.float64)
    do_pad[:, :, asm.orig_rows] = do.astype(np.float64)

    dq_pad = np.zeros_like(do_pad)
    dk_new = np.zeros((B, H, asm.t_new * b, D))
    dv_new = np.zeros_like(dk_new)

    if asm.n_sharp:
        q_sharp = gather_blocks(asm.qp, layout, asm.split.sharp)
        do_sharp = gather_blocks(do_pad, layout, asm.split.sharp)
        g = full_attention_backward(
            q_sharp, asm.k_new, asm.v_new, asm.scale, do_sharp, mask=asm.key_mask_new
        )
        dq_pad = scatter_blocks(dq_pad, asm.split.sharp, g.dq.astype(np.float64))
        dk_new += g.dk
        dv_new += g.dv
    if asm.n_flat:
        q_flat = gather_blocks(asm.qp, layout, asm.split.flat)
        do_flat = gather_blocks(do_pad, layout, asm.split.flat)
        g = taylor_sparse_backward(asm.kernel_input(q_flat), do_flat)
        dq_pad = scatter_blocks(dq_pad, asm.split.flat, g.dq.astype(np.float64))
        dk_new += g.dk
        dv_new += g.dv

    # adjoint of K_new/V_new assembly: source segment maps back directly,
    # selected context blocks scatter to their original positions
    dk_pad = np.zeros_like(do_pad)
    dv_pad = np.zeros_like(do_pad)
    dk_pad[:, :, : asm.t_src * b] = dk_new[:, :, : asm.t_src * b]
    dv_pad[:, :, : asm.t_src * b] = dv_new[:, :, : asm.t_src * b]
    if asm.sel.k_ctx:
        dk_ctx = dk_new[:, :, asm.t_src * b :].reshape(B, H, asm.sel.k_ctx, b, D)
        dv_ctx = dv_new[:, :, asm.t_src * b :].reshape(B, H, asm.sel.k_ctx, b, D)
        pos = (asm.t_src + asm.sel.indices)[..., None, None]
        np.put_along_axis(dk_pad.reshape(B, H, asm.t_all, b, D), pos, dk_ctx, axis=2)
        np.put_along_axis(dv_pad.reshape(B, H, asm.t_all, b, D), pos, dv_ctx, axis=2)

    if cfg.gamma:
        do_c = cfg.gamma * do_pad.reshape(B, H, asm.t_all, b, -1).sum(axis=3)
        if cfg.residual_softmax:
            gc = full_attention_backward(asm.qc, asm.kc, asm.vc, asm.scale, do_c.astype(asm.qc.dtype))
            dqc, dkc, dvc = (x.astype(np.float64) for x in (gc.dq, gc.dk, gc.dv))
        else:
            qcf = asm.qc.astype(np.float64)
            kcf = asm.kc.astype(np.float64)
            vcf = asm.vc.astype(np.float64)
            ds = np.einsum("bhid,bhjd->bhij", do_c, vcf)
            dqc = np.einsum("bhij,bhjd->bhid", ds, kcf)
            dkc = np.einsum("bhij,bhid->bhjd", ds, qcf)
            dvc = np.einsum("bhij,bhid->bhjd", np.einsum("bhid,bhjd->bhij", qcf, kcf), do_c)
        dq_pad += _spread_mean_grad(dqc, asm.seg_valid, b)
        dk_pad += _spread_mean_grad(dkc, asm.seg_valid, b)
        dv_pad += _spread_mean_grad(dvc, asm.seg_valid, b)

    dtype = DTYPES[cfg.precision]
    return GradBundle(
        dq_pad[:, :, asm.orig_rows].astype(dtype),
        dk_pad[:, :, asm.orig_rows].astype(dtype),
        dv_pad[:, :, asm.orig_rows].astype(dtype),
    )


def _spread_mean_grad(dmean, valid, b):
    """Adjoint of the per-block valid-row mean: row r of block t gets dmean[t]/valid[t]."""
    B, H, T, D = dmean.shape
    keep = (np.arange(b)[None, :] < np.asarray(valid)[:, None]).astype(np.float64)
    per_row = dmean[:, :, :, None, :] / np.asarray(valid, dtype=np.float64)[None, None, :, None, None]
    spread = per_row * keep[None, None, :, :, None]
    return spread.reshape(B, H, T * b, D)


def apply_decoupled_rope(x: Tensor4, icl: IclLayout, base: float = 10000.0) -> Tensor4:
    """Rotary position rotation with positions restarting at zero for the context segment.

    Pairs (2i, 2i+1) rotate by angle pos * base^(-2i/D); source tokens use
    positions 0..L_src-1 and context tokens independently 0..L_ctx-1.
    """
    x = ensure_tensor4(x, "rope input")
    B, H, S, D = x.shape
    if D % 2:
        raise ConfigError(f"decoupled rope needs an even head dim, got D={D}")
    if S != icl.total:
        raise LayoutError(f"sequence length {S} != icl total {icl.total}")
    pos = np.concatenate([np.arange(icl.l_src), np.arange(icl.l_ctx)]).astype(np.float64)
    inv_freq = base ** (-np.arange(0, D, 2, dtype=np.float64) / D)
    theta = pos[:, None] * inv_freq[None, :]
    cos, sin = np.cos(theta), np.sin(theta)
    xf = x.astype(np.float64).reshape(B, H, S, D // 2, 2)
    even, odd = xf[..., 0], xf[..., 1]
    out = np.empty_like(xf)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(B, H, S, D).astype(x.dtype)
