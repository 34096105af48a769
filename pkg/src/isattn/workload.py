"""Seeded synthetic Q/K/V generators shaped like in-context token layouts.

Randomness comes from numpy's Philox bit generator (a portable 64-bit
counter-based PRNG); each (batch, head) pair gets its own stream keyed as
seed * 2**16 + batch_index * 256 + head_index, so outputs are reproducible
elementwise across runs and machines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, FormatError, LayoutError
from .tensor import DTYPES, IclLayout, Tensor4, load_tensor4, save_tensor4

KINDS = ("iid-gaussian", "clustered", "lowrank", "loaded")


@dataclass
class WorkloadSpec:
    """Shape, structure, and seed of one synthetic workload.

    context_attenuation < 1 shrinks the component of every context key that
    lies in the span of the source queries, emulating the low-saliency
    context regime.
    """

    batch: int = 1
    heads: int = 4
    seq_len: int = 4096
    dim: int = 64
    l_src: Optional[int] = None  # default: seq_len // 2
    l_ctx: Optional[int] = None
    kind: str = "clustered"
    n_clusters: Optional[int] = None  # default: seq_len // 256
    cluster_noise: float = 0.25
    rank: int = 8
    lowrank_noise: float = 0.1
    context_attenuation: float = 1.0
    seed: int = 0
    precision: str = "single"
    path: Optional[str] = None  # for kind="loaded"

    def resolved(self) -> "WorkloadSpec":
        spec = WorkloadSpec(**self.__dict__)
        if spec.l_src is None:
            spec.l_src = spec.seq_len // 2
        if spec.l_ctx is None:
            spec.l_ctx = spec.seq_len - spec.l_src
        if spec.n_clusters is None:
            spec.n_clusters = max(1, spec.seq_len // 256)
        if spec.kind not in KINDS:
            raise ConfigError(f"unknown workload kind {spec.kind!r}")
        if min(spec.batch, spec.heads, spec.seq_len, spec.dim) < 1:
            raise ConfigError("batch/heads/seq_len/dim must all be >= 1")
        if spec.l_src + spec.l_ctx != spec.seq_len or spec.l_src < 1 or spec.l_ctx < 0:
            raise ConfigError(
                f"l_src + l_ctx must equal seq_len with l_src >= 1, got {spec.l_src}+{spec.l_ctx} != {spec.seq_len}"
            )
        if spec.cluster_noise < 0 or spec.lowrank_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if not 0.0 <= spec.context_attenuation <= 1.0:
            raise ConfigError(f"context_attenuation must be in [0, 1], got {spec.context_attenuation}")
        if spec.n_clusters < 1 or spec.rank < 1:
            raise ConfigError("n_clusters and rank must be >= 1")
        if spec.precision not in DTYPES:
            raise ConfigError(f"precision must be one of {sorted(DTYPES)}")
        if spec.kind == "loaded" and not spec.path:
            raise ConfigError("kind='loaded' needs a path")
        return spec


def _stream(seed: int, bi: int, hi: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed * 2**16 + bi * 256 + hi))


def _head_arrays(spec: WorkloadSpec, rng: np.random.Generator):
    s, d = spec.seq_len, spec.dim
    if spec.kind == "iid-gaussian":
        return rng.standard_normal((3, s, d))
    if spec.kind == "clustered":
        n = min(spec.n_clusters, s)
        run = -(-s // n)
        member = np.minimum(np.arange(s) // run, n - 1)
        k_centers = rng.standard_normal((n, d))
        v_centers = rng.standard_normal((n, d))
        k = k_centers[member] + spec.cluster_noise * rng.standard_normal((s, d))
        v = v_centers[member] + spec.cluster_noise * rng.standard_normal((s, d))
        # per-run query focus: each run aims at one cluster with its own peakedness
        target = rng.integers(0, n, size=n)
        tau = rng.uniform(0.25, 2.5, size=n)
        q = tau[member, None] * k_centers[target[member]] + 0.5 * rng.standard_normal((s, d))
        return np.stack([q, k, v])
    if spec.kind == "lowrank":
        r = min(spec.rank, d)
        q = rng.standard_normal((s, r)) @ rng.standard_normal((r, d)) / math.sqrt(r)
        k = rng.standard_normal((s, r)) @ rng.standard_normal((r, d)) / math.sqrt(r)
        q = q + spec.lowrank_noise * rng.standard_normal((s, d))
        k = k + spec.lowrank_noise * rng.standard_normal((s, d))
        v = rng.standard_normal((s, d))
        return np.stack([q, k, v])
    raise ConfigError(f"kind {spec.kind!r} has no generator")


def _attenuate_context(q: np.ndarray, k: np.ndarray, spec: WorkloadSpec) -> np.ndarray:
    """Scale context-key components lying in the source-query span by `a`."""
    a = spec.context_attenuation
    if a == 1.0 or spec.l_ctx == 0:
        return k
    q_src = q[: spec.l_src]
    _, sv, vt = np.linalg.svd(q_src, full_matrices=False)
    rank = int(np.sum(sv > sv[0] * 1e-10)) if sv.size else 0
    if rank == 0:
        return k
    basis = vt[:rank]
    ctx = k[spec.l_src :]
    aligned = (ctx @ basis.T) @ basis
    k = k.copy()
    k[spec.l_src :] = a * aligned + (ctx - aligned)
    return k


def generate(spec: WorkloadSpec) -> Tuple[Tensor4, Tensor4, Tensor4, IclLayout]:
    """Deterministic (Q, K, V, IclLayout) for the given spec and seed."""
    spec = spec.resolved()
    if spec.kind == "loaded":
        return load(spec.path)
    dtype = DTYPES[spec.precision]
    B, H, S, D = spec.batch, spec.heads, spec.seq_len, spec.dim
    q = np.empty((B, H, S, D), dtype=dtype)
    k = np.empty_like(q)
    v = np.empty_like(q)
    for bi in range(B):
        for hi in range(H):
            qh, kh, vh = _head_arrays(spec, _stream(spec.seed, bi, hi))
            kh = _attenuate_context(qh, kh, spec)
            q[bi, hi] = qh.astype(dtype)
            k[bi, hi] = kh.astype(dtype)
            v[bi, hi] = vh.astype(dtype)
    return q, k, v, IclLayout(spec.l_src, spec.l_ctx)


def dump(prefix: str, q: Tensor4, k: Tensor4, v: Tensor4, icl: IclLayout, precision: str = "single") -> None:
    """Write <prefix>.{q,k,v}.isa4 containers plus the three-line <prefix>.meta sidecar."""
    save_tensor4(f"{prefix}.q.isa4", q, precision)
    save_tensor4(f"{prefix}.k.isa4", k, precision)
    save_tensor4(f"{prefix}.v.isa4", v, precision)
    with open(f"{prefix}.meta", "w") as f:
        f.write(f"{icl.l_src}\n{icl.l_ctx}\n{precision}\n")


def load(prefix: str) -> Tuple[Tensor4, Tensor4, Tensor4, IclLayout]:
    """Read tensors dumped by dump(); validates finiteness and the L_src/L_ctx header."""
    try:
        with open(f"{prefix}.meta") as f:
            lines = [line.strip() for line in f.readlines()]
        l_src, l_ctx, precision = int(lines[0]), int(lines[1]), lines[2]
    except (OSError, ValueError, IndexError) as exc:
        raise FormatError(f"{prefix}.meta: cannot parse sidecar header: {exc}") from exc
    if precision not in DTYPES:
        raise FormatError(f"{prefix}.meta: unknown precision {precision!r}")
    q = load_tensor4(f"{prefix}.q.isa4", precision)
    k = load_tensor4(f"{prefix}.k.isa4", precision)
    v = load_tensor4(f"{prefix}.v.isa4", precision)
    if q.shape != k.shape or q.shape != v.shape:
        raise FormatError(f"{prefix}: Q/K/V container dims disagree: {q.shape}, {k.shape}, {v.shape}")
    if l_src + l_ctx != q.shape[2]:
        raise LayoutError(
            f"{prefix}.meta: L_src + L_ctx = {l_src + l_ctx} != stored sequence length {q.shape[2]}"
        )
    return q, k, v, IclLayout(l_src, l_ctx)
