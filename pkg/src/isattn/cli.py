"""isa-bench: run attention variants over seeded workloads and emit CSV.

Exit codes: 0 ok, 2 config error, 3 non-finite numerics, 4 IO error.
Wall-clock columns are machine-dependent and informational; the multiply-add
columns are the portable speed proxy.
"""

from __future__ import annotations

import argparse
import csv
import math
import resource
import statistics
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .coarse import build_block_mask, build_coarse
from .errors import ConfigError, FormatError, IsaError, NumericError
from .pipeline import IsaConfig, apply_decoupled_rope, isa_forward
from .reference import full_attention, online_softmax_attention
from .taylor import FlopCount, TaylorKernelInput, flop_count, taylor_sparse_forward
from .tensor import BlockLayout
from .util import max_relative_error, mean_relative_error
from .workload import WorkloadSpec, dump, generate, load

SCHEMA_VERSION = 1

CSV_COLUMNS = [
    "schema_version",
    "mode",
    "S",
    "L_src",
    "L_ctx",
    "b",
    "alpha_s",
    "alpha_ns",
    "alpha_f",
    "gamma",
    "seed",
    "repeat",
    "t_total_us",
    "t_coarse_us",
    "t_select_us",
    "t_split_us",
    "t_kernel_us",
    "t_reconstruct_us",
    "mas_exact",
    "mas_taylor",
    "mas_dense_equiv",
    "max_rel_err",
    "mean_rel_err",
]

MODES = ("full", "online", "taylor", "isa")


@dataclass
class RunConfig:
    mode: str = "isa"
    spec: WorkloadSpec = field(default_factory=WorkloadSpec)
    isa: IsaConfig = field(default_factory=IsaConfig)
    repeats: int = 1
    warmups: int = 0
    out_path: Optional[str] = None
    trace_path: Optional[str] = None
    dump_path: Optional[str] = None
    load_path: Optional[str] = None
    rope: bool = False

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.warmups < 0:
            raise ConfigError(f"warmups must be >= 0, got {self.warmups}")
        self.isa.validate()
        return self


def _dense_flops(B, H, S, b, D) -> FlopCount:
    t = -(-S // b)
    mas = B * H * t * t * 4 * b * b * D
    return FlopCount(exact_mas=mas, taylor_mas=0, overhead_mas=0, dense_equivalent_mas=mas)


def _taylor_standalone(q, k, v, cfg: IsaConfig):
    """mode=taylor: the kernel alone over the whole sequence (no selection/split)."""
    b = cfg.block_size
    S = q.shape[2]
    if S % b:
        raise ConfigError(f"mode=taylor needs seq_len divisible by block size, got {S} % {b}")
    layout = BlockLayout(b, S)
    scale = cfg.scale if cfg.scale is not None else 1.0 / math.sqrt(q.shape[3])
    cs = build_coarse(q, k, v, layout, layout, scale)
    mask = build_block_mask(cs, cfg.alpha_ns)
    tin = TaylorKernelInput(
        q=q, k_new=k, v_new=v, kc=cs.kc, vc=cs.vc, mask=mask, scale=scale, block_size=b
    )
    return taylor_sparse_forward(tin), flop_count(tin)


def _execute(rc: RunConfig, q, k, v, icl):
    """One timed execution; returns (output, total_us, stage_times_us, FlopCount, trace)."""
    cfg = rc.isa
    B, H, S, D = q.shape
    times = {key: 0.0 for key in ("coarse", "select", "split", "kernel", "reconstruct")}
    trace = None
    t0 = time.perf_counter()
    if rc.mode == "full":
        out = full_attention(q, k, v, cfg.scale)
        fc = _dense_flops(B, H, S, cfg.block_size, D)
    elif rc.mode == "online":
        out = online_softmax_attention(q, k, v, cfg.scale, layout=BlockLayout(cfg.block_size, S))
        fc = _dense_flops(B, H, S, cfg.block_size, D)
    elif rc.mode == "taylor":
        out, fc = _taylor_standalone(q, k, v, cfg)
    else:
        out, trace = isa_forward(q, k, v, icl, cfg)
        fc = trace.flops
        times.update(trace.stage_times_us)
    total_us = (time.perf_counter() - t0) * 1e6
    if rc.mode != "isa":
        times["kernel"] = total_us
    return out, total_us, times, fc, trace


def run(rc: RunConfig) -> list[dict]:
    """Execute one cell: warmups, `repeats` timed runs, and a median summary row."""
    rc.validate()
    spec = rc.spec.resolved()
    if rc.load_path:
        q, k, v, icl = load(rc.load_path)
        spec = replace(spec, seq_len=q.shape[2], l_src=icl.l_src, l_ctx=icl.l_ctx,
                       batch=q.shape[0], heads=q.shape[1], dim=q.shape[3])
    else:
        q, k, v, icl = generate(spec)
    if rc.dump_path:
        dump(rc.dump_path, q, k, v, icl, spec.precision)
    if rc.rope:
        q = apply_decoupled_rope(q, icl)
        k = apply_decoupled_rope(k, icl)

    reference = None
    if rc.mode != "full":
        reference = full_attention(q, k, v, rc.isa.scale)

    base = {
        "schema_version": SCHEMA_VERSION,
        "mode": rc.mode,
        "S": spec.seq_len,
        "L_src": icl.l_src,
        "L_ctx": icl.l_ctx,
        "b": rc.isa.block_size,
        "alpha_s": rc.isa.alpha_s,
        "alpha_ns": rc.isa.alpha_ns,
        "alpha_f": rc.isa.alpha_f,
        "gamma": rc.isa.gamma,
        "seed": spec.seed,
    }
    for _ in range(rc.warmups):
        _execute(rc, q, k, v, icl)

    rows = []
    last_trace = None
    for rep in range(rc.repeats):
        out, total_us, times, fc, trace = _execute(rc, q, k, v, icl)
        last_trace = trace
        if not np.all(np.isfinite(out)):
            raise NumericError(f"mode={rc.mode}: non-finite output values")
        row = dict(base)
        row.update(
            repeat=rep,
            t_total_us=total_us,
            t_coarse_us=times["coarse"],
            t_select_us=times["select"],
            t_split_us=times["split"],
            t_kernel_us=times["kernel"],
            t_reconstruct_us=times["reconstruct"],
            mas_exact=fc.exact_mas,
            mas_taylor=fc.taylor_mas,
            mas_dense_equiv=fc.dense_equivalent_mas,
            max_rel_err=math.nan if reference is None else max_relative_error(out, reference),
            mean_rel_err=math.nan if reference is None else mean_relative_error(out, reference),
        )
        rows.append(row)

    summary = dict(rows[-1])
    summary["repeat"] = "median"
    for key in ("t_total_us", "t_coarse_us", "t_select_us", "t_split_us", "t_kernel_us",
                "t_reconstruct_us", "max_rel_err", "mean_rel_err"):
        summary[key] = statistics.median(row[key] for row in rows)
    rows.append(summary)

    if rc.trace_path and last_trace is not None:
        with open(rc.trace_path, "w") as f:
            f.write(last_trace.to_text())
    return rows


def sweep(rc: RunConfig, seq_lens, alphas_s, alphas_ns, alphas_f) -> tuple[list[dict], list[str]]:
    """Cartesian grid of run() calls; failures are recorded per row and the sweep continues."""
    rows, failures = [], []
    for s in seq_lens:
        for a_s in alphas_s:
            for a_ns in alphas_ns:
                for a_f in alphas_f:
                    cell_spec = replace(rc.spec, seq_len=s, l_src=None, l_ctx=None, n_clusters=None) \
                        if rc.spec.seq_len != s else replace(rc.spec, seq_len=s)
                    cell = replace(
                        rc,
                        spec=cell_spec,
                        isa=replace(rc.isa, alpha_s=a_s, alpha_ns=a_ns, alpha_f=a_f),
                    )
                    try:
                        rows.extend(run(cell))
                    except IsaError as exc:
                        failures.append(f"S={s} alpha_s={a_s} alpha_ns={a_ns} alpha_f={a_f}: {exc}")
                        failed = {key: math.nan for key in CSV_COLUMNS}
                        failed.update(schema_version=SCHEMA_VERSION, mode=rc.mode, S=s,
                                      alpha_s=a_s, alpha_ns=a_ns, alpha_f=a_f, repeat="failed")
                        rows.append(failed)
    return rows, failures


def _write_csv(rows: list[dict], path: Optional[str]) -> None:
    f = open(path, "w", newline="") if path else sys.stdout
    try:
        f.write(f"# isa-bench schema_version={SCHEMA_VERSION}\n")
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if path:
            f.close()


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok]


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isa-bench", description=__doc__)
    p.add_argument("--mode", choices=MODES, default="isa")
    p.add_argument("--seq-len", type=_int_list, default=[4096], help="comma-separated values sweep")
    p.add_argument("--src-len", type=int, default=None)
    p.add_argument("--ctx-len", type=int, default=None)
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--alpha-s", type=_float_list, default=[0.125])
    p.add_argument("--alpha-ns", type=_float_list, default=[0.0625])
    p.add_argument("--alpha-f", type=_float_list, default=[0.5])
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--warmups", type=int, default=0)
    p.add_argument("--precision", choices=("single", "double"), default="single")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--trace", dest="trace_path", default=None, metavar="PATH")
    p.add_argument("--out", dest="out_path", default=None, metavar="PATH")
    p.add_argument("--dump", dest="dump_path", default=None, metavar="PATH")
    p.add_argument("--load", dest="load_path", default=None, metavar="PATH")
    p.add_argument("--rope", action="store_true", help="apply decoupled rotary positions to Q and K")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    multi = len(args.seq_len) > 1 or len(args.alpha_s) > 1 or len(args.alpha_ns) > 1 or len(args.alpha_f) > 1
    try:
        spec = WorkloadSpec(
            heads=args.heads,
            seq_len=args.seq_len[0],
            dim=args.dim,
            l_src=args.src_len,
            l_ctx=args.ctx_len,
            seed=args.seed,
            precision=args.precision,
        )
        cfg = IsaConfig(
            alpha_s=args.alpha_s[0],
            alpha_ns=args.alpha_ns[0],
            alpha_f=args.alpha_f[0],
            gamma=args.gamma,
            block_size=args.block_size,
            deterministic=args.deterministic,
            precision=args.precision,
        )
        rc = RunConfig(
            mode=args.mode,
            spec=spec,
            isa=cfg,
            repeats=args.repeats,
            warmups=args.warmups,
            out_path=args.out_path,
            trace_path=args.trace_path,
            dump_path=args.dump_path,
            load_path=args.load_path,
            rope=args.rope,
        ).validate()
    except ConfigError as exc:
        print(f"isa-bench: config error: {exc}", file=sys.stderr)
        return 2

    failures: list[str] = []
    try:
        if multi:
            rows, failures = sweep(rc, args.seq_len, args.alpha_s, args.alpha_ns, args.alpha_f)
        else:
            rows = run(rc)
        _write_csv(rows, rc.out_path)
    except ConfigError as exc:
        print(f"isa-bench: config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"isa-bench: io error: {exc}", file=sys.stderr)
        return 4
    except (NumericError, IsaError) as exc:
        print(f"isa-bench: NUMERIC failure: {exc}", file=sys.stderr)
        return 3

    peak_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    print(f"isa-bench: done, peak_rss_kb={peak_kb}", file=sys.stderr)
    if failures:
        for line in failures:
            print(f"isa-bench: NUMERIC cell failure: {line}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
