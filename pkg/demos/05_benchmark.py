"""Multiply-add accounting and wall-clock scaling of the sparse pipeline.

MAs are the portable speed proxy: total/dense follows the closed form
(alpha_f + (1-alpha_f)(alpha_ns + (1-alpha_ns)/b)) * |K_new|/S. Wall clock is
machine-dependent; the ratio to a dense blockwise baseline should shrink as
sequences grow. The same numbers come out of the CLI:

    isa-bench --mode isa --seq-len 2048,4096,8192 --out sweep.csv
"""

import time

from isattn import (
    BlockLayout,
    IsaConfig,
    WorkloadSpec,
    generate,
    isa_forward,
    online_softmax_attention,
)

cfg = IsaConfig()  # alpha_s=0.125, alpha_ns=0.0625, alpha_f=0.5, b=64
print("      S   MA ratio   closed form   t_isa    t_dense   ratio")
for s in (2048, 4096, 8192):
    spec = WorkloadSpec(batch=1, heads=2, seq_len=s, dim=64, seed=0, precision="single")
    q, k, v, icl = generate(spec)

    t0 = time.time()
    out, trace = isa_forward(q, k, v, icl, cfg)
    t_isa = time.time() - t0

    t0 = time.time()
    online_softmax_attention(q, k, v, layout=BlockLayout(64, s))
    t_dense = time.time() - t0

    fc = trace.flops
    measured = (fc.exact_mas + fc.taylor_mas) / fc.dense_equivalent_mas
    k_ctx = int(cfg.alpha_s * (icl.l_ctx // cfg.block_size))
    k_new_ratio = (icl.l_src + k_ctx * cfg.block_size) / s
    closed = (cfg.alpha_f + (1 - cfg.alpha_f) * (cfg.alpha_ns + (1 - cfg.alpha_ns) / cfg.block_size))
    closed *= k_new_ratio
    print(
        f"{s:7d}   {measured:.4f}     {closed:.4f}        "
        f"{t_isa:5.2f}s   {t_dense:5.2f}s   {t_isa / t_dense:.3f}"
    )

print("\nstage times at the largest size (us):")
for key, val in trace.stage_times_us.items():
    print(f"  {key:12s} {val:12.0f}")
