"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion lines.
Criterion 10 is informational (wall-clock trend) and never fails.
"""

import time

import numpy as np
import pytest

from isattn import (
    BlockLayout,
    BoundConstants,
    IclLayout,
    IsaConfig,
    TaylorKernelInput,
    WorkloadSpec,
    block_diameters,
    build_block_mask,
    build_coarse,
    elementwise_relative_error,
    estimate_lipschitz,
    full_attention,
    full_attention_backward,
    generate,
    isa_backward,
    isa_forward,
    isa_forward_with_routing,
    isa_routing,
    max_relative_error,
    mean_relative_error,
    online_softmax_attention,
    quadrant_stats,
    row_sharpness,
    sharpness_error_correlation,
    taylor_error,
    taylor_sparse_backward,
    taylor_sparse_forward,
    theorem1_bound,
)
from helpers import finite_difference_grads
from test_taylor import make_input, surrogate_softmax_oracle


def report(num, ok, detail):
    print(f"\n[criterion {num:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {num}: {detail}"


def test_criterion_1_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        b = int(rng.integers(1, 3))
        h = int(rng.integers(1, 3))
        s_q = int(rng.integers(1, 513))
        s_k = int(rng.integers(1, 513))
        d = int(rng.integers(1, 65))
        block = int(rng.integers(1, 129))
        q = rng.standard_normal((b, h, s_q, d))
        k = rng.standard_normal((b, h, s_k, d))
        v = rng.standard_normal((b, h, s_k, d))
        ref = full_attention(q, k, v)
        out = online_softmax_attention(q, k, v, layout=BlockLayout(min(block, s_k), s_k))
        worst = max(worst, max_relative_error(out, ref))
    ok = worst <= 1e-12
    report(1, ok, f"online==full over 200 instances, max rel err {worst:.2e} "
                  f"(tol 1e-12), {time.time() - t0:.1f}s")


def test_criterion_2_reduction_identities():
    t0 = time.time()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        b = 4
        if i % 2:
            l_src = int(rng.integers(1, 40))
            l_ctx = int(rng.integers(0, 40))
        else:
            l_src = int(rng.integers(1, 10)) * b
            l_ctx = int(rng.integers(0, 10)) * b
        s = l_src + l_ctx
        h = int(rng.integers(1, 3))
        d = int(rng.integers(2, 9))
        q = rng.standard_normal((1, h, s, d))
        k = rng.standard_normal((1, h, s, d))
        v = rng.standard_normal((1, h, s, d))
        icl = IclLayout(l_src, l_ctx)
        ref = full_attention(q, k, v)
        for cfg in (
            IsaConfig(alpha_s=1.0, alpha_f=0.0, gamma=0.0, block_size=b, precision="double", strict=False),
            IsaConfig(alpha_s=1.0, alpha_f=1.0, alpha_ns=1.0, gamma=0.0, block_size=b, precision="double", strict=False),
        ):
            out, _ = isa_forward(q, k, v, icl, cfg)
            worst = max(worst, max_relative_error(out, ref))
    ok = worst <= 1e-10
    report(2, ok, f"reduction identities over 100 instances (ragged included), "
                  f"max rel err {worst:.2e} (tol 1e-10), {time.time() - t0:.1f}s")


def test_criterion_3_taylor_surrogate_semantics():
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst = 0.0
    exact_zero_ok = True
    for i in range(200):
        t_q = int(rng.integers(1, 4))
        t_k = int(rng.integers(1, 5))
        d = int(rng.integers(1, 5))
        k_exact = int(rng.integers(1, t_k + 1))
        valid = rng.integers(1, 5, size=(1, 1, t_k)) if i % 3 == 0 else None
        inp = make_input(rng, t_q=t_q, t_k=t_k, b=4, d=d, k_exact=k_exact, valid=valid)
        if i % 10 == 0:
            # constant-row blocks: the Taylor branch must be exact (eps identically 0)
            base_k = rng.standard_normal((1, 1, t_k, d))
            base_v = rng.standard_normal((1, 1, t_k, d))
            inp.k_new = np.repeat(base_k, 4, axis=2)
            inp.v_new = np.repeat(base_v, 4, axis=2)
            inp.kc, inp.vc, inp.key_valid_rows = base_k, base_v, None
            rep = taylor_error(inp.q, inp.k_new, BlockLayout(4, t_k * 4), inp.mask, inp.scale)
            exact_zero_ok &= float(np.abs(rep.eps).max()) == 0.0
        out = taylor_sparse_forward(inp)
        worst = max(worst, max_relative_error(out, surrogate_softmax_oracle(inp)))
    ok = worst <= 1e-12 and exact_zero_ok
    report(3, ok, f"surrogate-softmax semantics over 200 (input, mask) pairs, max rel err "
                  f"{worst:.2e} (tol 1e-12), constant-row eps==0: {exact_zero_ok}, {time.time() - t0:.1f}s")


def test_criterion_4_gradient_checks():
    t0 = time.time()
    tol = 1e-5
    seeds = 50
    worst = {"full": 0.0, "taylor": 0.0, "isa": 0.0}

    for seed in range(seeds):
        rng = np.random.default_rng(4000 + seed)
        q = rng.standard_normal((1, 1, 8, 4))
        k = rng.standard_normal((1, 1, 8, 4))
        v = rng.standard_normal((1, 1, 8, 4))
        do = rng.standard_normal((1, 1, 8, 4))
        g = full_attention_backward(q, k, v, None, do)
        loss = lambda: float(np.sum(full_attention(q, k, v) * do))
        for analytic, fd in zip((g.dq, g.dk, g.dv), finite_difference_grads(loss, [q, k, v])):
            worst["full"] = max(worst["full"], elementwise_relative_error(analytic, fd, floor=1e-8))

    for seed in range(seeds):
        rng = np.random.default_rng(5000 + seed)
        valid = rng.integers(2, 5, size=(1, 1, 3)) if seed % 2 else None
        inp = make_input(rng, t_q=2, t_k=3, b=4, d=3, k_exact=int(rng.integers(1, 3)), valid=valid)
        do = rng.standard_normal(inp.q.shape)
        g = taylor_sparse_backward(inp, do)
        q, k, v = inp.q, inp.k_new, inp.v_new
        valid_arr = inp._weights()

        def rebuilt():
            kc = np.zeros_like(inp.kc)
            vc = np.zeros_like(inp.vc)
            for t in range(3):
                n = valid_arr[0, 0, t]
                kc[0, 0, t] = k[0, 0, t * 4 : t * 4 + n].mean(axis=0)
                vc[0, 0, t] = v[0, 0, t * 4 : t * 4 + n].mean(axis=0)
            return TaylorKernelInput(q, k, v, kc, vc, inp.mask, inp.scale, 4, inp.key_valid_rows)

        loss = lambda: float(np.sum(taylor_sparse_forward(rebuilt()) * do))
        for analytic, fd in zip((g.dq, g.dk, g.dv), finite_difference_grads(loss, [q, k, v])):
            worst["taylor"] = max(worst["taylor"], elementwise_relative_error(analytic, fd, floor=1e-8))

    icl = IclLayout(16, 16)
    cfg = IsaConfig(alpha_s=0.5, alpha_ns=0.25, alpha_f=0.5, block_size=4, precision="double")
    for seed in range(seeds):
        rng = np.random.default_rng(6000 + seed)
        q = rng.standard_normal((1, 1, 32, 3))
        k = rng.standard_normal((1, 1, 32, 3))
        v = rng.standard_normal((1, 1, 32, 3))
        do = rng.standard_normal(q.shape)
        routing = isa_routing(q, k, v, icl, cfg)
        g = isa_backward(q, k, v, icl, cfg, do)
        loss = lambda: float(np.sum(isa_forward_with_routing(q, k, v, icl, cfg, routing) * do))
        for analytic, fd in zip((g.dq, g.dk, g.dv), finite_difference_grads(loss, [q, k, v])):
            worst["isa"] = max(worst["isa"], elementwise_relative_error(analytic, fd, floor=1e-8))

    ok = all(w <= tol for w in worst.values())
    report(4, ok, f"gradient checks, 50 seeds each: full {worst['full']:.2e}, "
                  f"taylor {worst['taylor']:.2e}, isa {worst['isa']:.2e} (tol 1e-5), {time.time() - t0:.0f}s")


def test_criterion_5_flop_model():
    t0 = time.time()
    S, b, D, H = 16384, 64, 64, 4
    spec = WorkloadSpec(batch=1, heads=H, seq_len=S, dim=D, seed=0, precision="single")
    q, k, v, icl = generate(spec)
    cfg = IsaConfig()  # stock knobs: alpha_s=0.125, alpha_ns=0.0625 (93.75% taylor share), alpha_f=0.5
    _, trace = isa_forward(q, k, v, icl, cfg)
    measured = trace.flops.exact_mas + trace.flops.taylor_mas  # overhead excluded
    dense = 1 * H * (S // b) ** 2 * 4 * b * b * D
    k_ctx = int(np.floor(cfg.alpha_s * (icl.l_ctx // b)))
    k_new_len = icl.l_src + k_ctx * b
    closed = dense * (cfg.alpha_f + (1 - cfg.alpha_f) * (cfg.alpha_ns + (1 - cfg.alpha_ns) / b))
    closed *= k_new_len / S
    rel = abs(measured - closed) / closed
    ok = rel <= 0.02
    report(5, ok, f"flop model at S=16384 default cfg: measured {measured:.4e} vs closed "
                  f"{closed:.4e}, diff {rel:.3%} (tol 2%), {time.time() - t0:.0f}s")


def test_criterion_6_theorem_bound_domination():
    t0 = time.time()
    hits = total = 0
    violations = []
    for seed in range(50):
        spec = WorkloadSpec(
            batch=1, heads=2, seq_len=512, dim=32, n_clusters=8, cluster_noise=0.25,
            seed=seed, precision="double",
        )
        q, k, _, _ = generate(spec)
        lay = BlockLayout(16, 512)
        cs = build_coarse(q, k, k, lay, lay)
        mask = build_block_mask(cs, 0.0625)
        rep = taylor_error(q, k, lay, mask)
        lip = estimate_lipschitz(q, row_sharpness(q, k, lay, mask), 16)
        bound = theorem1_bound(rep, BoundConstants(lipschitz=lip, delta=block_diameters(q, 16)))
        dominated = bound >= rep.eps
        hits += int(dominated.sum())
        total += dominated.size
        for bi, hi, u in zip(*np.where(~dominated)):
            violations.append(
                f"seed={seed} b={bi} h={hi} block={u} slack={bound[bi, hi, u] - rep.eps[bi, hi, u]:.3e}"
            )
    frac = hits / total
    for line in violations:
        print(f"    bound violation: {line}")
    ok = frac >= 0.99
    report(6, ok, f"bound dominates eps in {frac:.4%} of {total} blocks over 50 clustered "
                  f"seeds (need >=99%), {len(violations)} violations logged, {time.time() - t0:.0f}s")


def test_criterion_7_sharpness_error_trend():
    t0 = time.time()
    good = 0
    for seed in range(20):
        spec = WorkloadSpec(
            batch=1, heads=4, seq_len=512, dim=32, n_clusters=8, cluster_noise=0.25,
            seed=seed, precision="double",
        )
        q, k, _, _ = generate(spec)
        lay = BlockLayout(16, 512)
        cs = build_coarse(q, k, k, lay, lay)
        mask = build_block_mask(cs, 0.0625)
        rep = taylor_error(q, k, lay, mask)
        corr = sharpness_error_correlation(rep.sharpness, rep.eps)
        monotone_bins = 1 + int(np.sum(np.diff(corr.binned_means) >= 0))
        good += corr.spearman_rho > 0 and monotone_bins >= 8
    ok = good >= 18
    report(7, ok, f"sharpness-error trend holds in {good}/20 clustered seeds "
                  f"(need >=18: spearman>0 and >=8/10 bins monotone), {time.time() - t0:.0f}s")


def test_criterion_8_quadrant_asymmetry():
    t0 = time.time()
    good = 0
    for seed in range(20):
        spec = WorkloadSpec(
            batch=1, heads=4, seq_len=256, dim=32, n_clusters=8,
            context_attenuation=0.3, seed=seed, precision="double",
        )
        q, k, _, icl = generate(spec)
        stats = quadrant_stats(q, k, icl)
        good += stats.mass["src_src"]["mean"] > stats.mass["src_ctx"]["mean"]
    ok = good >= 18
    report(8, ok, f"source-source mass exceeds source-context mass in {good}/20 seeds "
                  f"at attenuation 0.3 (need >=18), {time.time() - t0:.0f}s")


def test_criterion_9_monotone_error_knob():
    t0 = time.time()
    grid = [0.0625, 0.125, 0.25, 0.5, 1.0]
    good = 0
    for seed in range(20):
        spec = WorkloadSpec(
            batch=1, heads=2, seq_len=512, dim=32, n_clusters=8, cluster_noise=0.25,
            seed=seed, precision="double",
        )
        q, k, v, icl = generate(spec)
        ref = full_attention(q, k, v)
        errs = []
        for a_ns in grid:
            cfg = IsaConfig(alpha_s=1.0, alpha_ns=a_ns, alpha_f=1.0, block_size=16, precision="double")
            out, _ = isa_forward(q, k, v, icl, cfg, collect_trace=False)
            errs.append(mean_relative_error(out, ref))
        good += all(errs[i + 1] <= errs[i] + 1e-15 for i in range(len(errs) - 1))
    ok = good >= 18
    report(9, ok, f"mean error non-increasing in alpha_ns on {good}/20 seeds "
                  f"(need >=18), {time.time() - t0:.0f}s")


def test_criterion_10_wall_clock_trend_informational():
    t0 = time.time()
    ratios = []
    for s in (2048, 4096, 8192, 16384):
        spec = WorkloadSpec(batch=1, heads=2, seq_len=s, dim=64, seed=0, precision="single")
        q, k, v, icl = generate(spec)
        cfg = IsaConfig()
        t1 = time.time()
        isa_forward(q, k, v, icl, cfg, collect_trace=False)
        t_isa = time.time() - t1
        t1 = time.time()
        online_softmax_attention(q, k, v, layout=BlockLayout(64, s))
        t_dense = time.time() - t1
        ratios.append((s, t_isa / t_dense))
    trend = " ".join(f"S={s}: {r:.3f}" for s, r in ratios)
    decreasing = all(ratios[i + 1][1] <= ratios[i][1] * 1.15 for i in range(len(ratios) - 1))
    print(f"\n[criterion 10] INFO (not gating): isa/dense time ratios {trend}; "
          f"broadly decreasing: {decreasing}; {time.time() - t0:.0f}s")
