"""The block-wise 0th-order Taylor kernel and its defining semantic.

Per query block, a few key blocks (chosen by coarse score) get exact online
softmax updates; every other block collapses to one mean-key score weighted
by its row count. The output equals a direct softmax over that "surrogate"
score row, so error vanishes as blocks become internally uniform.
"""

import numpy as np

from isattn import (
    BlockLayout,
    TaylorKernelInput,
    build_block_mask,
    build_coarse,
    flop_count,
    full_attention,
    max_relative_error,
    taylor_sparse_forward,
)

rng = np.random.default_rng(1)
b, t_k, d = 8, 16, 32
S = t_k * b

# keys drawn around 4 cluster centers -> blocks are internally similar
centers = rng.standard_normal((4, d))
member = np.arange(S) // (S // 4)
k = (centers[member] + 0.3 * rng.standard_normal((S, d))).reshape(1, 1, S, d)
v = rng.standard_normal((1, 1, S, d))
q = rng.standard_normal((1, 1, S, d))

layout = BlockLayout(b, S)
scale = 1.0 / np.sqrt(d)
dense = full_attention(q, k, v, scale)

print("density  exact-blocks  max-rel-err   total-MAs / dense-MAs")
for alpha_ns in (1.0, 0.5, 0.25, 0.125, 0.0625):
    cs = build_coarse(q, k, v, layout, layout, scale)
    mask = build_block_mask(cs, alpha_ns)
    tin = TaylorKernelInput(
        q=q, k_new=k, v_new=v, kc=cs.kc, vc=cs.vc, mask=mask, scale=scale, block_size=b
    )
    out = taylor_sparse_forward(tin)
    fc = flop_count(tin)
    ratio = (fc.exact_mas + fc.taylor_mas) / fc.dense_equivalent_mas
    err = max_relative_error(out, dense)
    print(f"{alpha_ns:7.4f}  {mask.k:12d}  {err:11.2e}   {ratio:.4f}")

# with sigma -> 0 every block is constant-row and the approximation is exact
k_const = np.repeat(rng.standard_normal((1, 1, t_k, d)), b, axis=2)
v_const = np.repeat(rng.standard_normal((1, 1, t_k, d)), b, axis=2)
cs = build_coarse(q, k_const, v_const, layout, layout, scale)
mask = build_block_mask(cs, 0.0625)
tin = TaylorKernelInput(q, k_const, v_const, cs.kc, cs.vc, mask, scale, b)
err = max_relative_error(taylor_sparse_forward(tin), full_attention(q, k_const, v_const, scale))
print("\nconstant-row blocks, 1 exact block of 16 -> err:", err)
