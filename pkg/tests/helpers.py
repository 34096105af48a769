"""Shared oracles for the test suite: direct softmax and central differences."""

import numpy as np


def direct_softmax_oracle(q, k, v, scale, dtype=np.float64):
    """Independent loop implementation: per-row softmax over all keys."""
    B, H, S_q, D = q.shape
    out = np.zeros((B, H, S_q, v.shape[3]), dtype=dtype)
    for bi in range(B):
        for hi in range(H):
            for i in range(S_q):
                scores = np.array(
                    [scale * np.dot(q[bi, hi, i].astype(dtype), k[bi, hi, j].astype(dtype))
                     for j in range(k.shape[2])],
                    dtype=dtype,
                )
                w = np.exp(scores - scores.max())
                w = w / w.sum()
                out[bi, hi, i] = sum(w[j] * v[bi, hi, j].astype(dtype) for j in range(k.shape[2]))
    return out


def finite_difference_grads(loss, tensors, h=1e-5):
    """Central differences of a scalar loss w.r.t. each tensor, elementwise."""
    grads = []
    for x in tensors:
        g = np.zeros_like(x)
        flat_x, flat_g = x.ravel(), g.ravel()
        for i in range(x.size):
            orig = flat_x[i]
            flat_x[i] = orig + h
            fp = loss()
            flat_x[i] = orig - h
            fm = loss()
            flat_x[i] = orig
            flat_g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads
