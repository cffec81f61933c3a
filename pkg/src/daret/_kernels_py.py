"""Pure NumPy/Python kernels, the fallback when the extension is absent.

Same signatures and semantics as the compiled versions in _kernels.pyx. Each
backend is deterministic on its own; across backends the classifier sweep may
differ in final ulps (BLAS vs naive summation order), while top-k selection
is bit-identical because it only compares values.
"""

import math

import numpy as np

BACKEND_NAME = "python"


def classifier_sweep(W, X, y, order, lr):
    """One shuffled per-sample SGD sweep of the linear domain classifier.

    W (2, D) is updated in place; X (N, D) holds detached embeddings, y (N,)
    the domain labels (0 source, 1 target), order the visit permutation.
    Returns the mean discrimination loss measured at each pre-update sample.
    """
    total = 0.0
    for idx in order:
        x = X[idx]
        z0, z1 = W @ x
        m = z0 if z0 > z1 else z1
        e0 = math.exp(z0 - m)
        e1 = math.exp(z1 - m)
        s = e0 + e1
        p0 = e0 / s
        p1 = e1 / s
        if y[idx] == 0:
            pt, g0, g1 = p0, p0 - 1.0, p1
        else:
            pt, g0, g1 = p1, p0, p1 - 1.0
        total -= math.log(pt if pt > 1e-12 else 1e-12)
        W[0] -= (lr * g0) * x
        W[1] -= (lr * g1) * x
    return total / len(order)


def top_k_select(scores, k):
    """Indices of the k best scores under the (score desc, index asc) order."""
    n = scores.shape[0]
    k = min(int(k), n)
    # stable sort on the negated scores realizes the index tie-break exactly
    return np.argsort(-scores, kind="stable")[:k].astype(np.int64, copy=False)


def top_k_batch(scores, k):
    """Row-wise top_k_select for a (Q, N) score matrix; returns (Q, k)."""
    n = scores.shape[1]
    k = min(int(k), n)
    return np.argsort(-scores, axis=1, kind="stable")[:, :k].astype(np.int64, copy=False)
