"""Numpy reference implementations of the performance-critical kernels.

The compiled extension (``mtldiff._core``) exposes the same four functions
with identical semantics; ``mtldiff._backend`` picks one implementation at
import time.  Keep the arithmetic here structurally aligned with the C code
so the two backends agree to rounding error (and exactly, for the integer
bookkeeping in the partition tables).
"""

import numpy as np
from scipy.special import expit


def mlp_forward(weights, X):
    """Run the fully-connected stack on a batch.

    ``weights`` is a list of ``(W, b)`` pairs with ``W`` of shape
    ``(fan_out, fan_in)``.  Hidden layers use the SiLU activation; the last
    layer is affine.  Returns ``(Y, cache)`` where ``cache`` interleaves layer
    inputs and pre-activations for the matching backward pass.
    """
    cache = [X]
    A = X
    last = len(weights) - 1
    for i, (W, b) in enumerate(weights):
        Z = A @ W.T + b
        cache.append(Z)
        if i < last:
            A = Z * expit(Z)
            cache.append(A)
    return cache[-1], cache


def mlp_backward(weights, cache, dY):
    """Backpropagate ``dY`` through a cached forward pass.

    Returns per-layer ``(dW, db)`` pairs in layer order.
    """
    L = len(weights)
    grads = [None] * L
    dZ = dY
    dA = None
    for i in range(L - 1, -1, -1):
        if i < L - 1:
            Z = cache[2 * i + 1]
            s = expit(Z)
            dZ = dA * (s * (1.0 + Z * (1.0 - s)))
        A_prev = cache[2 * i]
        dW = dZ.T @ A_prev
        db = dZ.sum(axis=0)
        if i > 0:
            dA = dZ @ weights[i][0]
        grads[i] = (dW, db)
    return grads


def dp_fill_absdev(v, cs, T, k, m_lo, m_hi, D, D2, S):
    """Fill the partition tables for absolute-deviation segment costs.

    ``v[t]`` is the per-timestep value (index 0 unused) and ``cs`` its prefix
    sum, so a segment's cost around its center decomposes into two prefix
    differences.  ``D`` holds the best total cost for the first ``i``
    timesteps split into ``m`` segments, ``D2`` the sum of squared segment
    sizes used to break cost ties in favour of balanced partitions, and ``S``
    the chosen left boundary.  Tables must arrive prefilled with ``inf``
    (``D[0, 0] = D2[0, 0] = 0``) and are filled in place.
    """
    for m in range(1, k + 1):
        i_hi = min(m * m_hi, T)
        for i in range(m * m_lo, i_hi + 1):
            j_lo = max(1 + (m - 1) * m_lo, i + 1 - m_hi)
            j_hi = min(i + 1 - m_lo, 1 + (m - 1) * m_hi)
            if j_hi < j_lo:
                continue
            j = np.arange(j_lo, j_hi + 1)
            dp = D[j - 1, m - 1]
            ok = np.isfinite(dp)
            if not ok.any():
                continue
            j = j[ok]
            dp = dp[ok]
            c = (j + i) // 2
            left = (c - j + 1) * v[c] - (cs[c] - cs[j - 1])
            right = (cs[i] - cs[c]) - (i - c) * v[c]
            cand = dp + np.abs(left) + np.abs(right)
            size = i - j + 1
            cand2 = D2[j - 1, m - 1] + size.astype(np.float64) ** 2
            best = cand.min()
            ties = np.flatnonzero(cand == best)
            pick = ties[np.argmin(cand2[ties])]
            D[i, m] = cand[pick]
            D2[i, m] = cand2[pick]
            S[i, m] = j[pick]


def dp_fill_rowsum(P, T, k, m_lo, m_hi, D, D2, S):
    """Fill the partition tables for row-sum segment costs.

    ``P[r, t]`` is the prefix sum over columns of a score matrix, so the cost
    of segment ``[j, i]`` with center ``c`` is ``-(P[c, i] - P[c, j - 1])``
    (larger scores make a segment cheaper).  Table conventions match
    :func:`dp_fill_absdev`.
    """
    for m in range(1, k + 1):
        i_hi = min(m * m_hi, T)
        for i in range(m * m_lo, i_hi + 1):
            j_lo = max(1 + (m - 1) * m_lo, i + 1 - m_hi)
            j_hi = min(i + 1 - m_lo, 1 + (m - 1) * m_hi)
            if j_hi < j_lo:
                continue
            j = np.arange(j_lo, j_hi + 1)
            dp = D[j - 1, m - 1]
            ok = np.isfinite(dp)
            if not ok.any():
                continue
            j = j[ok]
            dp = dp[ok]
            c = (j + i) // 2
            cand = dp - (P[c, i] - P[c, j - 1])
            size = i - j + 1
            cand2 = D2[j - 1, m - 1] + size.astype(np.float64) ** 2
            best = cand.min()
            ties = np.flatnonzero(cand == best)
            pick = ties[np.argmin(cand2[ties])]
            D[i, m] = cand[pick]
            D2[i, m] = cand2[pick]
            S[i, m] = j[pick]
