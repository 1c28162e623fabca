# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: fused MLP forward/backward and the partition-table fill.

Mirrors ``mtldiff._kernels_py`` exactly; see that module for the contracts.
Matrix products go through BLAS dgemm.  All matrices are C-contiguous
float64; the Fortran-order calls below are the standard row-major trick
(compute the transposed product so no copies are needed).
"""

from libc.math cimport exp, fabs, INFINITY

import numpy as np
from scipy.linalg.cython_blas cimport dgemm


cdef inline double _sigmoid(double z) noexcept nogil:
    cdef double e
    if z >= 0.0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef void _linear(double[:, ::1] A, double[:, ::1] W, double[::1] b,
                  double[:, ::1] Z) noexcept nogil:
    # Z (n, dout) = A (n, din) @ W(dout, din)^T + b
    cdef int n = A.shape[0], din = A.shape[1], dout = W.shape[0]
    cdef double one = 1.0, zero = 0.0
    cdef char tT = b'T', tN = b'N'
    cdef int r, c
    dgemm(&tT, &tN, &dout, &n, &din, &one, &W[0, 0], &din,
          &A[0, 0], &din, &zero, &Z[0, 0], &dout)
    for r in range(n):
        for c in range(dout):
            Z[r, c] += b[c]


cdef void _silu(double[:, ::1] Z, double[:, ::1] A) noexcept nogil:
    cdef int r, c
    cdef double z
    for r in range(Z.shape[0]):
        for c in range(Z.shape[1]):
            z = Z[r, c]
            A[r, c] = z * _sigmoid(z)


def mlp_forward(weights, X):
    cdef int L = len(weights)
    cdef int i, n = X.shape[0]
    X = np.ascontiguousarray(X, dtype=np.float64)
    cache = [X]
    A = X
    Z = None
    for i in range(L):
        W, b = weights[i]
        Z = np.empty((n, W.shape[0]), dtype=np.float64)
        _linear(A, W, b, Z)
        cache.append(Z)
        if i < L - 1:
            A = np.empty_like(Z)
            _silu(Z, A)
            cache.append(A)
    return Z, cache


cdef void _dsilu_inplace(double[:, ::1] Z, double[:, ::1] dA,
                         double[:, ::1] dZ) noexcept nogil:
    cdef int r, c
    cdef double z, s
    for r in range(Z.shape[0]):
        for c in range(Z.shape[1]):
            z = Z[r, c]
            s = _sigmoid(z)
            dZ[r, c] = dA[r, c] * (s * (1.0 + z * (1.0 - s)))


cdef void _weight_grad(double[:, ::1] dZ, double[:, ::1] A_prev,
                       double[:, ::1] dW, double[::1] db) noexcept nogil:
    # dW (dout, din) = dZ(n, dout)^T @ A_prev (n, din); db = column sums of dZ
    cdef int n = dZ.shape[0], dout = dZ.shape[1], din = A_prev.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char tT = b'T', tN = b'N'
    cdef int r, c
    dgemm(&tN, &tT, &din, &dout, &n, &one, &A_prev[0, 0], &din,
          &dZ[0, 0], &dout, &zero, &dW[0, 0], &din)
    for c in range(dout):
        db[c] = 0.0
    for r in range(n):
        for c in range(dout):
            db[c] += dZ[r, c]


cdef void _input_grad(double[:, ::1] dZ, double[:, ::1] W,
                      double[:, ::1] dA) noexcept nogil:
    # dA (n, din) = dZ (n, dout) @ W (dout, din)
    cdef int n = dZ.shape[0], dout = dZ.shape[1], din = W.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char tN = b'N'
    dgemm(&tN, &tN, &din, &n, &dout, &one, &W[0, 0], &din,
          &dZ[0, 0], &dout, &zero, &dA[0, 0], &din)


def mlp_backward(weights, cache, dY):
    cdef int L = len(weights)
    cdef int i, n = dY.shape[0]
    grads = [None] * L
    dZ = np.ascontiguousarray(dY, dtype=np.float64)
    dA = None
    for i in range(L - 1, -1, -1):
        W, b = weights[i]
        if i < L - 1:
            dZ = np.empty_like(dA)
            _dsilu_inplace(cache[2 * i + 1], dA, dZ)
        A_prev = cache[2 * i]
        dW = np.empty_like(W)
        db = np.empty_like(b)
        _weight_grad(dZ, A_prev, dW, db)
        if i > 0:
            dA = np.empty((n, W.shape[1]), dtype=np.float64)
            _input_grad(dZ, W, dA)
        grads[i] = (dW, db)
    return grads


def dp_fill_absdev(double[::1] v, double[::1] cs, int T, int k,
                   int m_lo, int m_hi,
                   double[:, ::1] D, double[:, ::1] D2, long long[:, ::1] S):
    cdef int m, i, j, j_lo, j_hi, c, size, best_j
    cdef int i_hi
    cdef double dp, left, right, cand, cand2, best, best2
    with nogil:
        for m in range(1, k + 1):
            i_hi = m * m_hi
            if i_hi > T:
                i_hi = T
            for i in range(m * m_lo, i_hi + 1):
                j_lo = 1 + (m - 1) * m_lo
                if i + 1 - m_hi > j_lo:
                    j_lo = i + 1 - m_hi
                j_hi = i + 1 - m_lo
                if 1 + (m - 1) * m_hi < j_hi:
                    j_hi = 1 + (m - 1) * m_hi
                best = INFINITY
                best2 = INFINITY
                best_j = 0
                for j in range(j_lo, j_hi + 1):
                    dp = D[j - 1, m - 1]
                    if dp == INFINITY:
                        continue
                    c = (j + i) >> 1
                    left = (c - j + 1) * v[c] - (cs[c] - cs[j - 1])
                    right = (cs[i] - cs[c]) - (i - c) * v[c]
                    cand = dp + fabs(left) + fabs(right)
                    size = i - j + 1
                    cand2 = D2[j - 1, m - 1] + <double> size * <double> size
                    if cand < best or (cand == best and cand2 < best2):
                        best = cand
                        best2 = cand2
                        best_j = j
                if best_j > 0:
                    D[i, m] = best
                    D2[i, m] = best2
                    S[i, m] = best_j


def dp_fill_rowsum(double[:, ::1] P, int T, int k, int m_lo, int m_hi,
                   double[:, ::1] D, double[:, ::1] D2, long long[:, ::1] S):
    cdef int m, i, j, j_lo, j_hi, c, size, best_j
    cdef int i_hi
    cdef double dp, cand, cand2, best, best2
    with nogil:
        for m in range(1, k + 1):
            i_hi = m * m_hi
            if i_hi > T:
                i_hi = T
            for i in range(m * m_lo, i_hi + 1):
                j_lo = 1 + (m - 1) * m_lo
                if i + 1 - m_hi > j_lo:
                    j_lo = i + 1 - m_hi
                j_hi = i + 1 - m_lo
                if 1 + (m - 1) * m_hi < j_hi:
                    j_hi = 1 + (m - 1) * m_hi
                best = INFINITY
                best2 = INFINITY
                best_j = 0
                for j in range(j_lo, j_hi + 1):
                    dp = D[j - 1, m - 1]
                    if dp == INFINITY:
                        continue
                    c = (j + i) >> 1
                    cand = dp - (P[c, i] - P[c, j - 1])
                    size = i - j + 1
                    cand2 = D2[j - 1, m - 1] + <double> size * <double> size
                    if cand < best or (cand == best and cand2 < best2):
                        best = cand
                        best2 = cand2
                        best_j = j
                if best_j > 0:
                    D[i, m] = best
                    D2[i, m] = best2
                    S[i, m] = best_j
