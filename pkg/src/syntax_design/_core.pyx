# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled synthetic-weight kernels.

Same contract as ``_kernels_py``; the row space of the constraint matrix is
orthonormalised with two-pass modified Gram-Schmidt instead of an SVD.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

cdef double RANK_TOL = 1e-10
cdef double RESIDUAL_TOL = 1e-6


cdef int _orthonormal_rows(const double[:, :] A, double[:, ::1] Q):
    """Write an orthonormal basis of A's row space into Q; return its size."""
    cdef Py_ssize_t m = A.shape[0], K = A.shape[1]
    cdef Py_ssize_t k, p, j, rank = 0
    cdef int sweep
    cdef double nrm0, nrm, dot, scale = 0.0
    for k in range(m):
        nrm0 = 0.0
        for j in range(K):
            nrm0 += A[k, j] * A[k, j]
        if nrm0 > scale:
            scale = nrm0
    scale = sqrt(scale)
    for k in range(m):
        for j in range(K):
            Q[rank, j] = A[k, j]
        for sweep in range(2):
            for p in range(rank):
                dot = 0.0
                for j in range(K):
                    dot += Q[p, j] * Q[rank, j]
                for j in range(K):
                    Q[rank, j] -= dot * Q[p, j]
        nrm = 0.0
        for j in range(K):
            nrm += Q[rank, j] * Q[rank, j]
        nrm = sqrt(nrm)
        if nrm > RANK_TOL * scale and nrm > 0.0:
            for j in range(K):
                Q[rank, j] /= nrm
            rank += 1
    return rank


def gram(A, dinv):
    cdef double[:, :] Av = np.asarray(A, dtype=np.float64)
    cdef double[::1] d = np.ascontiguousarray(dinv, dtype=np.float64)
    cdef Py_ssize_t m = Av.shape[0], K = Av.shape[1]
    cdef double[:, ::1] Q = np.empty((m, K))
    cdef int r = _orthonormal_rows(Av, Q)
    cdef double[:, ::1] L = np.zeros((r, r))
    cdef Py_ssize_t a, b, j, p
    cdef double acc

    # S = Q diag(d) Q^T, factored in place as L L^T
    for a in range(r):
        for b in range(a + 1):
            acc = 0.0
            for j in range(K):
                acc += Q[a, j] * d[j] * Q[b, j]
            L[a, b] = acc
    for a in range(r):
        for b in range(a + 1):
            acc = L[a, b]
            for p in range(b):
                acc -= L[a, p] * L[b, p]
            if a == b:
                if acc <= 0.0:
                    raise np.linalg.LinAlgError("constraint Gram matrix is not positive definite")
                L[a, a] = sqrt(acc)
            else:
                L[a, b] = acc / L[b, b]

    # Y = L^-1 Q by forward substitution, then G = Y^T Y
    cdef double[:, ::1] Y = np.empty((r, K))
    for j in range(K):
        for a in range(r):
            acc = Q[a, j]
            for p in range(a):
                acc -= L[a, p] * Y[p, j]
            Y[a, j] = acc / L[a, a]
    out = np.empty((K, K))
    cdef double[:, ::1] G = out
    cdef Py_ssize_t i
    for i in range(K):
        for j in range(i + 1):
            acc = 0.0
            for a in range(r):
                acc += Y[a, i] * Y[a, j]
            G[i, j] = acc
            G[j, i] = acc
    return out


def solutions(G, A, n0, n1, double lam):
    cdef double[:, ::1] Gv = np.ascontiguousarray(G, dtype=np.float64)
    cdef double[:, :] Av = np.asarray(A, dtype=np.float64)
    cdef double[::1] c0 = np.ascontiguousarray(n0, dtype=np.float64)
    cdef double[::1] c1 = np.ascontiguousarray(n1, dtype=np.float64)
    cdef Py_ssize_t K = Gv.shape[0], m = Av.shape[0]
    cdef Py_ssize_t i, j, k
    B_arr = np.empty((K, K))
    V_arr = np.empty(K)
    fb_arr = np.zeros(K, dtype=bool)
    cdef double[:, ::1] B = B_arr
    cdef double[::1] V = V_arr
    cdef cnp.npy_bool[::1] fb = fb_arr
    cdef double[::1] dinv = np.empty(K)
    cdef double[::1] gi = np.empty(K)
    cdef double[::1] c = np.empty(K)
    cdef double ci, acc, resid, triv

    for j in range(K):
        gi[j] = lam / (c0[j] + c1[j])
        dinv[j] = 1.0 / (1.0 / c0[j] + gi[j])
        c[j] = dinv[j] / c0[j]
    for i in range(K):
        ci = c[i]
        V[i] = 1.0 / c1[i] + gi[i] - gi[i] * gi[i] * dinv[i] + ci * ci * Gv[i, i]
        for j in range(K):
            B[j, i] = dinv[j] * (Gv[j, i] * ci)
        B[i, i] += dinv[i] * gi[i]

        resid = 0.0
        for k in range(m):
            acc = -Av[k, i]
            for j in range(K):
                acc += Av[k, j] * B[j, i]
            resid += acc * acc
        triv = 1.0 / c1[i] + 1.0 / c0[i]
        if sqrt(resid) > RESIDUAL_TOL or V[i] > triv:
            fb[i] = True
            for j in range(K):
                B[j, i] = 0.0
            B[i, i] = 1.0
            V[i] = triv
    return B_arr, V_arr, fb_arr


def phantom(G, n0, n1, double lam, targets):
    cdef double[:, ::1] Gv = np.ascontiguousarray(G, dtype=np.float64)
    cdef double[::1] c0 = np.ascontiguousarray(n0, dtype=np.float64)
    cdef double[::1] c1 = np.ascontiguousarray(n1, dtype=np.float64)
    cdef cnp.intp_t[::1] tg = np.ascontiguousarray(targets, dtype=np.intp)
    cdef Py_ssize_t K = Gv.shape[0], nt = tg.shape[0]
    cdef Py_ssize_t t, i, j
    cdef int alpha
    out_arr = np.empty((nt, K, 2))
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] dinv = np.empty(K)
    cdef double[:, ::1] delta = np.empty((2, K))
    cdef double[:, ::1] dinvp = np.empty((2, K))
    cdef double gi, gp, n0p, n1p, base, triv, ct2, q, val, g_ij, cp

    for j in range(K):
        dinv[j] = 1.0 / (1.0 / c0[j] + lam / (c0[j] + c1[j]))
        gp = lam / (c0[j] + c1[j] + 1.0)
        dinvp[0, j] = 1.0 / (1.0 / (c0[j] + 1.0) + gp)
        dinvp[1, j] = 1.0 / (1.0 / c0[j] + gp)
        delta[0, j] = dinvp[0, j] - dinv[j]
        delta[1, j] = dinvp[1, j] - dinv[j]

    for t in range(nt):
        i = tg[t]
        gi = lam / (c0[i] + c1[i])
        base = 1.0 / c1[i] + gi - gi * gi * dinv[i]
        triv = 1.0 / c1[i] + 1.0 / c0[i]
        ct2 = dinv[i] / c0[i]
        ct2 = ct2 * ct2
        for alpha in range(2):
            for j in range(K):
                if j == i:
                    n0p = c0[i] + (1.0 if alpha == 0 else 0.0)
                    n1p = c1[i] + (1.0 if alpha == 1 else 0.0)
                    gp = lam / (n0p + n1p)
                    q = Gv[i, i] / (1.0 + delta[alpha, i] * Gv[i, i])
                    cp = dinvp[alpha, i] / n0p
                    val = 1.0 / n1p + gp - gp * gp * dinvp[alpha, i] + cp * cp * q
                    if val > 1.0 / n1p + 1.0 / n0p:
                        val = 1.0 / n1p + 1.0 / n0p
                else:
                    g_ij = Gv[i, j]
                    q = Gv[i, i] - delta[alpha, j] * g_ij * g_ij / (1.0 + delta[alpha, j] * Gv[j, j])
                    val = base + ct2 * q
                    if val > triv:
                        val = triv
                out[t, j, alpha] = val
    return out_arr
