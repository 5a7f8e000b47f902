"""NumPy implementation of the synthetic-weight kernels.

Every subpopulation's weight problem shares one constraint matrix ``A``
(features, pooled pre-treatment means, a row of ones) and one diagonal
quadratic form ``D_j = 1/n0_j + lam/n_j``. The minimiser for target ``i`` is

    beta_i = D^-1 (g_i + c_i * A'^T S^-1 a'_i),   S = A' D^-1 A'^T

where ``A'`` is an orthonormal basis of the row space of ``A``,
``g_i = (lam/n_i) e_i`` and ``c_i = (1/n0_i) / D_i``. Everything therefore
follows from the K x K matrix ``G = A'^T S^-1 A'``, and adding one phantom
sample to subpopulation ``j`` is a rank-one change of ``S`` handled by
Sherman-Morrison.

All objective values are returned divided by sigma^2.

The compiled ``_core`` module exposes the same three functions.
"""

import numpy as np

RANK_TOL = 1e-10
RESIDUAL_TOL = 1e-6


def gram(A, dinv):
    """Return ``G = A'^T (A' diag(dinv) A'^T)^-1 A'`` for the row space of ``A``."""
    A = np.asarray(A, dtype=float)
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > s[0] * RANK_TOL)) if s.size and s[0] > 0 else 0
    Q = vt[:rank]
    S = (Q * dinv) @ Q.T
    L = np.linalg.cholesky(S)
    Y = np.linalg.solve(L, Q)
    return Y.T @ Y


def solutions(G, A, n0, n1, lam):
    """Optimal weights and objectives for every target.

    Returns ``(B, V, fallback)``: column ``i`` of ``B`` is the minimiser for
    target ``i``, ``V[i]`` its objective and ``fallback[i]`` marks targets
    replaced by the indicator because the solution failed the residual or
    dominance check.
    """
    n0 = np.asarray(n0, dtype=float)
    n1 = np.asarray(n1, dtype=float)
    n = n0 + n1
    gi = lam / n
    dinv = 1.0 / (1.0 / n0 + gi)
    c = dinv / n0
    diag = np.diagonal(G)
    V = 1.0 / n1 + gi - gi * gi * dinv + c * c * diag
    B = dinv[:, None] * (G * c[None, :])
    B[np.diag_indices_from(B)] += dinv * gi

    trivial = 1.0 / n1 + 1.0 / n0
    resid = np.linalg.norm(np.asarray(A) @ B - A, axis=0)
    fallback = (resid > RESIDUAL_TOL) | (V > trivial)
    if fallback.any():
        idx = np.flatnonzero(fallback)
        B[:, idx] = 0.0
        B[idx, idx] = 1.0
        V[idx] = trivial[idx]
    return B, V, fallback


def phantom(G, n0, n1, lam, targets):
    """Objectives after one extra sample, for each target and each (j, alpha).

    Returns an array of shape ``(len(targets), K, 2)``; entry ``[t, j, a]`` is
    target ``targets[t]``'s minimal objective if one more patient from
    subpopulation ``j`` were assigned to group ``a``.
    """
    n0 = np.asarray(n0, dtype=float)
    n1 = np.asarray(n1, dtype=float)
    targets = np.asarray(targets, dtype=np.intp)
    n = n0 + n1
    gi = lam / n
    dinv = 1.0 / (1.0 / n0 + gi)
    c = dinv / n0
    diag = np.diagonal(G)
    Gt = G[targets]
    Gtt = diag[targets]

    base_const = (1.0 / n1 + gi - gi * gi * dinv)[targets]
    base_triv = (1.0 / n1 + 1.0 / n0)[targets]
    ct2 = (c * c)[targets]

    nt, K = Gt.shape
    out = np.empty((nt, K, 2))
    rows = np.arange(nt)
    n_plus = n + 1.0
    gi_plus = lam / n_plus
    for alpha in (0, 1):
        n0p = n0 + (alpha == 0)
        n1p = n1 + (alpha == 1)
        dinvp = 1.0 / (1.0 / n0p + gi_plus)
        delta = dinvp - dinv
        q = Gtt[:, None] - delta[None, :] * Gt * Gt / (1.0 + delta * diag)[None, :]
        val = base_const[:, None] + ct2[:, None] * q
        val = np.minimum(val, base_triv[:, None])

        # the target itself receives the sample: its own counts change too
        dp = dinvp[targets]
        q_self = Gtt / (1.0 + delta[targets] * Gtt)
        gp = gi_plus[targets]
        cp = dp / n0p[targets]
        self_val = 1.0 / n1p[targets] + gp - gp * gp * dp + cp * cp * q_self
        self_triv = 1.0 / n1p[targets] + 1.0 / n0p[targets]
        val[rows, targets] = np.minimum(self_val, self_triv)
        out[:, :, alpha] = val
    return out
