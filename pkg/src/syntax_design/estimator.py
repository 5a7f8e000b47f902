"""Treatment-effect estimators, their variance bound and the weight QP.

The naive estimate for subpopulation ``i`` contrasts its own treated and
control final means. A synthetic estimate replaces the control mean by a
weighted combination ``beta @ yhat0`` of control means across
subpopulations. The weights must reproduce subpopulation ``i``'s features,
its pooled pre-treatment means, and sum to one. Among such weights,
:func:`solve_beta` picks the one minimising

    V_i(beta) = sigma^2 * (1/n1_i + sum_j beta_j^2/n0_j + lam * sum_j (beta_j - [j == i])^2 / n_j)

which bounds the estimator's variance when the allocation does not depend
on observed responses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from syntax_design.env_sim import Environment

__all__ = [
    "UndefinedMean",
    "RankDeficientFactors",
    "TrialState",
    "Weights",
    "EstimatorConfig",
    "naive_estimate",
    "variance_bound",
    "trivial_weights",
    "solve_beta",
    "synthetic_estimate",
    "sensitivity_index",
    "lambda_oracle",
    "lambda_upper_bound",
]

RESIDUAL_TOL = 1e-6
SUM_TOL = 1e-8


class UndefinedMean(ValueError):
    """A quantity needed a running mean whose sample count is zero."""


class RankDeficientFactors(ValueError):
    """The pre-treatment factor matrix has no right inverse."""


@dataclass
class TrialState:
    """Everything observed so far in one trial.

    ``n[i, a]`` counts patients recruited from subpopulation ``i`` into group
    ``a``; ``yhat_final[i, a]`` is their mean final response. ``yhat_pre[:, i]``
    is the mean pre-treatment trajectory of all patients from ``i``, pooled
    over groups. Means whose count is zero hold 0.0 and must not be read.
    """

    features: np.ndarray
    n: np.ndarray
    yhat_final: np.ndarray
    yhat_pre: np.ndarray

    @classmethod
    def empty(cls, features: np.ndarray, T: int) -> "TrialState":
        features = np.asarray(features, dtype=float)
        if features.ndim != 2:
            raise ValueError("features must be a D_x x K matrix")
        K = features.shape[1]
        return cls(
            features=features,
            n=np.zeros((K, 2), dtype=np.int64),
            yhat_final=np.zeros((K, 2)),
            yhat_pre=np.zeros((T - 1, K)),
        )

    @property
    def K(self) -> int:
        return self.n.shape[0]

    @property
    def T(self) -> int:
        return self.yhat_pre.shape[0] + 1

    @property
    def n0(self) -> np.ndarray:
        return self.n[:, 0]

    @property
    def n1(self) -> np.ndarray:
        return self.n[:, 1]

    @property
    def n_total(self) -> np.ndarray:
        return self.n.sum(axis=1)

    @property
    def episodes(self) -> int:
        return int(self.n.sum())

    def record(self, i: int, alpha: int, y_pre, y_final: float) -> None:
        """Fold one observed patient into the counts and running means."""
        self.n[i, alpha] += 1
        n_i = self.n[i, 0] + self.n[i, 1]
        col = self.yhat_pre[:, i]
        col += (np.asarray(y_pre, dtype=float) - col) / n_i
        self.yhat_final[i, alpha] += (y_final - self.yhat_final[i, alpha]) / self.n[i, alpha]

    def constraint_matrix(self) -> np.ndarray:
        """Stack ``[features; pooled pre-treatment means; ones]``, one column per subpopulation."""
        return np.vstack((self.features, self.yhat_pre, np.ones((1, self.K))))

    def copy(self) -> "TrialState":
        return TrialState(
            self.features, self.n.copy(), self.yhat_final.copy(), self.yhat_pre.copy()
        )


@dataclass(frozen=True, eq=False)
class Weights:
    """Decomposition weights for one target subpopulation."""

    beta: np.ndarray
    target: int
    objective_value: float
    fallback: bool = False

    def is_trivial(self) -> bool:
        e = np.zeros_like(self.beta)
        e[self.target] = 1.0
        return bool(np.array_equal(self.beta, e))

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "target": self.target,
            "objective_value": self.objective_value,
            "fallback": self.fallback,
        }


@dataclass(frozen=True)
class EstimatorConfig:
    lam: float
    sigma: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def _counts(state: TrialState, n_override) -> np.ndarray:
    if n_override is None:
        return state.n
    n = np.asarray(n_override)
    if n.shape != state.n.shape:
        raise ValueError(f"n_override must have shape {state.n.shape}, got {n.shape}")
    return n


def naive_estimate(state: TrialState, i: int) -> float:
    n0, n1 = state.n[i]
    if n0 < 1 or n1 < 1:
        raise UndefinedMean(f"subpopulation {i} has n0={n0}, n1={n1}; both groups need a sample")
    return float(state.yhat_final[i, 1] - state.yhat_final[i, 0])


def variance_bound(beta: Weights, state: TrialState, cfg: EstimatorConfig, n_override=None) -> float:
    """Evaluate ``V_i(beta)`` at the state's counts or at ``n_override``."""
    n = _counts(state, n_override)
    i = beta.target
    b = np.asarray(beta.beta, dtype=float)
    n0 = n[:, 0]
    n1 = n[:, 1]
    if n1[i] < 1:
        raise UndefinedMean(f"target {i} has no treated sample")
    used = b != 0
    if np.any(n0[used] < 1):
        bad = np.flatnonzero(used & (n0 < 1)).tolist()
        raise UndefinedMean(f"weights use subpopulations {bad} with no control sample")
    diff = b.copy()
    diff[i] -= 1.0
    moved = diff != 0
    n_tot = n0 + n1
    if np.any(n_tot[moved] < 1):
        bad = np.flatnonzero(moved & (n_tot < 1)).tolist()
        raise UndefinedMean(f"weights use subpopulations {bad} with no samples")
    epistemic = 1.0 / n1[i] + np.sum(b[used] ** 2 / n0[used])
    representation = cfg.lam * np.sum(diff[moved] ** 2 / n_tot[moved])
    return float(cfg.sigma ** 2 * (epistemic + representation))


def trivial_weights(state: TrialState, i: int, cfg: EstimatorConfig, n_override=None) -> Weights:
    """The indicator decomposition of ``i`` as itself."""
    beta = np.zeros(state.K)
    beta[i] = 1.0
    w = Weights(beta, i, 0.0)
    return Weights(beta, i, variance_bound(w, state, cfg, n_override))


def solve_beta(state: TrialState, i: int, cfg: EstimatorConfig, n_override=None) -> Weights:
    """Minimise ``V_i`` over the affine feasible set by solving its KKT system.

    Only subpopulations with a control sample and a defined pre-treatment
    mean take part; the rest are pinned to zero weight. The solve uses a
    minimum-norm least-squares factorisation, so redundant constraint rows
    are harmless. If the result misses the constraints by more than
    ``RESIDUAL_TOL`` or does not improve on the indicator, the indicator is
    returned with ``fallback=True``.
    """
    n = _counts(state, n_override)
    n0 = n[:, 0].astype(float)
    n1 = n[:, 1].astype(float)
    if n0[i] < 1 or n1[i] < 1:
        raise UndefinedMean(f"subpopulation {i} has n0={n0[i]:g}, n1={n1[i]:g}; both groups need a sample")
    if state.n_total[i] < 1:
        raise UndefinedMean(f"subpopulation {i} has no observed pre-treatment mean")
    n_tot = n0 + n1
    active = np.flatnonzero((n0 >= 1) & (state.n_total >= 1))
    pos = int(np.searchsorted(active, i))
    A = state.constraint_matrix()[:, active]
    ka, m = active.size, A.shape[0]

    d = 1.0 / n0[active] + cfg.lam / n_tot[active]
    kkt = np.zeros((ka + m, ka + m))
    kkt[np.arange(ka), np.arange(ka)] = 2.0 * d
    kkt[:ka, ka:] = A.T
    kkt[ka:, :ka] = A
    rhs = np.zeros(ka + m)
    rhs[pos] = 2.0 * cfg.lam / n_tot[i]
    rhs[ka:] = A[:, pos]

    trivial = trivial_weights(state, i, cfg, n_override)
    try:
        sol = scipy.linalg.lstsq(kkt, rhs, lapack_driver="gelsd")[0]
    except (np.linalg.LinAlgError, ValueError):
        return Weights(trivial.beta, i, trivial.objective_value, fallback=True)
    beta = np.zeros(state.K)
    beta[active] = sol[:ka]
    if not np.all(np.isfinite(beta)):
        return Weights(trivial.beta, i, trivial.objective_value, fallback=True)
    resid = np.linalg.norm(A @ sol[:ka] - A[:, pos])
    value = variance_bound(Weights(beta, i, 0.0), state, cfg, n_override)
    if resid > RESIDUAL_TOL or value > trivial.objective_value:
        return Weights(trivial.beta, i, trivial.objective_value, fallback=True)
    return Weights(beta, i, value)


def synthetic_estimate(state: TrialState, beta: Weights) -> float:
    i = beta.target
    b = np.asarray(beta.beta, dtype=float)
    if state.n[i, 1] < 1:
        raise UndefinedMean(f"target {i} has no treated sample")
    used = np.flatnonzero(b != 0)
    if np.any(state.n[used, 0] < 1):
        bad = used[state.n[used, 0] < 1].tolist()
        raise UndefinedMean(f"weights use subpopulations {bad} with no control sample")
    control = np.dot(b[used], state.yhat_final[used, 0])
    return float(state.yhat_final[i, 1] - control)


def sensitivity_index(state: TrialState, i: int, cfg: EstimatorConfig) -> float:
    w = solve_beta(state, i, cfg)
    return abs(synthetic_estimate(state, w)) / np.sqrt(w.objective_value)


def _factor_blocks(env: Environment):
    M = np.asarray(env.M, dtype=float)
    return M[:, :-1], M[:, -1]


def lambda_oracle(env: Environment) -> float:
    """Squared norm of the minimum-norm ``v`` with ``M_pre v = mu_T``.

    Reads latent factors; only the harness may call it.
    """
    M_pre, mu_T = _factor_blocks(env)
    if np.linalg.matrix_rank(M_pre) < M_pre.shape[0]:
        raise RankDeficientFactors(
            f"pre-treatment factor matrix ({M_pre.shape[0]}x{M_pre.shape[1]}) is not full row rank; "
            "fall back to a configured lambda"
        )
    v = M_pre.T @ np.linalg.solve(M_pre @ M_pre.T, mu_T)
    return float(v @ v)


def lambda_upper_bound(env: Environment) -> float:
    """``(|mu_T| / s_min(M_pre))^2``, an upper bound on :func:`lambda_oracle`."""
    M_pre, mu_T = _factor_blocks(env)
    s = np.linalg.svd(M_pre, compute_uv=False)
    s_min = s[min(M_pre.shape) - 1]
    if s_min == 0:
        return float("inf")
    return float((np.linalg.norm(mu_T) / s_min) ** 2)
