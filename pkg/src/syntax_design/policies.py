"""Recruitment policies and their end-of-trial selection rules.

Five trial designs share one interface: :func:`decide` picks the next
(subpopulation, group) to recruit and :func:`finalize` turns the final
state into a set of subpopulations declared to benefit.

=====================  ===================  =========================
kind                   sampling             inference
=====================  ===================  =========================
conventional           uniform random       naive
thresholding           adaptive (naive)     naive
synthetic-study        uniform random       synthetic
synthetic-design       minimax planning     synthetic
syntax                 adaptive (synth.)    synthetic
=====================  ===================  =========================

Every kind first recruits one patient into each (subpopulation, group) cell
in index order, so all means are defined before any adaptive rule runs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from syntax_design import kernels
from syntax_design.estimator import (
    EstimatorConfig,
    TrialState,
    UndefinedMean,
    naive_estimate,
    solve_beta,
    synthetic_estimate,
)

__all__ = [
    "PolicyKind",
    "Policy",
    "PolicyDecision",
    "SelectionResult",
    "EstimatorKind",
    "warm_start_length",
    "decide",
    "finalize",
    "syntax_indices",
    "naive_indices",
]

TIE_TOL = 1e-12


class PolicyKind(str, enum.Enum):
    SYNTAX = "syntax"
    CONVENTIONAL_STUDY = "conventional"
    THRESHOLDING_BANDITS = "thresholding"
    SYNTHETIC_STUDY = "synthetic-study"
    SYNTHETIC_DESIGN = "synthetic-design"

    @property
    def needs_lambda(self) -> bool:
        return self in _SYNTHETIC

    @property
    def label(self) -> str:
        return _LABELS[self]


_SYNTHETIC = frozenset(
    {PolicyKind.SYNTAX, PolicyKind.SYNTHETIC_STUDY, PolicyKind.SYNTHETIC_DESIGN}
)
_RANDOM = frozenset({PolicyKind.CONVENTIONAL_STUDY, PolicyKind.SYNTHETIC_STUDY})
_LABELS = {
    PolicyKind.SYNTAX: "Syntax",
    PolicyKind.CONVENTIONAL_STUDY: "Conventional study",
    PolicyKind.THRESHOLDING_BANDITS: "Thresholding bandits",
    PolicyKind.SYNTHETIC_STUDY: "Synthetic study",
    PolicyKind.SYNTHETIC_DESIGN: "Synthetic design",
}


class EstimatorKind(str, enum.Enum):
    NAIVE = "naive"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Policy:
    """A policy kind plus the estimator settings it needs."""

    kind: PolicyKind
    lam: float | None = None
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.kind.needs_lambda:
            if self.lam is None:
                raise ValueError(f"policy {self.kind.value!r} requires lambda")
            object.__setattr__(self, "lam", float(self.lam))
        elif self.lam is not None:
            raise ValueError(f"policy {self.kind.value!r} takes no lambda")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(lam=self.lam if self.lam is not None else 0.0, sigma=self.sigma)


@dataclass(frozen=True)
class PolicyDecision:
    i: int
    alpha: int


@dataclass(frozen=True, eq=False)
class SelectionResult:
    selected: frozenset
    estimates: np.ndarray
    estimator_kind: EstimatorKind


def warm_start_length(K: int) -> int:
    return 2 * K


def _argmin(values: np.ndarray) -> int:
    """Lowest flat index whose value is within TIE_TOL of the minimum."""
    flat = np.ravel(values)
    return int(np.flatnonzero(flat <= flat.min() + TIE_TOL)[0])


def naive_indices(state: TrialState) -> np.ndarray:
    """Naive sensitivity index of every subpopulation (sigma factored out)."""
    est = state.yhat_final[:, 1] - state.yhat_final[:, 0]
    return np.abs(est) / np.sqrt(1.0 / state.n0 + 1.0 / state.n1)


def _synthetic_system(state: TrialState, lam: float):
    n0 = state.n0.astype(float)
    n1 = state.n1.astype(float)
    dinv = 1.0 / (1.0 / n0 + lam / (n0 + n1))
    A = state.constraint_matrix()
    G = kernels.gram(A, dinv)
    return A, G, n0, n1


def syntax_indices(state: TrialState, lam: float):
    """Synthetic estimates, objectives (divided by sigma^2) and sensitivity indices.

    All subpopulations must have at least one sample in each group.
    """
    A, G, n0, n1 = _synthetic_system(state, lam)
    B, V, _ = kernels.solutions(G, A, n0, n1, lam)
    est = state.yhat_final[:, 1] - state.yhat_final[:, 0] @ B
    return est, V, np.abs(est) / np.sqrt(V), G


def _warm_start(state: TrialState, episode: int) -> PolicyDecision:
    return PolicyDecision(episode // 2, episode % 2)


def decide(policy: Policy, state: TrialState, episode: int, rng: np.random.Generator) -> PolicyDecision:
    """Choose who to recruit at ``episode`` (zero-based)."""
    K = state.K
    if episode < warm_start_length(K):
        return _warm_start(state, episode)
    if np.any(state.n < 1):
        cells = np.argwhere(state.n < 1)[:3].tolist()
        raise UndefinedMean(f"warm start incomplete at episode {episode}: empty cells {cells}")

    kind = policy.kind
    if kind in _RANDOM:
        cell = int(rng.integers(2 * K))
        return PolicyDecision(cell // 2, cell % 2)

    if kind is PolicyKind.THRESHOLDING_BANDITS:
        i = _argmin(naive_indices(state))
        alpha = 0 if state.n[i, 0] <= state.n[i, 1] else 1
        return PolicyDecision(i, alpha)

    lam = policy.lam
    n0 = state.n0.astype(float)
    n1 = state.n1.astype(float)
    if kind is PolicyKind.SYNTAX:
        _, _, index, G = syntax_indices(state, lam)
        target = _argmin(index)
        values = kernels.phantom(G, n0, n1, lam, np.array([target]))[0]
    elif kind is PolicyKind.SYNTHETIC_DESIGN:
        _, G, _, _ = _synthetic_system(state, lam)
        values = kernels.phantom(G, n0, n1, lam, np.arange(K)).max(axis=0)
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unknown policy kind {kind!r}")
    cell = _argmin(values)
    return PolicyDecision(cell // 2, cell % 2)


def finalize(policy: Policy, state: TrialState) -> SelectionResult:
    """Estimate every effect and select those strictly above zero."""
    short = np.flatnonzero((state.n0 < 1) | (state.n1 < 1))
    if short.size:
        i = int(short[0])
        raise UndefinedMean(
            f"subpopulation {i} has n0={state.n[i, 0]}, n1={state.n[i, 1]} at finalize"
        )
    if policy.kind.needs_lambda:
        cfg = policy.estimator_config
        estimates = np.array(
            [synthetic_estimate(state, solve_beta(state, i, cfg)) for i in range(state.K)]
        )
        kind = EstimatorKind.SYNTHETIC
    else:
        estimates = np.array([naive_estimate(state, i) for i in range(state.K)])
        kind = EstimatorKind.NAIVE
    selected = frozenset(int(i) for i in np.flatnonzero(estimates > 0))
    return SelectionResult(selected, estimates, kind)
