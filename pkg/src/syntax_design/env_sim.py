"""Ground-truth trial environments and noisy patient responses.

An environment follows a linear factor model: the untreated mean response of
subpopulation ``i`` at time ``t`` is ``delta[t] + W[:, t] @ X[:, i] + M[:, t] @ Z[:, i]``.
The final step ``T`` is post-treatment; a treated patient's final response is
shifted by ``r[i]``.

Subpopulation and time indices are zero-based throughout the package.

Only this module and :mod:`syntax_design.harness` touch latent quantities
(``Z``, ``delta``, ``W``, ``M``, ``r``). Policies and estimators see a
:class:`~syntax_design.estimator.TrialState`, which carries the observable
features and nothing else from the environment.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

__all__ = [
    "ConfigError",
    "FactorRegime",
    "Mismatch",
    "SimConfig",
    "Environment",
    "regime_multipliers",
    "sample_unit_ball",
    "generate_environment",
    "mean_response",
    "sample_episode",
    "true_positive_set",
    "environment_rng",
    "environment_seed",
    "run_rngs",
]


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


class FactorRegime(str, enum.Enum):
    DIMINISHING = "diminishing"
    INCREASING = "increasing"


class Mismatch(str, enum.Enum):
    NONE = "none"
    SQUARED_FEATURES = "squared"
    FULL_RANK_FACTORS = "fullrank"


@dataclass(frozen=True)
class SimConfig:
    """Shape and randomness of a simulated trial world.

    With ``mismatch=FULL_RANK_FACTORS`` the latent dimension is forced to
    ``T`` regardless of the ``D_z`` passed in.
    """

    K: int = 25
    T: int = 5
    D_x: int = 2
    D_z: int = 2
    sigma: float = 1.0
    factor_regime: FactorRegime = FactorRegime.DIMINISHING
    mismatch: Mismatch = Mismatch.NONE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "factor_regime", FactorRegime(self.factor_regime))
        object.__setattr__(self, "mismatch", Mismatch(self.mismatch))
        if self.mismatch is Mismatch.FULL_RANK_FACTORS:
            object.__setattr__(self, "D_z", self.T)
        self.validate()

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigError(f"K >= 2 required, got K={self.K}")
        if self.T < 2:
            raise ConfigError(f"T >= 2 required, got T={self.T}")
        if self.D_x < 1:
            raise ConfigError(f"D_x >= 1 required, got D_x={self.D_x}")
        if self.D_z < 1:
            raise ConfigError(f"D_z >= 1 required, got D_z={self.D_z}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma > 0 required, got sigma={self.sigma}")
        if self.mismatch is not Mismatch.FULL_RANK_FACTORS:
            if self.D_x + self.D_z >= self.K:
                raise ConfigError(
                    f"D_x + D_z < K required, got D_x={self.D_x}, D_z={self.D_z}, K={self.K}"
                )
            if self.T <= self.D_z:
                raise ConfigError(f"T > D_z required, got T={self.T}, D_z={self.D_z}")

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "T": self.T,
            "D_x": self.D_x,
            "D_z": self.D_z,
            "sigma": self.sigma,
            "factor_regime": self.factor_regime.value,
            "mismatch": self.mismatch.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown sim config keys: {sorted(unknown)}")
        return cls(**data)

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True, eq=False)
class Environment:
    """Immutable ground truth for one simulated trial world.

    Matrices are stored column-per-entity: ``X[:, i]`` is subpopulation
    ``i``'s feature vector and ``W[:, t]`` the feature weights at time ``t``.
    """

    X: np.ndarray
    Z: np.ndarray
    delta: np.ndarray
    W: np.ndarray
    M: np.ndarray
    r: np.ndarray
    sigma: float
    mismatch: Mismatch = Mismatch.NONE
    factor_regime: FactorRegime = FactorRegime.DIMINISHING
    seed: int | None = field(default=None)

    def __post_init__(self):
        for name in ("X", "Z", "delta", "W", "M", "r"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "mismatch", Mismatch(self.mismatch))
        object.__setattr__(self, "factor_regime", FactorRegime(self.factor_regime))

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def T(self) -> int:
        return self.delta.shape[0]

    @property
    def features(self) -> np.ndarray:
        """The observable feature matrix, the only part policies may read."""
        return self.X

    @cached_property
    def means(self) -> np.ndarray:
        """K x T matrix of untreated mean responses."""
        X = self.X ** 2 if self.mismatch is Mismatch.SQUARED_FEATURES else self.X
        out = self.delta[None, :] + X.T @ self.W + self.Z.T @ self.M
        out.setflags(write=False)
        return out

    def to_json(self) -> str:
        doc = {
            "X": self.X.tolist(),
            "Z": self.Z.tolist(),
            "delta": self.delta.tolist(),
            "W": self.W.tolist(),
            "M": self.M.tolist(),
            "r": self.r.tolist(),
            "sigma": self.sigma,
            "mismatch": self.mismatch.value,
            "factor_regime": self.factor_regime.value,
            "seed": self.seed,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Environment":
        doc = json.loads(text)
        for name in ("X", "Z", "W", "M"):
            doc[name] = np.array(doc[name], dtype=float).reshape(len(doc[name]), -1)
        return cls(**doc)


def regime_multipliers(regime: FactorRegime, T: int) -> np.ndarray:
    """Per-step scale applied to the factor directions, indexed ``t = 0..T-1``."""
    expo = np.arange(1, T + 1) - T  # t - T for one-based t
    if FactorRegime(regime) is FactorRegime.DIMINISHING:
        return 2.0 - 10.0 ** expo
    return 10.0 ** expo


def sample_unit_ball(rng: np.random.Generator, dim: int, size: int) -> np.ndarray:
    """Draw ``size`` points uniformly from the unit ball of R^dim, as columns."""
    g = rng.standard_normal((dim, size))
    g /= np.linalg.norm(g, axis=0, keepdims=True)
    radius = rng.random(size) ** (1.0 / dim)
    return g * radius


def generate_environment(cfg: SimConfig, rng: np.random.Generator | None = None) -> Environment:
    """Sample a fresh environment; deterministic given ``cfg.seed`` when ``rng`` is None."""
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    K, T = cfg.K, cfg.T
    X = rng.standard_normal((cfg.D_x, K))
    Z = rng.standard_normal((cfg.D_z, K))
    delta = rng.standard_normal(T)
    W = sample_unit_ball(rng, cfg.D_x, T)
    M = sample_unit_ball(rng, cfg.D_z, T) * regime_multipliers(cfg.factor_regime, T)
    r = rng.standard_normal(K)
    return Environment(
        X=X, Z=Z, delta=delta, W=W, M=M, r=r, sigma=cfg.sigma,
        mismatch=cfg.mismatch, factor_regime=cfg.factor_regime, seed=cfg.seed,
    )


def _check_index(env: Environment, i: int) -> None:
    if not 0 <= i < env.K:
        raise IndexError(f"subpopulation index {i} out of range [0, {env.K})")


def mean_response(env: Environment, i: int, t: int) -> float:
    _check_index(env, i)
    if not 0 <= t < env.T:
        raise IndexError(f"time index {t} out of range [0, {env.T})")
    return float(env.means[i, t])


def sample_episode(env: Environment, i: int, alpha: int, rng: np.random.Generator):
    """Draw one recruited patient's responses.

    Returns ``(y_pre, y_final)`` with ``y_pre`` of length ``T - 1``.
    """
    _check_index(env, i)
    if alpha not in (0, 1):
        raise ValueError(f"alpha must be 0 or 1, got {alpha!r}")
    y = env.means[i] + env.sigma * rng.standard_normal(env.T)
    if alpha:
        y[-1] += env.r[i]
    return y[:-1], float(y[-1])


def true_positive_set(env: Environment) -> frozenset[int]:
    return frozenset(int(i) for i in np.flatnonzero(env.r > 0))


# Named RNG streams. Each entry of ``spawn_key`` selects an independent stream,
# so adding environments or runs never shifts the draws of existing ones.
_ENV_STREAM = 0
_RUN_STREAM = 1
_NOISE, _POLICY = 0, 1


def environment_rng(master_seed: int, env_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(master_seed, spawn_key=(_ENV_STREAM, env_index))
    return np.random.default_rng(ss)


def environment_seed(master_seed: int, env_index: int) -> int:
    """A 63-bit integer seed identifying one environment of an experiment."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(_ENV_STREAM, env_index))
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 32 | int(lo)) & ((1 << 63) - 1))


def run_rngs(seed: int, run_index: int = 0) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (noise, policy) generators for one trial run."""
    noise = np.random.SeedSequence(seed, spawn_key=(_RUN_STREAM, run_index, _NOISE))
    policy = np.random.SeedSequence(seed, spawn_key=(_RUN_STREAM, run_index, _POLICY))
    return np.random.default_rng(noise), np.random.default_rng(policy)
