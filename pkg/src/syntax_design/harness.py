"""Seeded trial runs, FPR/TPR metrics and multi-environment experiments.

An experiment draws ``n_environments`` worlds from the master seed and runs
every policy ``n_runs_per_environment`` times in each. Each run's noise and
policy randomness come from streams keyed by (environment seed, run index),
so every policy faces the same worlds and the results never depend on how
runs are spread over worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from syntax_design import kernels
from syntax_design.env_sim import (
    ConfigError,
    Environment,
    Mismatch,
    SimConfig,
    environment_seed,
    generate_environment,
    run_rngs,
    sample_episode,
    true_positive_set,
)
from syntax_design.estimator import RankDeficientFactors, TrialState, lambda_oracle
from syntax_design.policies import (
    Policy,
    PolicyKind,
    SelectionResult,
    decide,
    finalize,
    warm_start_length,
)

log = logging.getLogger(__name__)

__all__ = [
    "LambdaMode",
    "ExperimentSpec",
    "TrialResult",
    "TrialError",
    "CellResult",
    "ExperimentReport",
    "run_trial",
    "fpr_tpr",
    "allocation_proportion",
    "run_experiment",
    "write_report",
    "load_spec",
    "format_table",
    "CSV_COLUMNS",
    "THREADS_ENV",
]

SWEEP_DEFAULT = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
THREADS_ENV = "SYNTAX_DESIGN_THREADS"
CSV_COLUMNS = ("policy", "environment_seed", "regime", "H", "lambda", "fpr", "tpr", "alloc", "status")


class TrialError(RuntimeError):
    def __init__(self, message: str, episode: int, policy: str):
        super().__init__(f"{policy} failed at episode {episode}: {message}")
        self.episode = episode
        self.policy = policy


@dataclass(frozen=True)
class LambdaMode:
    """How each environment's factor-effect parameter is chosen.

    ``kind`` is ``"oracle"`` (computed from the environment's latent factors),
    ``"fixed"`` (``values[0]``) or ``"sweep"`` (every entry of ``values``).
    """

    kind: str = "oracle"
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("oracle", "fixed", "sweep"):
            raise ConfigError(f"unknown lambda mode {self.kind!r}")
        vals = tuple(float(v) for v in self.values)
        if self.kind == "fixed" and len(vals) != 1:
            raise ConfigError("fixed lambda mode needs exactly one value")
        if self.kind == "sweep" and not vals:
            vals = SWEEP_DEFAULT
        if any(not v >= 0 for v in vals):
            raise ConfigError(f"lambda values must be nonnegative, got {vals}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def parse(cls, value) -> "LambdaMode":
        """Accept ``"oracle"``, ``"sweep"``, a number, a list (sweep) or a mapping."""
        if isinstance(value, LambdaMode):
            return value
        if isinstance(value, dict):
            return cls(value.get("kind", "oracle"), tuple(value.get("values", ())))
        if isinstance(value, (list, tuple)):
            return cls("sweep", tuple(value))
        if isinstance(value, (int, float)):
            return cls("fixed", (float(value),))
        text = str(value).strip().lower()
        if text in ("oracle", "sweep"):
            return cls(text)
        try:
            return cls("fixed", (float(text),))
        except ValueError:
            raise ConfigError(f"cannot parse lambda setting {value!r}") from None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "values": list(self.values)}


@dataclass(frozen=True)
class ExperimentSpec:
    sim: SimConfig = field(default_factory=SimConfig)
    horizon: int = 200
    policies: tuple = tuple(PolicyKind)
    n_environments: int = 10
    n_runs_per_environment: int = 1000
    lambda_mode: LambdaMode = field(default_factory=LambdaMode)
    output_path: str = "results"
    fallback_lambda: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "policies", tuple(PolicyKind(p) for p in self.policies))
        object.__setattr__(self, "lambda_mode", LambdaMode.parse(self.lambda_mode))
        self.validate()

    def validate(self) -> None:
        self.sim.validate()
        if self.horizon < warm_start_length(self.sim.K):
            raise ConfigError(
                f"horizon H >= 2K required, got H={self.horizon}, K={self.sim.K}"
            )
        if self.n_environments < 1 or self.n_runs_per_environment < 1:
            raise ConfigError("n_environments and n_runs_per_environment must be >= 1")
        if not self.policies:
            raise ConfigError("at least one policy is required")
        if not self.fallback_lambda >= 0:
            raise ConfigError("fallback_lambda must be nonnegative")

    @property
    def master_seed(self) -> int:
        return self.sim.seed

    def to_dict(self) -> dict:
        return {
            "sim": self.sim.to_dict(),
            "horizon": self.horizon,
            "policies": [p.value for p in self.policies],
            "n_environments": self.n_environments,
            "n_runs_per_environment": self.n_runs_per_environment,
            "lambda": self.lambda_mode.to_dict(),
            "output_path": self.output_path,
            "fallback_lambda": self.fallback_lambda,
        }


@dataclass(frozen=True, eq=False)
class TrialResult:
    selection: SelectionResult
    trace: np.ndarray  # H x 2 array of (subpopulation, group)


def run_trial(
    env: Environment,
    kind,
    horizon: int,
    lam: float | None = None,
    seed: int = 0,
    run_index: int = 0,
    sigma: float | None = None,
) -> TrialResult:
    """Run one trial of ``horizon`` episodes and return its selection and trace.

    ``sigma`` is the noise level the policy assumes; it defaults to the
    environment's configured value.
    """
    kind = PolicyKind(kind)
    policy = Policy(kind, lam if kind.needs_lambda else None, env.sigma if sigma is None else sigma)
    if horizon < warm_start_length(env.K):
        raise ConfigError(f"horizon H >= 2K required, got H={horizon}, K={env.K}")
    noise_rng, policy_rng = run_rngs(seed, run_index)
    state = TrialState.empty(env.features, env.T)
    trace = np.empty((horizon, 2), dtype=np.int64)
    for episode in range(horizon):
        try:
            d = decide(policy, state, episode, policy_rng)
        except Exception as exc:
            raise TrialError(str(exc), episode, kind.value) from exc
        y_pre, y_final = sample_episode(env, d.i, d.alpha, noise_rng)
        state.record(d.i, d.alpha, y_pre, y_final)
        trace[episode] = d.i, d.alpha
    try:
        selection = finalize(policy, state)
    except Exception as exc:
        raise TrialError(str(exc), horizon, kind.value) from exc
    return TrialResult(selection, trace)


def fpr_tpr(selected, truth, K: int):
    """False and true positive rates; a rate with an empty denominator is None."""
    selected = set(selected)
    truth = set(truth)
    negatives = set(range(K)) - truth
    tpr = len(selected & truth) / len(truth) if truth else None
    fpr = len(selected & negatives) / len(negatives) if negatives else None
    return fpr, tpr


def allocation_proportion(trace) -> float:
    """Share of episodes that assigned the patient to treatment."""
    trace = np.asarray(trace)
    if trace.shape[0] == 0:
        raise ValueError("empty trace")
    return float(np.mean(trace[:, 1] == 1))


# ---------------------------------------------------------------- experiments


@dataclass(frozen=True)
class CellResult:
    """Run-averaged metrics of one policy (and lambda) in one environment."""

    policy: PolicyKind
    environment: int
    environment_seed: int
    lam: float | None
    lambda_label: str
    fpr: float | None
    tpr: float | None
    alloc: float | None
    n_runs: int
    error: str | None = None


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    cells: list
    summary: list
    wall_clock_seconds: float = 0.0
    notes: list = field(default_factory=list)

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        regime = self.spec.sim.factor_regime.value
        for c in self.cells:
            writer.writerow(
                [
                    c.policy.value,
                    c.environment_seed,
                    regime,
                    self.spec.horizon,
                    _fmt(c.lam),
                    _fmt(c.fpr),
                    _fmt(c.tpr),
                    _fmt(c.alloc),
                    "ok" if c.error is None else f"error: {c.error}",
                ]
            )
        return buf.getvalue()

    def summary_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "master_seed": self.spec.master_seed,
            "environment_seeds": sorted({c.environment_seed for c in self.cells}),
            "error_bars": "standard error of the per-environment means",
            "kernel_backend": kernels.BACKEND,
            "wall_clock_seconds": self.wall_clock_seconds,
            "rows": self.summary,
            "notes": self.notes,
            "failures": [
                {"policy": c.policy.value, "environment_seed": c.environment_seed,
                 "lambda": c.lam, "error": c.error}
                for c in self.cells if c.error is not None
            ],
        }

    def row(self, policy, lambda_label: str | None = None) -> dict:
        policy = PolicyKind(policy)
        for r in self.summary:
            if r["policy"] == policy.value and (lambda_label is None or r["lambda"] == lambda_label):
                return r
        raise KeyError((policy.value, lambda_label))


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


@lru_cache(maxsize=16)
def _environment(sim: SimConfig, env_seed: int) -> Environment:
    return generate_environment(sim.with_seed(env_seed))


def _run_chunk(args):
    """Worker entry: run a block of trials for one cell, return per-run metrics."""
    sim, env_seed, kind, lam, horizon, runs = args
    env = _environment(sim, env_seed)
    truth = true_positive_set(env)
    out = []
    for run in runs:
        try:
            res = run_trial(env, kind, horizon, lam, seed=env_seed, run_index=run)
        except Exception as exc:
            out.append((run, None, None, None, str(exc)))
            continue
        fpr, tpr = fpr_tpr(res.selection.selected, truth, env.K)
        out.append((run, fpr, tpr, allocation_proportion(res.trace), None))
    return out


def _cell_lambdas(spec: ExperimentSpec, env: Environment, notes: list):
    mode = spec.lambda_mode
    if mode.kind == "oracle":
        try:
            return [(lambda_oracle(env), "oracle")]
        except RankDeficientFactors:
            notes.append(
                f"environment seed {env.seed}: factor matrix rank deficient, "
                f"using fallback lambda {spec.fallback_lambda}"
            )
            return [(spec.fallback_lambda, "oracle")]
    return [(v, repr(v)) for v in mode.values]


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _summarise(cells, n_envs):
    groups = {}
    for c in cells:
        groups.setdefault((c.policy, c.lambda_label), []).append(c)
    rows = []
    for (policy, label), members in groups.items():
        row = {"policy": policy.value, "label": policy.label, "lambda": label}
        for metric in ("fpr", "tpr", "alloc"):
            vals = np.array([getattr(c, metric) for c in members if getattr(c, metric) is not None])
            if vals.size == 0:
                row[metric], row[metric + "_se"] = None, None
                continue
            row[metric] = float(vals.mean())
            row[metric + "_se"] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        row["n_environments"] = len(members)
        rows.append(row)
    return rows


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(threads))


def run_experiment(spec: ExperimentSpec, threads: int | None = None) -> ExperimentReport:
    """Run every (environment, policy, lambda, run) combination of ``spec``."""
    spec.validate()
    threads = _resolve_threads(threads)
    started = time.perf_counter()
    notes = []
    plan = []  # (env index, env seed, kind, lam, label)
    for e in range(spec.n_environments):
        seed = environment_seed(spec.master_seed, e)
        env = _environment(spec.sim, seed)
        lambdas = None
        for kind in spec.policies:
            if kind.needs_lambda:
                if lambdas is None:
                    lambdas = _cell_lambdas(spec, env, notes)
                plan.extend((e, seed, kind, lam, label) for lam, label in lambdas)
            else:
                plan.append((e, seed, kind, None, "-"))

    runs = range(spec.n_runs_per_environment)
    chunk = max(1, math.ceil(spec.n_runs_per_environment / max(1, threads * 2)))
    jobs, owners = [], []
    for idx, (_, seed, kind, lam, _) in enumerate(plan):
        for start in range(0, len(runs), chunk):
            jobs.append((spec.sim, seed, kind, lam, spec.horizon, runs[start:start + chunk]))
            owners.append(idx)

    if threads == 1:
        results = [_run_chunk(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_chunk, jobs))

    per_cell = [[] for _ in plan]
    for idx, res in zip(owners, results):
        per_cell[idx].extend(res)

    cells = []
    for (e, seed, kind, lam, label), res in zip(plan, per_cell):
        res.sort(key=lambda row: row[0])
        errors = [r[4] for r in res if r[4] is not None]
        ok = [r for r in res if r[4] is None]
        cells.append(
            CellResult(
                policy=kind, environment=e, environment_seed=seed, lam=lam, lambda_label=label,
                fpr=_mean(r[1] for r in ok), tpr=_mean(r[2] for r in ok),
                alloc=_mean(r[3] for r in ok), n_runs=len(ok),
                error=f"{len(errors)} of {len(res)} runs failed; first: {errors[0]}" if errors else None,
            )
        )
        if errors:
            log.warning("cell %s/%s env %d: %s", kind.value, label, e, cells[-1].error)

    report = ExperimentReport(spec, cells, _summarise(cells, spec.n_environments), notes=notes)
    report.wall_clock_seconds = time.perf_counter() - started
    return report


def write_report(report: ExperimentReport, out_dir) -> tuple[Path, Path]:
    """Write ``results.csv`` and ``summary.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    json_path = out / "summary.json"
    csv_path.write_text(report.csv_text())
    json_path.write_text(json.dumps(report.summary_dict(), indent=2) + "\n")
    return csv_path, json_path


# ---------------------------------------------------------------- config files

_SPEC_KEYS = {
    "sim", "horizon", "policies", "n_environments", "n_runs_per_environment",
    "lambda", "output", "output_path", "fallback_lambda",
}


def spec_from_dict(doc: dict) -> ExperimentSpec:
    unknown = set(doc) - _SPEC_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    if "sim" in doc:
        kwargs["sim"] = SimConfig.from_dict(dict(doc["sim"] or {}))
    for key in ("horizon", "n_environments", "n_runs_per_environment"):
        if key in doc:
            kwargs[key] = int(doc[key])
    if "policies" in doc:
        kwargs["policies"] = tuple(_parse_policy(p) for p in doc["policies"])
    if "lambda" in doc:
        kwargs["lambda_mode"] = LambdaMode.parse(doc["lambda"])
    if "output" in doc or "output_path" in doc:
        kwargs["output_path"] = str(doc.get("output_path", doc.get("output")))
    if "fallback_lambda" in doc:
        kwargs["fallback_lambda"] = float(doc["fallback_lambda"])
    return ExperimentSpec(**kwargs)


def _parse_policy(name) -> PolicyKind:
    try:
        return PolicyKind(str(name).strip().lower())
    except ValueError:
        valid = ", ".join(k.value for k in PolicyKind)
        raise ConfigError(f"unknown policy {name!r}; expected one of {valid}") from None


def load_spec(path=None, **overrides) -> ExperimentSpec:
    """Read a YAML experiment config and apply non-None ``overrides``.

    Recognised overrides: ``policies``, ``horizon``, ``runs``, ``envs``,
    ``regime``, ``mismatch``, ``lam``, ``seed``, ``out``.
    """
    doc = {}
    if path is not None:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
    spec = spec_from_dict(doc)
    sim_changes = {}
    if overrides.get("regime") is not None:
        sim_changes["factor_regime"] = overrides["regime"]
    if overrides.get("mismatch") is not None:
        sim_changes["mismatch"] = overrides["mismatch"]
    if overrides.get("seed") is not None:
        sim_changes["seed"] = int(overrides["seed"])
    changes = {}
    if sim_changes:
        sim = spec.sim.to_dict()
        sim.update(sim_changes)
        if sim["mismatch"] != Mismatch.FULL_RANK_FACTORS.value and spec.sim.mismatch is Mismatch.FULL_RANK_FACTORS:
            # D_z was forced to T; restore the configured latent dimension
            sim["D_z"] = (doc.get("sim") or {}).get("D_z", SimConfig.D_z)
        changes["sim"] = SimConfig.from_dict(sim)
    if overrides.get("policies") is not None:
        changes["policies"] = tuple(_parse_policy(p) for p in overrides["policies"])
    if overrides.get("horizon") is not None:
        changes["horizon"] = int(overrides["horizon"])
    if overrides.get("runs") is not None:
        changes["n_runs_per_environment"] = int(overrides["runs"])
    if overrides.get("envs") is not None:
        changes["n_environments"] = int(overrides["envs"])
    if overrides.get("lam") is not None:
        changes["lambda_mode"] = LambdaMode.parse(overrides["lam"])
    if overrides.get("out") is not None:
        changes["output_path"] = str(overrides["out"])
    return replace(spec, **changes) if changes else spec


def format_table(summary: dict) -> str:
    """Render a summary document as a plain-text comparison table."""
    rows = summary["rows"]
    header = f"{'Algorithm':<22}{'lambda':>10}{'FPR':>18}{'TPR':>18}{'Treated':>18}"
    lines = [header, "-" * len(header)]

    def cell(row, key):
        if row.get(key) is None:
            return "n/a"
        return f"{100 * row[key]:.1f}% ({100 * row[key + '_se']:.1f}%)"

    for r in rows:
        lines.append(
            f"{r['label']:<22}{r['lambda']:>10}{cell(r, 'fpr'):>18}{cell(r, 'tpr'):>18}{cell(r, 'alloc'):>18}"
        )
    spec = summary.get("spec", {})
    sim = spec.get("sim", {})
    lines.append("")
    lines.append(
        f"regime={sim.get('factor_regime')} mismatch={sim.get('mismatch')} H={spec.get('horizon')} "
        f"envs={spec.get('n_environments')} runs/env={spec.get('n_runs_per_environment')} "
        f"seed={summary.get('master_seed')}; parentheses: {summary.get('error_bars')}"
    )
    return "\n".join(lines)
