"""Compare the compiled and NumPy kernels on a realistic trial state.

Usage::

    python benchmarks/bench_kernels.py [--K 25] [--episodes 150] [--repeat 200]

Prints microseconds per call for ``gram``, ``solutions`` and ``phantom``
(all targets, as Synthetic Design needs), the speed-up of the compiled
backend, and the wall time of one full SYNTAX trial under each backend.
"""

import argparse
import time
import timeit

import numpy as np

from syntax_design import _kernels_py, kernels
from syntax_design.env_sim import SimConfig, generate_environment, run_rngs, sample_episode
from syntax_design.estimator import TrialState, lambda_oracle
from syntax_design.harness import run_trial

try:
    from syntax_design import _core
except ImportError:
    _core = None


def build_state(K, episodes, seed):
    env = generate_environment(SimConfig(K=K, seed=seed))
    noise, _ = run_rngs(seed)
    state = TrialState.empty(env.features, env.T)
    for e in range(max(episodes, 2 * K)):
        cell = e % (2 * K)
        y, yT = sample_episode(env, cell // 2, cell % 2, noise)
        state.record(cell // 2, cell % 2, y, yT)
    return env, state


def time_backend(mod, state, lam, repeat):
    n0 = state.n0.astype(float)
    n1 = state.n1.astype(float)
    dinv = 1.0 / (1.0 / n0 + lam / (n0 + n1))
    A = state.constraint_matrix()
    G = mod.gram(A, dinv)
    targets = np.arange(state.K)
    calls = {
        "gram": lambda: mod.gram(A, dinv),
        "solutions": lambda: mod.solutions(G, A, n0, n1, lam),
        "phantom": lambda: mod.phantom(G, n0, n1, lam, targets),
    }
    return {name: min(timeit.repeat(fn, number=repeat, repeat=3)) / repeat * 1e6
            for name, fn in calls.items()}


def time_trial(mod, env, lam, horizon):
    saved = kernels.gram, kernels.solutions, kernels.phantom
    kernels.gram, kernels.solutions, kernels.phantom = mod.gram, mod.solutions, mod.phantom
    try:
        start = time.perf_counter()
        run_trial(env, "syntax", horizon, lam=lam, seed=env.seed)
        return time.perf_counter() - start
    finally:
        kernels.gram, kernels.solutions, kernels.phantom = saved


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--K", type=int, default=25)
    parser.add_argument("--episodes", type=int, default=150)
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--horizon", type=int, default=200)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args(argv)

    env, state = build_state(args.K, args.episodes, args.seed)
    lam = lambda_oracle(env)
    backends = [("python", _kernels_py)] + ([("compiled", _core)] if _core is not None else [])
    results = {name: time_backend(mod, state, lam, args.repeat) for name, mod in backends}

    print(f"K={args.K}, {state.episodes} recorded episodes, lambda={lam:.4f}; "
          f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':<12}" + "".join(f"{name + ' (us)':>16}" for name, _ in backends)
          + ("   speed-up" if len(backends) == 2 else ""))
    for kernel in ("gram", "solutions", "phantom"):
        row = f"{kernel:<12}" + "".join(f"{results[name][kernel]:>16.1f}" for name, _ in backends)
        if len(backends) == 2:
            row += f"{results['python'][kernel] / results['compiled'][kernel]:>10.2f}x"
        print(row)
    for name, mod in backends:
        print(f"full SYNTAX trial, H={args.horizon}, {name}: {time_trial(mod, env, lam, args.horizon) * 1e3:.1f} ms")
    if _core is None:
        print("compiled extension not built; only the NumPy backend was timed")


if __name__ == "__main__":
    main()
