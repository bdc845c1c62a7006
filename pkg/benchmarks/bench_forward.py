"""Benchmark the compiled forward/backward kernels against the pure-numpy
fallback.

Run from the repository root:

    python3 benchmarks/bench_forward.py [--T 100000] [--states 3] [--reps 5]

Both backends are imported directly so a single process can time the two
implementations side by side; agreement of the log-likelihoods is checked
before timing.
"""

import argparse
import time

import numpy as np

from pshmm import _fwdpy

try:
    from pshmm import _fwdc
except ImportError:
    _fwdc = None


def make_problem(T, N, seed=0):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0.1, 1.0, (T, N))
    Gam = rng.uniform(0.1, 1.0, (T, N, N))
    Gam /= Gam.sum(axis=2, keepdims=True)
    delta = np.full(N, 1.0 / N)
    return P, Gam, delta


def time_backend(mod, P, Gam, delta, reps):
    best_f = best_b = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        ll, phi, c = mod.forward(P, Gam, delta)
        t1 = time.perf_counter()
        mod.backward(P, Gam, delta, phi, c)
        t2 = time.perf_counter()
        best_f = min(best_f, t1 - t0)
        best_b = min(best_b, t2 - t1)
    return ll, best_f, best_b


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--T", type=int, default=100_000)
    ap.add_argument("--states", type=int, default=3)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()

    P, Gam, delta = make_problem(args.T, args.states)
    ll_py, fpy, bpy = time_backend(_fwdpy, P, Gam, delta, args.reps)
    print(f"problem: T={args.T}, N={args.states}, best of {args.reps} reps")
    print(f"python   forward {fpy * 1e3:8.2f} ms   backward {bpy * 1e3:8.2f} ms")
    if _fwdc is None:
        print("compiled extension not built; skipping comparison")
        return
    ll_c, fc, bc = time_backend(_fwdc, P, Gam, delta, args.reps)
    assert abs(ll_c - ll_py) <= 1e-10 * abs(ll_py), (ll_c, ll_py)
    print(f"compiled forward {fc * 1e3:8.2f} ms   backward {bc * 1e3:8.2f} ms")
    print(f"speedup: forward {fpy / fc:.1f}x, backward {bpy / bc:.1f}x")


if __name__ == "__main__":
    main()
