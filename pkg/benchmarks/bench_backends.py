"""Numba kernels vs the pure-numpy fallback on the reference model.

Each backend runs in its own subprocess (the backend is fixed at import time by
MFSTACKELBERG_DISABLE_NUMBA). Reports the best of ``--repeat`` wall times per stage
and the largest difference between the two backends' results.

    python benchmarks/bench_backends.py [--N 100] [--paths 50] [--repeat 3]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def worker(args):
    from mfstackelberg import _jit
    from mfstackelberg.costs import solve_mode
    from mfstackelberg.model import table1_model
    from mfstackelberg.simulator import SimConfig, simulate_many

    p = table1_model()
    cfg = SimConfig(N=args.N, paths=args.paths, seed=1, store_followers=False)
    timings, results = {}, {}

    def timed(name, fn):
        best, out = np.inf, None
        for _ in range(args.repeat + 1):  # first call warms the JIT cache
            t0 = time.perf_counter()
            out = fn()
            best = min(best, time.perf_counter() - t0)
        timings[name] = best
        return out

    for mode in ("feedback", "openloop"):
        sol = timed(f"solve_{mode}", lambda: solve_mode(p, mode))
        ens = timed(f"simulate_{mode}",
                    lambda: simulate_many(p, [(sol.policy, None, sol.stk)], cfg)[0])
        gain = sol.policy.P0 if mode == "feedback" else sol.policy.L0
        results[f"gain_{mode}"] = gain.values.ravel().tolist()
        results[f"J0_{mode}"] = ens.J0.tolist()
        results[f"xN_{mode}"] = ens.xN.ravel().tolist()
    json.dump({"backend": _jit.BACKEND, "timings": timings, "results": results}, sys.stdout)


def run_backend(disable, args):
    env = dict(os.environ)
    env.pop("MFSTACKELBERG_DISABLE_NUMBA", None)
    if disable:
        env["MFSTACKELBERG_DISABLE_NUMBA"] = "1"
    cmd = [sys.executable, __file__, "--worker", "--N", str(args.N), "--paths", str(args.paths),
           "--repeat", str(args.repeat)]
    out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout
    return json.loads(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=100)
    ap.add_argument("--paths", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        return worker(args)
    fast, slow = run_backend(False, args), run_backend(True, args)
    print(f"reference model, N={args.N}, paths={args.paths}, best of {args.repeat}")
    print(f"{'stage':<20}{fast['backend']:>12}{slow['backend']:>12}{'speedup':>10}")
    for k in fast["timings"]:
        a, b = fast["timings"][k], slow["timings"][k]
        print(f"{k:<20}{a:>11.3f}s{b:>11.3f}s{b / a:>9.1f}x")
    diff = max(float(np.max(np.abs(np.subtract(fast["results"][k], slow["results"][k]))))
               for k in fast["results"])
    print(f"max |numba - numpy| over gains, costs and averages: {diff:.3g}")


if __name__ == "__main__":
    main()
