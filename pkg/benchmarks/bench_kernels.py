"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each case is run on both backends with identical inputs; results are
checked for agreement before timings are reported.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from s2o.kernels import backends
from s2o.simulation import random_correlation_matrix


def _cases(rng):
    out = {}
    for n in (16, 64, 256):
        g = rng.standard_normal((n, n))
        gram = g @ g.T
        start = rng.standard_normal(n)
        spd = gram + n * np.eye(n)
        out[f"power_iteration {n}"] = lambda k, gram=gram, start=start: k.power_iteration(gram, start, 1e-10, 5000)[0]
        out[f"cholesky_logdet {n}"] = lambda k, spd=spd: k.cholesky_logdet(spd, 0.0)
    small = [random_correlation_matrix(16, [0, i]) for i in range(200)]
    big = random_correlation_matrix(1024, 1)
    out["kron_marginals 200x(4x4)"] = lambda k: [k.kron_marginals(r, 4, 4)[0] for r in small][-1]
    out["kron_marginals 32x32"] = lambda k: k.kron_marginals(big, 32, 32)[0]
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    impls = backends()
    if "cython" not in impls:
        print("compiled extension not built; only the python backend is available", file=sys.stderr)
    cases = _cases(np.random.default_rng(0))
    rows = []
    print(f"{'case':<30}" + "".join(f"{name:>12}" for name in impls) + f"{'speedup':>10}")
    for label, fn in cases.items():
        results = {name: fn(mod) for name, mod in impls.items()}
        ref = results["python"]
        for name, val in results.items():
            if not np.allclose(val, ref, rtol=1e-9, atol=1e-12):
                raise SystemExit(f"{label}: {name} disagrees with python backend")
        best = {name: min(timeit.repeat(lambda m=mod: fn(m), number=1, repeat=args.repeat))
                for name, mod in impls.items()}
        speedup = best["python"] / best["cython"] if "cython" in best else float("nan")
        print(f"{label:<30}" + "".join(f"{best[n] * 1e3:>10.2f}ms" for n in impls) + f"{speedup:>9.1f}x")
        rows.append({"case": label, "seconds": best, "speedup": speedup})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
