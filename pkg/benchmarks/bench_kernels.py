"""Compare the compiled and pure-Python kernel backends.

Kernel timings call both implementations in-process. The end-to-end row
times one encrypted training iteration per backend in a subprocess,
because the backend is chosen once at import.

    python benchmarks/bench_kernels.py [--slots 4096] [--ratings 256]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from csrfhe._kernels import implementations

E2E = """
import json, time
from csrfhe import KERNEL_BACKEND
from csrfhe.eval import iteration_ops
from csrfhe.mf_engine import Hyperparams
from csrfhe import he_backend as he
import numpy as np
rng = np.random.default_rng(0)
n, m, M = 200, 40, {ratings}
cells = rng.choice(n * m, size=M, replace=False)
trip = [(int(c // m), int(c % m), float(rng.integers(1, 6))) for c in np.sort(cells)]
start = time.perf_counter()
iteration_ops(trip, n, m, "csr", Hyperparams(alpha=0.05), he.HEParams(poly_degree={degree}))
print(json.dumps({{"backend": KERNEL_BACKEND, "seconds": time.perf_counter() - start}}))
"""


def bench_kernels(slots: int, repeat: int) -> dict:
    rng = np.random.default_rng(0)
    a = rng.uniform(-8, 8, slots)
    b = rng.uniform(-8, 8, slots)
    out = np.empty(slots)
    scale = 2.0**32
    U0, V0 = rng.random((500, 10)), rng.random((40, 10))
    users = rng.integers(0, 500, 2000).astype(np.int64)
    items = rng.integers(0, 40, 2000).astype(np.int64)
    ratings = rng.integers(1, 6, 2000).astype(np.float64)
    results = {}
    for name, mod in implementations().items():
        cases = {
            "mul_quantize": lambda: mod.mul_quantize(a, b, out, slots, scale),
            "scale_quantize": lambda: mod.scale_quantize(a, 0.05, out, slots, scale),
            "rotate": lambda: mod.rotate(a, 37, out),
            "rotate_add": lambda: mod.rotate_add(a, 37, out),
            "sgd_epoch(2000)": lambda: mod.sgd_epoch(U0.copy(), V0.copy(), users, items, ratings,
                                                     0.01, 0.01, 0.01, 1.0),
        }
        for case, fn in cases.items():
            number = 20 if case.startswith("sgd") else 2000
            best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
            results.setdefault(case, {})[name] = best
    return results


def bench_end_to_end(ratings: int, degree: int) -> dict:
    out = {}
    for label, env in (("cython", {}), ("python", {"CSRFHE_PURE_PYTHON": "1"})):
        proc = subprocess.run([sys.executable, "-c", E2E.format(ratings=ratings, degree=degree)],
                              env={**os.environ, **env}, capture_output=True, text=True, check=True)
        row = json.loads(proc.stdout.strip().splitlines()[-1])
        out[row["backend"]] = row["seconds"]
    return out


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--slots", type=int, default=4096)
    parser.add_argument("--ratings", type=int, default=256)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    results = bench_kernels(args.slots, args.repeat)
    backends = sorted({b for r in results.values() for b in r})
    print(f"kernel timings, {args.slots} slots (microseconds per call)")
    print(f"{'kernel':<18}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for case, row in results.items():
        cells = "".join(f"{row.get(b, float('nan')) * 1e6:12.2f}" for b in backends)
        speed = row["python"] / row["cython"] if "cython" in row else float("nan")
        print(f"{case:<18}{cells}{speed:10.2f}")

    e2e = bench_end_to_end(args.ratings, 2 * args.slots)
    print(f"\none encrypted training iteration, {args.ratings} ratings (seconds)")
    for backend, seconds in sorted(e2e.items()):
        print(f"{backend:<18}{seconds:12.3f}")


if __name__ == "__main__":
    main()
