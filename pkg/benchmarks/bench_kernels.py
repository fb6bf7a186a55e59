"""Compare the compiled and numpy fairness kernels.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--json out.json]

Times ``mc_rows`` (the Monte Carlo risk used in every training step) and
``metric_rows`` (exhaustive enumeration) on random instances, checks that
both backends agree, and prints a table of median timings.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from fairssvae import kernels
from fairssvae.fairness import METRIC_CODES

SHAPES = [(100, 128), (100, 1024), (1000, 1024), (100, 8192)]


def instance(n_samples, n, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.random(n)
    a_fixed = np.where(rng.random(n) < 0.4, -1, rng.integers(0, 2, n)).astype(np.int8)
    y_fixed = np.where(rng.random(n) < 0.25, -1, rng.integers(0, 2, n)).astype(np.int8)
    q_a, q_y = rng.random(n), rng.random(n)
    ua, uy = rng.random((n_samples, n)), rng.random((n_samples, n))
    return p, a_fixed, q_a, y_fixed, q_y, ua, uy


def run(repeats):
    backends = kernels.available_backends()
    rows = []
    for S, n in SHAPES:
        args = instance(S, n)
        for metric, code in sorted(METRIC_CODES.items()):
            timings, outputs = {}, {}
            for name, mod in backends.items():
                fn = lambda: mod.mc_rows(*args, code)  # noqa: E731
                outputs[name] = fn()
                timings[name] = min(timeit.repeat(fn, number=1, repeat=repeats))
            ref = outputs["python"]
            for name, out in outputs.items():
                if not (np.allclose(out[0], ref[0], atol=1e-12) and np.allclose(out[1], ref[1], atol=1e-12)):
                    raise SystemExit(f"backend {name} disagrees on S={S}, n={n}, {metric}")
            row = {"samples": S, "records": n, "metric": metric, **{f"{k}_s": v for k, v in timings.items()}}
            if "cython" in timings:
                row["speedup"] = timings["python"] / timings["cython"]
            rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", help="also write the rows as JSON")
    args = ap.parse_args(argv)
    if "cython" not in kernels.available_backends():
        print("compiled backend not built; timing the numpy backend only", file=sys.stderr)
    rows = run(args.repeats)
    print(f"{'S':>6} {'n':>6} {'metric':>6} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for r in rows:
        cy = r.get("cython_s")
        print(f"{r['samples']:>6} {r['records']:>6} {r['metric']:>6} {1e3 * r['python_s']:>10.2f} "
              f"{'-' if cy is None else f'{1e3 * cy:.2f}':>10} {r.get('speedup', float('nan')):>8.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
