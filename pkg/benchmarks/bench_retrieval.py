"""Compiled vs pure-Python top-k retrieval across memory sizes.

    python3 benchmarks/bench_retrieval.py [--d 64] [--k 8] [--sizes 1024,4096,16384,65536] [--out results]

Prints ns/query per backend and size, the linear-fit R^2 per backend and the
speedup of the compiled kernel.  With ``--out`` also writes results.csv/.json.
"""
import argparse
import json
import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from keymem import bench  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--k", type=int, default=8)
    ap.add_argument("--sizes", default="1024,4096,16384,65536")
    ap.add_argument("--repeats", type=int, default=bench.REPEATS)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    sizes = tuple(int(s) for s in args.sizes.split(","))

    results = bench.compare_backends(args.d, args.k, sizes, repeats=args.repeats)
    by_backend = {r.backend: r for r in results}
    print(f"{'m':>8}" + "".join(f"{b + ' ns/q':>18}" for b in by_backend))
    for i, m in enumerate(sizes):
        print(f"{m:>8}" + "".join(f"{r.ns_per_query[i]:>18.0f}" for r in results))
    for r in results:
        print(f"{r.backend}: R^2 = {r.r2:.4f}")
    if {"compiled", "python"} <= set(by_backend):
        c, p = by_backend["compiled"], by_backend["python"]
        print("speedup:", ", ".join(f"m={m} {pt / ct:.1f}x"
                                    for m, ct, pt in zip(sizes, c.ns_per_query, p.ns_per_query)))
    if args.out:
        with open(args.out + ".csv", "w") as fh:
            fh.write(bench.retrieval_csv(results))
        with open(args.out + ".json", "w") as fh:
            json.dump([r.to_dict() for r in results], fh, indent=2)


if __name__ == "__main__":
    main()
