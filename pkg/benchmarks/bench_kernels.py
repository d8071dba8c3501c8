"""Numba vs numpy timings of the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeats 3] [--scale 1.0] [--json out.json]

Both backends are timed in one process (the numpy twins are always
importable); numba timings exclude the first, compiling call.
"""
import argparse
import json

from avtwin import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0)
    ap.add_argument("--json", default=None, help="also write raw rows here")
    a = ap.parse_args()
    rows = bench.run(a.repeats, a.scale)
    print(bench.format_table(rows))
    if a.json:
        with open(a.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
