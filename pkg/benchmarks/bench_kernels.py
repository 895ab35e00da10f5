"""Compare the compiled and numpy im2col/col2im backends.

    python3 benchmarks/bench_kernels.py [--repeats N] [--out kernels.tsv]

Prints one row per (case, backend) and the compiled/numpy speed-up per case.
"""

import argparse
from pathlib import Path

from dcswin import _kernels
from dcswin.bench import bench_kernels, kernels_tsv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", help="write the table to this TSV file")
    args = p.parse_args()

    if "cython" not in _kernels.backends():
        print("compiled extension not built; only the numpy backend is timed")
    rows = bench_kernels(repeats=args.repeats)
    text = kernels_tsv(rows)
    print(text, end="")
    by_case = {}
    for case, name, t1, t2 in rows:
        by_case.setdefault(case, {})[name] = (t1, t2)
    for case, times in by_case.items():
        if "cython" in times:
            (n1, n2), (c1, c2) = times["numpy"], times["cython"]
            print(f"{case}: im2col x{n1 / c1:.1f}, col2im x{n2 / c2:.1f}")
    if args.out:
        Path(args.out).write_text(text)


if __name__ == "__main__":
    main()
