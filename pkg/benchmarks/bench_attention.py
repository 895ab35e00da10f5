"""Time factorized attention against the N x N oracle and fit log-log slopes.

    python3 benchmarks/bench_attention.py [--sizes 1024,4096,16384,65536] [--force]
"""

import argparse

from dcswin.bench import DEFAULT_SIZES, LINEAR_SLOPE_BAND, QUADRATIC_SLOPE_BAND, bench_attention


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default=",".join(map(str, DEFAULT_SIZES)))
    p.add_argument("--channels", type=int, default=256)
    p.add_argument("--force", action="store_true", help="time the oracle above 4096 tokens")
    args = p.parse_args()

    res = bench_attention([int(s) for s in args.sizes.split(",")], args.channels,
                          force=args.force)
    print(res.tsv(), end="")
    print(f"linear slope {res.slope_linear:.3f}, band {LINEAR_SLOPE_BAND}")
    print(f"quadratic slope {res.slope_quadratic:.3f}, band {QUADRATIC_SLOPE_BAND}")
    for r in res.rows:
        print(f"N={r.n}: peak {r.peak_linear / 2**20:.1f} MiB, "
              f"N^2 float32 would be {res.quadratic_bytes(r.n) / 2**20:.1f} MiB")


if __name__ == "__main__":
    main()
