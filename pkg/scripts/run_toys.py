"""Train and score the three grid patterns, writing PGM/CSV snapshots per pattern.

    python3 scripts/run_toys.py --out runs/toy
"""
import argparse
import os
import time

from modflow.cli import main as cli_main

RUNS = [("chessboard", 4, 1), ("chessboard", 16, 4), ("stripes", 20, 2)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    for pattern, n, size in RUNS:
        t0 = time.time()
        out = os.path.join(a.out, f"{pattern}_{n}")
        code = cli_main(["toy", "--pattern", pattern, "--n", str(n), "--size", str(size), "--epochs", str(a.epochs),
                         "--lr", str(a.lr), "--seed", str(a.seed), "--out", out])
        print(f"{pattern} {n}x{n}: exit {code}, {time.time() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
