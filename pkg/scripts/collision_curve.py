"""Sweep batch-collision probability against batch size.

Prints, for a corpus of N unique images, the probability that a uniformly
sampled batch of B captions contains two captions of the same image: the
exact log-space product, the closed-form approximation, and optionally a
Monte-Carlo estimate for spot-checking.

    python3 scripts/collision_curve.py
    python3 scripts/collision_curve.py --images 879406 --mc-trials 20000
    python3 scripts/collision_curve.py --csv curve.csv
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from rolecap.numerics import CollisionSpec, collision_probability

DEFAULT_BATCHES = [64, 128, 256, 512, 1024, 1536, 2048, 3072, 4096]


def monte_carlo(n: int, b: int, trials: int, rng: np.random.Generator) -> float:
    hits = 0
    done = 0
    chunk = max(1, 2_000_000 // b)
    while done < trials:
        count = min(chunk, trials - done)
        draws = rng.integers(0, n, size=(count, b))
        draws.sort(axis=1)
        hits += int((np.diff(draws, axis=1) == 0).any(axis=1).sum())
        done += count
    return hits / trials


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--images", type=int, default=10**6, help="unique images N")
    parser.add_argument(
        "--batches", type=int, nargs="+", default=DEFAULT_BATCHES, help="batch sizes to sweep"
    )
    parser.add_argument("--mc-trials", type=int, default=0, help="Monte-Carlo trials per point")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--csv", help="also write the table to this CSV file")
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    header = ["batch_size", "exact", "approx"]
    if args.mc_trials:
        header.append("monte_carlo")
    rows = []
    for b in args.batches:
        if b > args.images:
            print(f"skipping B={b}: exceeds N={args.images}", file=sys.stderr)
            continue
        spec = CollisionSpec(unique_images=args.images, batch_size=b)
        row = [
            b,
            collision_probability(spec, exact=True),
            collision_probability(spec, exact=False),
        ]
        if args.mc_trials:
            row.append(monte_carlo(args.images, b, args.mc_trials, rng))
        rows.append(row)

    widths = [12, 12, 12, 12][: len(header)]
    print("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for row in rows:
        cells = [f"{row[0]:>12d}"] + [f"{v:>12.6f}" for v in row[1:]]
        print("  ".join(cells))

    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        print(f"wrote {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
