"""Target-only baseline against MF-SCSN on the synthetic transfer benchmark.

    python3 demos/transfer_benchmark.py --seeds 42 43 --epochs 10
"""
import argparse

import numpy as np

from fedscsn.harness import transfer_benchmark


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[42, 43, 44, 45, 46])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--common-size", type=int, default=160)
    p.add_argument("--val-per-subject", type=int, default=6)
    args = p.parse_args()
    print("seed  baseline  mfscsn  gap_pp  seconds")
    runs = []
    for seed in args.seeds:
        r = transfer_benchmark(seed, args.epochs, args.common_size, args.val_per_subject)
        runs.append(r)
        print(f"{seed:>4}  {r.baseline:8.3f}  {r.mfscsn:6.3f}  {100 * r.gap:+6.1f}  {r.seconds:7.0f}", flush=True)
    print(f"mean  {np.mean([r.baseline for r in runs]):8.3f}  {np.mean([r.mfscsn for r in runs]):6.3f}  "
          f"{100 * np.mean([r.gap for r in runs]):+6.1f}")


if __name__ == "__main__":
    main()
