#!/usr/bin/env python3
"""Rate-control sweep: train one toy model per lambda index and report
mean coded bpp on a held-out set. Higher lambda weights the rate term
harder, so bpp should fall monotonically.

Usage: python scripts/sweep_lambda.py --out sweep.csv --steps 2000
"""

import argparse
import csv
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from samic import codec                                   # noqa: E402
from samic.toydata import make_dataset                    # noqa: E402


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--indices", type=int, nargs="+", default=[0, 3])
    args = parser.parse_args()

    train_images = make_dataset(100, 8)
    eval_images = make_dataset(999, 10)
    rows = []
    for idx in args.indices:
        model = codec.CodecModel(codec.toy_config(lambda_index=idx),
                                 np.random.default_rng(args.seed))
        opt = codec.Adam(list(model.named_params()), lr=args.lr)
        step_rng = np.random.default_rng(np.random.SeedSequence((args.seed, 0xC0DE)))
        for step in range(args.steps):
            codec.train_step(model, [train_images[step % 8]], opt, step_rng)
        bpps = []
        for image in eval_images:
            _, stats = model.encode_image(image)
            bpps.append(stats["bpp_actual"])
        rows.append({"lambda_index": idx,
                     "lambda": codec.LAMBDA_GRID[idx],
                     "mean_bpp": float(np.mean(bpps))})
        print(rows[-1])
    with open(args.out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    main()
