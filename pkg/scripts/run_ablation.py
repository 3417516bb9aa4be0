#!/usr/bin/env python3
"""Scan-order ablation: semantic clustering (K=16) against the raster
baseline (K=1), and the effect of the low-rank latent reduction, all at
identical seeds and step budgets. Writes a summary CSV.

Usage: python scripts/run_ablation.py --out ablation.csv --steps 2000
"""

import argparse
import csv
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from samic import codec                                   # noqa: E402
from samic.toydata import make_dataset                    # noqa: E402


def train_variant(tag: str, clusters: int, use_rrm: bool, images,
                  steps: int, seed: int, lr: float) -> dict:
    model = codec.CodecModel(
        codec.toy_config(clusters=clusters, use_rrm=use_rrm),
        np.random.default_rng(seed))
    opt = codec.Adam(list(model.named_params()), lr=lr)
    step_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    losses = []
    t0 = time.time()
    for step in range(steps):
        parts = codec.train_step(model, [images[step % len(images)]], opt, step_rng)
        if parts is not None:
            losses.append(parts["loss"])
    converged = float(np.mean(losses[-100:]))
    print(f"{tag}: converged loss {converged:.4f} in {time.time() - t0:.0f}s")
    return {"variant": tag, "clusters": clusters, "rrm": use_rrm,
            "converged_loss": converged, "steps": steps, "seed": seed}


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--lr", type=float, default=1e-3)
    args = parser.parse_args()

    images = make_dataset(100, 8)
    rows = [
        train_variant("raster_k1", 1, False, images, args.steps, args.seed, args.lr),
        train_variant("sass_k16", 16, False, images, args.steps, args.seed, args.lr),
        train_variant("sass_k16_rrm", 16, True, images, args.steps, args.seed, args.lr),
    ]
    with open(args.out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"summary -> {args.out}")


if __name__ == "__main__":
    main()
