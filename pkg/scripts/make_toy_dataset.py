#!/usr/bin/env python3
"""Write a directory of synthetic two-texture PPM images.

Usage: python scripts/make_toy_dataset.py --out data/train --count 8 --seed 100
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from samic import ppm                                    # noqa: E402
from samic.toydata import make_dataset                   # noqa: E402


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--count", type=int, default=8)
    parser.add_argument("--seed", type=int, default=100)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--noise", type=float, default=0.15)
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    images = make_dataset(args.seed, args.count, args.size, args.size, args.noise)
    for i, image in enumerate(images):
        ppm.write_ppm(os.path.join(args.out, f"toy_{i:03d}.ppm"), image)
    print(f"wrote {args.count} images to {args.out}")


if __name__ == "__main__":
    main()
