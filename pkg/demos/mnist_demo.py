#!/usr/bin/env python3
"""Compare 3 and 1 final prototypes per digit on an MNIST subset.

Reads the four IDX files from ``--data-dir`` or ``$MPCAPS_MNIST_DIR``.
With ``--train 10000 --epochs 10`` this is the desk-scale comparison; the
defaults finish in a few minutes.
"""
import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from mpcaps.cli import _find
from mpcaps.data import load_idx
from mpcaps.presets import MNIST_SIGMA, mnist_network
from mpcaps.train import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", type=Path, default=os.environ.get("MPCAPS_MNIST_DIR"))
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if args.data_dir is None:
        sys.exit("set --data-dir or MPCAPS_MNIST_DIR to a directory holding the MNIST IDX files")

    d = Path(args.data_dir)
    tr = load_idx(_find(d, "train-images"), _find(d, "train-labels")).subset(np.arange(args.train))
    te = load_idx(_find(d, "t10k-images"), _find(d, "t10k-labels")).subset(np.arange(args.test))
    for protos in (3, 1):
        t0 = time.perf_counter()
        ckpt, _ = train(mnist_network(prototypes_final=protos), tr,
                        TrainConfig(epochs=args.epochs, sigma=MNIST_SIGMA, seed=args.seed))
        acc, _ = evaluate(ckpt, te)
        print(f"{protos} final prototype(s): test accuracy {acc:.4f} ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
