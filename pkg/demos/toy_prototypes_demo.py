#!/usr/bin/env python3
"""Train the toy face/noise network and look at what the middle prototypes learned.

Each face carries one of two eye types (solid disc or ring). After training,
every middle co-group picks a winning prototype per image; a group that
separates eye types has purity near 1. The demo reports purity per group
before and after training and writes the mean eye area of each prototype of
the purest group as PGM files.

Defaults are sized for a couple of minutes on one core. Pass
``--per-class 600 --epochs 5`` for the acceptance-scale run.
"""
import argparse
from pathlib import Path

import numpy as np

from mpcaps import analysis
from mpcaps.data import ToyConfig, generate_toy
from mpcaps.network import Network
from mpcaps.numerics import Rng
from mpcaps.presets import TOY_SIGMA, toy_network
from mpcaps.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-class", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--out", type=Path, default=Path("toy_demo_out"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    data = generate_toy(ToyConfig(per_class=args.per_class, seed=args.seed))
    cfg = toy_network()
    print(f"{len(data)} images, {cfg.n_primary} primary capsules, {cfg.parameter_count()} parameters")

    init = Network.init(cfg, Rng(args.seed).spawn(1), TOY_SIGMA)
    np.set_printoptions(precision=2)
    print("purity at init   ", analysis.group_purities(init, data, 1))

    ckpt, report = train(cfg, data, TrainConfig(epochs=args.epochs, sigma=TOY_SIGMA, seed=args.seed),
                         progress=lambda r: print(f"  epoch {r['epoch']}: loss {r['train_loss']:.4f}, "
                                                  f"train acc {r['train_accuracy']:.3f}"))
    net = ckpt.model()
    purities = analysis.group_purities(net, data, 1)
    print("purity after     ", purities)

    group = int(np.argmax(purities))
    rep = analysis.prototype_analysis(net, data, 1, group)
    print(f"group {group}: wins per prototype {rep.counts.tolist()}, purity {rep.purity:.3f}, "
          f"margin {rep.margin:.2f} vs spread {rep.spread:.2f}")
    for p, mean in enumerate(rep.means):
        analysis.write_pgm(args.out / f"prototype{p}.pgm", mean)
    print(f"mean eye areas written to {args.out}/")


if __name__ == "__main__":
    main()
