#!/usr/bin/env python3
"""Walk through the gradient check on the miniature network.

Prints the per-group relative error at a few step sizes. The error should
fall with h until round-off takes over near h = 1e-5; between 1e-3 and 5e-4
the ratio is close to 4, the signature of second-order central differences.
"""
import argparse

from mpcaps.gradcheck import TOLERANCE, format_table, gradcheck


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sweeps = {h: gradcheck(h=h, seed=args.seed) for h in (1e-3, 5e-4, 1e-5)}
    print(f"analytic vs central differences, seed {args.seed}, tolerance {TOLERANCE:g}\n")
    print(format_table(sweeps[1e-5]))
    print("\nstep-size sweep (rel error)")
    names = [r.name for r in sweeps[1e-5]]
    print(f"{'group':<14}" + "".join(f"{h:>12g}" for h in sweeps) + f"{'ratio':>8}")
    for i, name in enumerate(names):
        errs = [sweeps[h][i].rel_error for h in sweeps]
        print(f"{name:<14}" + "".join(f"{e:>12.2e}" for e in errs) + f"{errs[0] / errs[1]:>8.2f}")


if __name__ == "__main__":
    main()
