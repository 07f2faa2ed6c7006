"""Command-line entry point: ``mpcaps <command> [flags]``.

Commands: gen-toy, train, eval, gradcheck, prototypes, stats. Every command
that writes files also writes ``manifest.json`` next to them; passing that
manifest back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric failure,
4 acceptance-check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import analysis, data, gradcheck, presets, stats, train
from .errors import FormatError, InvalidArgument, NumericFailure
from .capsnet import ConvLayerConfig
from .network import CapsLayerSpec, NetworkConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4

log = logging.getLogger("mpcaps")


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


# --- config files and manifests ------------------------------------------------

def read_config(path) -> dict:
    """Flat ``key = value`` lines (``#`` comments), or a manifest written by this tool."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return dict(json.loads(text)["config"])
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv):
    """Flags > config file > defaults: config values become the parser defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config(known.config)
    values.pop("command", None)
    dests = {a.dest: a for a in sub._actions}
    converted = {}
    for key, raw in values.items():
        if key not in dests:
            raise UsageError(f"unknown config key {key!r}")
        action = dests[key]
        if isinstance(raw, str) and action.type is not None:
            raw = action.type(raw)
        elif isinstance(raw, str) and isinstance(action, argparse._StoreTrueAction):
            raw = raw.lower() in ("1", "true", "yes")
        converted[key] = raw
    sub.set_defaults(**converted)


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                   inputs: dict, outputs: list) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose")}
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(outputs),
        "seed": config.get("seed"),
        "version": _version(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ints(text: str):
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _opt_float(text):
    return None if text in (None, "", "None", "none") else float(text)


# --- datasets ---------------------------------------------------------------------

def _toy_config(args) -> data.ToyConfig:
    try:
        return data.ToyConfig(per_class=args.per_class, image_size=args.image_size,
                              shift_max=args.shift_max, scale_range=(args.scale_min, args.scale_max),
                              dropout_patches=args.patches, patch_size=args.patch_size,
                              seed=args.seed)
    except InvalidArgument as exc:
        raise UsageError(str(exc))


def _add_toy_flags(p, seed_help="toy generator seed"):
    g = p.add_argument_group("toy dataset")
    g.add_argument("--seed", type=int, default=0, help=seed_help)
    g.add_argument("--per-class", type=int, default=600, help="images per class")
    g.add_argument("--image-size", type=int, default=64, help="image side in pixels")
    g.add_argument("--shift-max", type=float, default=3.0, help="max eye shift per axis (px)")
    g.add_argument("--scale-min", type=float, default=0.7, help="smallest eye scale")
    g.add_argument("--scale-max", type=float, default=1.0, help="largest eye scale")
    g.add_argument("--patches", type=int, default=5, help="dropout patches per face")
    g.add_argument("--patch-size", type=int, default=10, help="dropout patch side (px)")


def _load_data(kind: str, path, args, split: str):
    if kind == "toy":
        if path is None:
            return data.generate_toy(_toy_config(args))
        return data.load_dataset(path)
    if kind == "features":
        if path is None:
            raise UsageError("--data features needs a dataset directory")
        return data.load_dataset(path)
    if kind in ("mnist", "idx"):
        where = path or os.environ.get("MPCAPS_MNIST_DIR")
        directory = Path(where) if where else None
        if directory is None or not directory.is_dir():
            raise FormatError("MNIST directory not found; pass --data-dir or set MPCAPS_MNIST_DIR")
        stem = "train" if split == "train" else "t10k"
        ds = data.load_idx(_find(directory, f"{stem}-images"), _find(directory, f"{stem}-labels"))
        limit = args.train_limit if split == "train" else args.test_limit
        if limit and limit < len(ds):
            ds = ds.subset(np.arange(limit))
        return ds
    raise UsageError(f"unknown dataset kind {kind!r}")


def _find(directory: Path, prefix: str) -> Path:
    for suffix in ("-idx3-ubyte", "-idx1-ubyte", ".idx3-ubyte", ".idx1-ubyte"):
        for ext in ("", ".gz"):
            p = directory / f"{prefix}{suffix}{ext}"
            if p.exists():
                return p
    raise FormatError(f"no {prefix}* IDX file in {directory}")


# --- commands -----------------------------------------------------------------------

def cmd_gen_toy(args) -> int:
    out = _out_dir(args.out)
    ds = data.generate_toy(_toy_config(args))
    data.save_dataset(ds, out)
    write_manifest(out, "gen-toy", args, {}, ["images.mpcf", "labels.bin"])
    print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


def _network_config(args, train_set) -> NetworkConfig:
    toy = args.preset == "toy" or (args.preset == "auto" and args.data == "toy")
    n_layers = args.layers or (3 if toy else 4)
    if n_layers < 2:
        raise UsageError("--layers must be >= 2 (primary capsules plus the class layer)")
    conv = _ints(args.conv_channels)
    try:
        if toy:
            base = presets.toy_network(args.groups_middle or 8, args.prototypes_middle, conv or (8, 16))
            middle = base.layers[:1] * (n_layers - 2)
        else:
            base = presets.mnist_network(args.prototypes_final, n_layers, args.prototypes_middle,
                                         conv or (32, 64))
            middle = base.layers[:-1]
            if args.groups_middle:
                middle = [CapsLayerSpec(args.groups_middle, s.prototypes, s.dim) for s in middle]
        final = CapsLayerSpec(train_set.n_classes, args.prototypes_final, base.layers[-1].dim)
        c, h, w = train_set.images.shape[1:]
        if args.data == "features":
            conv_cfgs = []  # external features feed the primary capsules directly
        else:
            first = base.conv[0]
            conv_cfgs = [ConvLayerConfig(c, first.out_channels, first.kernel_size, first.stride)] + base.conv[1:]
        return NetworkConfig(
            input_shape=(c, h, w), n_classes=train_set.n_classes, layers=middle + [final],
            conv=conv_cfgs, primary_dim=args.primary_dim, routing_iters=args.routing_iters,
            predict_rule=args.predict_rule, detach_coupling=args.detach_coupling,
        )
    except InvalidArgument as exc:
        raise UsageError(f"incompatible network shape: {exc}")


def _sigma(args) -> float:
    if args.sigma is not None:
        return args.sigma
    toy = args.preset == "toy" or (args.preset == "auto" and args.data == "toy")
    return presets.TOY_SIGMA if toy else presets.MNIST_SIGMA


def cmd_train(args) -> int:
    out = _out_dir(args.out)
    train_set = _load_data(args.data, args.data_dir, args, "train")
    test_set = None
    if args.test_dir is not None or args.data in ("mnist", "idx"):
        test_set = _load_data(args.data, args.test_dir or args.data_dir, args, "test")
    net_cfg = _network_config(args, train_set)
    cfg = train.TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                            beta=args.beta, sigma=_sigma(args), seed=args.seed, dtype=args.dtype,
                            clip_norm=args.clip_norm, keep_best=args.keep_best)
    ckpt, report = train.train(net_cfg, train_set, cfg, test_set,
                               progress=lambda rec: log.info("%s", json.dumps(rec, sort_keys=True)))
    train.save_checkpoint(ckpt, out / "model.ckpt")
    (out / "report.jsonl").write_text(report.to_jsonl())
    (out / "timing.jsonl").write_text(report.timing_jsonl())
    write_manifest(out, "train", args, {"data_dir": args.data_dir, "test_dir": args.test_dir},
                   ["model.ckpt", "report.jsonl", "timing.jsonl"])
    print(json.dumps({"accuracy": report.final_accuracy, "parameters": report.parameter_count}))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    ds = _load_data(args.data, args.data_dir, args, "test")
    acc, cm = train.evaluate(ckpt, ds)
    result = {"accuracy": acc, "confusion": cm.tolist(), "count": len(ds)}
    print(json.dumps(result))
    if args.out is not None:
        out = _out_dir(args.out)
        (out / "eval.json").write_text(json.dumps(result, sort_keys=True) + "\n")
        write_manifest(out, "eval", args, {"checkpoint": args.checkpoint, "data_dir": args.data_dir},
                       ["eval.json"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.gradcheck(h=args.h, seed=args.seed)
    print(gradcheck.format_table(results, args.tolerance))
    worst = max(r.rel_error for r in results)
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    return EXIT_OK if worst <= args.tolerance else EXIT_CHECK


def cmd_prototypes(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    net = ckpt.model()
    ds = data.generate_toy(_toy_config(args)) if args.data_dir is None else data.load_dataset(args.data_dir)
    layer = args.layer
    if not 0 <= layer < len(net.config.layers) or net.specs[layer].is_trivial:
        raise UsageError(f"checkpoint has no multi-prototype co-groups in capsule layer {layer}")
    if max(net.specs[layer].sizes) < 2:
        raise UsageError(f"co-groups of capsule layer {layer} hold a single prototype")
    group = args.group
    if group is None:
        # the eye group is not known a priori; take the group whose winners track the eye type best
        group = int(np.argmax(analysis.group_purities(net, ds, layer)))
    toy_cfg = _toy_config(args) if args.data_dir is None else data.ToyConfig()
    rep = analysis.prototype_analysis(net, ds, layer, group, toy_cfg)
    out = _out_dir(args.out)
    names = []
    for p, mean in enumerate(rep.means):
        peak = mean.max()
        analysis.write_pgm(out / f"prototype{p}.pgm", mean / peak if peak > 0 else mean)
        names.append(f"prototype{p}.pgm")
    result = {"layer": layer, "group": group, "purity": rep.purity, "counts": rep.counts.tolist(),
              "margin": rep.margin, "spread": rep.spread}
    (out / "prototypes.json").write_text(json.dumps(result, sort_keys=True) + "\n")
    write_manifest(out, "prototypes", args, {"checkpoint": args.checkpoint, "data_dir": args.data_dir},
                   names + ["prototypes.json"])
    print(json.dumps(result))
    return EXIT_OK


def _read_values(path) -> np.ndarray:
    try:
        return np.array([float(t) for t in Path(path).read_text().replace(",", " ").split()])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}")


def cmd_stats(args) -> int:
    a, b = _read_values(args.a), _read_values(args.b)
    if a.size != b.size:
        raise UsageError(f"lists differ in length: {a.size} vs {b.size}")
    res = stats.wilcoxon_signed_rank(a, b)
    print(f"n={res.n} W+={res.w_plus:g} W-={res.w_minus:g} statistic={res.statistic:g} "
          f"p={res.p_value:.6g} method={res.method}")
    verdict = "reject" if res.p_value < args.alpha else "retain"
    print(f"alpha={args.alpha:g}: {verdict} the null hypothesis of no difference")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="mpcaps", description=__doc__.split("\n")[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="write the face/noise toy dataset", formatter_class=fmt)
    p.add_argument("--config", help="key=value file or manifest; flags override it")
    p.add_argument("--out", help="output directory (required)")
    _add_toy_flags(p)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="train a network", formatter_class=fmt)
    p.add_argument("--config", help="key=value file or manifest; flags override it")
    p.add_argument("--out", help="output directory (required)")
    p.add_argument("--data", choices=["toy", "mnist", "idx", "features"], default="toy", help="dataset kind")
    p.add_argument("--data-dir", help="dataset directory (toy/features) or IDX directory (mnist)")
    p.add_argument("--test-dir", help="held-out dataset directory; mnist uses the t10k files")
    p.add_argument("--train-limit", type=int, default=10000, help="first N training images (mnist)")
    p.add_argument("--test-limit", type=int, default=0, help="first N test images, 0 = all (mnist)")
    g = p.add_argument_group("network shape")
    g.add_argument("--preset", choices=["auto", "toy", "mnist"], default="auto",
                   help="base architecture; auto picks by dataset")
    g.add_argument("--layers", type=int, default=0,
                   help="capsule layers including primary and class layers, 0 = preset (toy 3, mnist 4)")
    g.add_argument("--prototypes-final", type=int, default=1, help="prototypes per class in the final layer")
    g.add_argument("--prototypes-middle", type=int, default=2, help="prototypes per part in middle layers")
    g.add_argument("--groups-middle", type=int, default=0, help="co-groups per middle layer, 0 = preset")
    g.add_argument("--conv-channels", default="", help="comma-separated conv widths, empty = preset")
    g.add_argument("--primary-dim", type=int, default=8, help="primary capsule dimension")
    g.add_argument("--routing-iters", type=int, default=3, help="dynamic routing iterations")
    g.add_argument("--predict-rule", choices=["sum", "max"], default="sum", help="class score rule")
    g.add_argument("--detach-coupling", action="store_true", help="treat coupling coefficients as constants")
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=100, help="training epochs")
    g.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    g.add_argument("--batch-size", type=int, default=16, help="minibatch size")
    g.add_argument("--beta", type=float, default=0.01, help="regularizer weight")
    g.add_argument("--sigma", type=_opt_float, default=None,
                   help="transform init std and regularizer scale, None = preset (toy 0.05, mnist 1.0)")
    g.add_argument("--dtype", choices=["float32", "float64"], default="float32", help="parameter dtype")
    g.add_argument("--clip-norm", type=_opt_float, default=None, help="global gradient-norm clip")
    g.add_argument("--keep-best", action="store_true", help="keep the epoch with best held-out accuracy")
    _add_toy_flags(p, "training seed; also seeds the toy generator when no --data-dir is given")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("--config", help="key=value file or manifest; flags override it")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", choices=["toy", "mnist", "idx", "features"], default="toy", help="dataset kind")
    p.add_argument("--data-dir", help="dataset directory")
    p.add_argument("--test-limit", type=int, default=0, help="first N test images, 0 = all (mnist)")
    p.add_argument("--out", help="optional output directory for eval.json")
    _add_toy_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass", formatter_class=fmt)
    p.add_argument("--config", help="key=value file or manifest; flags override it")
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--seed", type=int, default=0, help="parameter and input seed")
    p.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE, help="max allowed relative error")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("prototypes", help="mean eye image per winning prototype", formatter_class=fmt)
    p.add_argument("--config", help="key=value file or manifest; flags override it")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data-dir", help="toy dataset directory; generated from the toy flags if absent")
    p.add_argument("--layer", type=int, default=1, help="capsule layer holding the co-groups")
    p.add_argument("--group", type=int, default=None, help="co-group index; default: highest purity")
    p.add_argument("--out", help="output directory (required)")
    _add_toy_flags(p)
    p.set_defaults(func=cmd_prototypes)

    p = sub.add_parser("stats", help="Wilcoxon signed-rank test on paired accuracies", formatter_class=fmt)
    p.add_argument("--config", help="key=value file or manifest; flags override it")
    p.add_argument("--a", required=True, help="file with the first accuracy list")
    p.add_argument("--b", required=True, help="file with the paired accuracy list")
    p.add_argument("--alpha", type=float, default=0.05, help="significance level for the decision line")
    p.set_defaults(func=cmd_stats)
    return parser


def _limit_threads():
    n = os.environ.get("MPCAPS_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args_pre, _ = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        sub = parser._subparsers._group_actions[0].choices[args_pre.command]
        _apply_config(parser, sub, argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mpcaps: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mpcaps: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"mpcaps: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"mpcaps: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidArgument as exc:
        print(f"mpcaps: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
