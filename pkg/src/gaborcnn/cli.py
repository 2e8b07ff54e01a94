"""Command-line surface: gen-data, train, eval, export-filters, gradcheck.

Exit codes: 0 success, 1 failed gradient check, 2 config error,
3 data error, 4 numeric abort (non-finite loss).
"""

import argparse
import sys
from pathlib import Path

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import train as train_mod
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GaborCnnError,
    NumericError,
)

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_EPILOG = (
    "exit codes: 0 success, 1 failed gradient check, 2 config error, "
    "3 data error, 4 numeric abort"
)


def _print_resolved(title, pairs):
    print(f"resolved {title}:")
    for k, v in pairs:
        print(f"  {k} = {v}")


def cmd_gen_data(args):
    out = Path(args.out)
    _print_resolved(
        "gen-data options",
        [
            ("out", args.out),
            ("classes", args.classes),
            ("per_class", args.per_class),
            ("size", args.size),
            ("noise", args.noise),
            ("seed", args.seed),
            ("force", args.force),
        ],
    )
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    ds = data_mod.gen_texture_dataset(
        args.per_class, args.size, args.classes, args.noise, args.seed
    )
    data_mod.save_dataset_png(ds, out)
    print(f"wrote {len(ds)} images in {ds.num_classes} classes to {out}")
    return EXIT_OK


def cmd_train(args):
    config = train_mod.parse_config(args.config)
    if not config.data_dir:
        raise ConfigError("config key data_dir is required for train")
    if not config.out_dir:
        raise ConfigError("config key out_dir is required for train")
    print("resolved config:")
    print(train_mod.resolved_config_text(config), end="")

    if args.paired:
        summary = train_mod.run_paired_experiment(config, log=print)
        print(summary["text"], end="")
    else:
        metrics, _ = train_mod.run_single_experiment(config, log=print)
        print(f"final val_acc {metrics[-1].val_acc:.6g}")
    return EXIT_OK


def cmd_eval(args):
    config_path = args.config
    if config_path is None:
        config_path = Path(args.checkpoint).parent / "config_resolved.txt"
    config = train_mod.parse_config(config_path)
    print("resolved config:")
    print(train_mod.resolved_config_text(config), end="")

    ds = data_mod.load_image_dir(args.data, config.image_size, config.channels)
    network = train_mod.build_network(
        config.network,
        (config.channels, config.image_size, config.image_size),
        ds.num_classes,
        config.seed,
    )
    _, stats = train_mod.load_checkpoint(network, args.checkpoint)
    if config.normalize:
        if stats is None:
            raise DataError("checkpoint carries no normalization stats")
        ds = data_mod.normalize(ds, stats_from=stats)
    loss, acc = train_mod.evaluate(network, ds)
    print(f"loss {loss:.6g}")
    print(f"accuracy {acc:.6g}")
    return EXIT_OK


def cmd_export_filters(args):
    config_path = args.config
    if config_path is None:
        config_path = Path(args.checkpoint).parent / "config_resolved.txt"
    config = train_mod.parse_config(config_path)
    _print_resolved(
        "export-filters options",
        [("checkpoint", args.checkpoint), ("out", args.out), ("config", str(config_path))],
    )
    # class count only shapes the final dense layer, which export ignores;
    # recover it from the checkpoint's last-layer bias
    tensors = train_mod.load_tensors(args.checkpoint)
    dense_biases = [
        v for k, v in tensors.items() if k.startswith("layer") and k.endswith("/bias")
    ]
    num_classes = int(dense_biases[-1].shape[0]) if dense_biases else 2
    network = train_mod.build_network(
        config.network,
        (config.channels, config.image_size, config.image_size),
        num_classes,
        config.seed,
    )
    train_mod.load_checkpoint(network, args.checkpoint)
    rows, cols = train_mod.export_filters(network, args.out)
    print(f"wrote {rows}x{cols} filter grid to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    _print_resolved(
        "gradcheck options", [("seed", args.seed), ("layer", args.layer)]
    )
    results = gradcheck_mod.run(seed=args.seed, layer=args.layer)
    failed = False
    for name, err in results:
        ok = err <= gradcheck_mod.TOLERANCE
        failed |= not ok
        print(f"{name:16s} max relative error {err:.3e}  {'ok' if ok else 'FAIL'}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gaborcnn",
        description=(
            "Convolutional networks with a learnable-Gabor first layer: "
            "data generation, paired training experiments, evaluation, "
            "filter export, and gradient verification."
        ),
        epilog=_EPILOG,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "gen-data",
        help="write a synthetic oriented-grating dataset as root/<class>/*.png",
        epilog=_EPILOG,
    )
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", type=int, default=4,
                   help="number of orientation classes, 2..8 (default 4)")
    p.add_argument("--per-class", type=int, default=600, dest="per_class",
                   help="images per class (default 600)")
    p.add_argument("--size", type=int, default=32, help="image side in pixels (default 32)")
    p.add_argument("--noise", type=float, default=0.05,
                   help="Gaussian pixel noise std (default 0.05)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser(
        "train",
        help="train from a config file; --paired also trains the standard-conv twin",
        epilog=_EPILOG,
    )
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--paired", action="store_true",
                   help="train both the configured network and its conv twin")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser(
        "eval",
        help="evaluate a checkpoint on a dataset directory",
        epilog=_EPILOG,
    )
    p.add_argument("--checkpoint", required=True, help="GNET1 checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", default=None,
                   help="config file (default: config_resolved.txt beside the checkpoint)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser(
        "export-filters",
        help="render a checkpoint's first-layer kernels as a PNG grid",
        epilog=_EPILOG,
    )
    p.add_argument("--checkpoint", required=True, help="GNET1 checkpoint file")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--config", default=None,
                   help="config file (default: config_resolved.txt beside the checkpoint)")
    p.set_defaults(fn=cmd_export_filters)

    p = sub.add_parser(
        "gradcheck",
        help="finite-difference verification of every analytic gradient",
        epilog=_EPILOG,
    )
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--layer", default=None,
                   help="run only checks whose name contains this substring")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except GaborCnnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
