"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
``ENCOFA_RUN_DIR`` and ``ENCOFA_SEED`` override the run directory and seed
when the corresponding flag is not given.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from .exceptions import ConfigError, DataError, EncofaError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

logger = logging.getLogger("encofa")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors, which is also our config code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _env_seed(args):
    if getattr(args, "seed", None) is None and os.environ.get("ENCOFA_SEED"):
        try:
            args.seed = int(os.environ["ENCOFA_SEED"])
        except ValueError:
            raise ConfigError(f"ENCOFA_SEED must be an integer, got {os.environ['ENCOFA_SEED']!r}",
                              key="ENCOFA_SEED")
    return args.seed


def _run_dir(args, default=None):
    return args.run_dir or os.environ.get("ENCOFA_RUN_DIR") or default


def _load(args):
    from .config import RunConfig, load_config

    return load_config(args.config) if args.config else RunConfig().validate()


def cmd_generate_data(args):
    from .dataset import generate_blobs, save_splits

    cfg = _load(args)
    d = cfg.data
    seed = _env_seed(args)
    seed = seed if seed is not None else (d.seed if d.seed is not None else cfg.train.seed)
    splits, pool = generate_blobs(d.n_per_class, d.num_classes, d.num_ood_classes, d.dim, d.separation, seed=seed)
    save_splits(args.out, splits, pool)
    print(f"wrote {len(splits.train)}/{len(splits.val)}/{len(splits.test)} train/val/test samples "
          f"and {len(pool)} OOD samples to {args.out}")
    return EXIT_OK


def cmd_inject_noise(args):
    from .dataset import NoiseSpec, inject_noise, load_splits, save_splits

    splits, pool = load_splits(args.data)
    if "noise" in splits.provenance:
        raise DataError(f"{args.data} already carries injected noise")
    seed = _env_seed(args)
    spec = NoiseSpec(args.alpha, args.beta, seed=0 if seed is None else seed,
                     id_class_count=splits.num_classes, ood_class_count=splits.num_ood_classes,
                     instance_profile=args.profile)
    if pool is None:
        pool = splits.test.subset(np.zeros(0, np.int64))
    noisy = inject_noise(splits, pool, spec)
    save_splits(args.out, noisy, pool)
    print(json.dumps(noisy.provenance["noise"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    from .trainer import fit

    cfg = _load(args)
    seed = _env_seed(args)
    if seed is not None:
        cfg.train.seed = seed
    if args.variant:
        cfg.train.variant = args.variant
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.validate()
    run_dir = _run_dir(args, cfg.train.run_dir)
    cfg.train.run_dir = run_dir
    result = fit(cfg, run_dir=run_dir)
    last = result.history[-1]
    print(f"{cfg.train.variant} seed={cfg.train.seed}: Acc_test={result.acc_test:.4f} "
          f"(best-val model {result.acc_test_best:.4f} at epoch {result.best_epoch}) "
          f"Acc_type={last['Acc_type_train']:.4f} F1_ON={last['F1_ON_train']:.4f} -> {run_dir}")
    return EXIT_OK


def cmd_evaluate(args):
    from .backbone import load_checkpoint
    from .config import config_from_dict
    from .metrics import accuracy, predict
    from .trainer import load_data

    run_dir = _run_dir(args)
    if not run_dir:
        raise ConfigError("evaluate needs --run-dir (or ENCOFA_RUN_DIR)", key="run_dir")
    cfg_path = os.path.join(run_dir, "config.json")
    ckpt = os.path.join(run_dir, "best.bin" if args.checkpoint == "best" else "checkpoint.bin")
    for path in (cfg_path, ckpt):
        if not os.path.exists(path):
            raise DataError(f"missing run artifact: {path}")
    with open(cfg_path) as fh:
        cfg = config_from_dict(json.load(fh))
    splits = load_data(cfg)
    model, extra = load_checkpoint(ckpt)
    out = {"checkpoint": args.checkpoint, "epoch": extra.get("epoch")}
    for name in ("train", "val", "test"):
        split = getattr(splits, name)
        pred = predict(model, split.inputs)
        out[f"acc_{name}_true"] = accuracy(pred, split.true_label)
        out[f"acc_{name}_observed"] = accuracy(pred, split.observed)
    path = os.path.join(run_dir, f"evaluation_{args.checkpoint}.json")
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(args):
    from .report import collate_metrics, write_report

    run_dirs = args.run_dir or ([os.environ["ENCOFA_RUN_DIR"]] if os.environ.get("ENCOFA_RUN_DIR") else [])
    if not run_dirs:
        raise ConfigError("report needs --run-dir (or ENCOFA_RUN_DIR)", key="run_dir")
    for rd in run_dirs:
        if not os.path.exists(os.path.join(rd, "metrics.csv")):
            raise DataError(f"{rd}: no metrics.csv; is this a finished run directory?")
        summary, files = write_report(rd, projection=args.projection, plots=not args.no_plots)
        print(f"{rd}: Acc_test={summary['acc_test']:.4f} Acc_type={summary['acc_type_train']:.4f} "
              f"F1_ON={summary['f1_on_train']:.4f}; wrote {', '.join(os.path.basename(f) for f in files)}")
    if args.collate:
        collate_metrics(run_dirs, args.collate)
        print(f"collated metrics -> {args.collate}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="encofa", description="Noise-robust training under mixed closed/open-set label noise.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write synthetic blob splits and an OOD pool as CSV")
    g.add_argument("--config", help="TOML run config ([data] section is used)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    n = sub.add_parser("inject-noise", help="corrupt a clean CSV dataset with mixed label noise")
    n.add_argument("--data", required=True, help="directory written by generate-data")
    n.add_argument("--alpha", type=float, required=True, help="overall noise rate")
    n.add_argument("--beta", type=float, required=True, help="open-set share of the noise")
    n.add_argument("--profile", default="probe_confusion", choices=["probe_confusion", "truncated_gaussian"])
    n.add_argument("--seed", type=int)
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_inject_noise)

    t = sub.add_parser("train", help="train one configuration and write run artifacts")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--run-dir")
    t.add_argument("--variant", choices=["ce", "cls_cl_cn", "cls", "cls_ensc", "encofa"])
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a saved checkpoint on every split")
    e.add_argument("--run-dir")
    e.add_argument("--checkpoint", choices=["final", "best"], default="final")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="summary JSON and plots for finished runs")
    r.add_argument("--run-dir", action="append", help="repeatable")
    r.add_argument("--projection", default="pca", choices=["pca", "random", "first2"])
    r.add_argument("--collate", help="also write all runs' metrics into this CSV")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if getattr(exc, "key", None) else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EncofaError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
