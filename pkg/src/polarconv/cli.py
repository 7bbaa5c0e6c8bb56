"""Command line interface.

The POLARCONV_NUM_THREADS environment variable pins the BLAS thread count;
it must be set before numpy loads, so this module configures it at import
time when run as the entry point.
"""

import argparse
import os
import sys

_threads = os.environ.get("POLARCONV_NUM_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)


def _add_common(p):
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--init", default=None, help="initialize from this checkpoint")


def _load_config(args):
    from .config import parse_config

    config = parse_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = args.out
    if getattr(args, "init", None):
        config.init_checkpoint = args.init
    return config


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="polarconv",
        description="Train and probe norm-angle factored convolution networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, doc in [("train", "train a model and write metrics + checkpoint"),
                      ("adv-train", "FGSM adversarial training"),
                      ("eval", "evaluate a checkpoint on the test split"),
                      ("gradcheck", "verify analytic gradients against finite differences"),
                      ("attack", "clean/FGSM/BIM accuracy of a checkpoint")]:
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        if name in ("eval", "attack"):
            p.add_argument("--checkpoint", required=True)
        if name == "attack":
            p.add_argument("--examples", type=int, default=0,
                           help="limit the number of attacked test images (0 = all)")

    p = sub.add_parser("make-data", help="materialize the offline digit corpus (IDX files)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-csv", help="merge run metrics into one CSV + figure")
    p.add_argument("runs", nargs="+", help="run directories containing metrics.csv")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--figure", default=None, help="optional comparison figure path")

    args = parser.parse_args(argv)

    if args.command == "make-data":
        from .datasets import materialize_digit_corpus
        out = materialize_digit_corpus(args.out, seed=args.seed)
        print(f"wrote digit corpus to {out}")
        return 0

    if args.command == "export-csv":
        from .report import export_combined_csv
        out = export_combined_csv(args.runs, args.out, args.figure)
        print(f"wrote {out}")
        return 0

    from . import harness

    config = _load_config(args)

    if args.command == "train":
        result = harness.train(config)
        print(f"final eval: loss {result.final_eval_loss:.4f} "
              f"acc {result.final_eval_acc:.4f}")
        print(f"checkpoint: {result.checkpoint}")
        return 0

    if args.command == "adv-train":
        result = harness.adversarial_train(config)
        print(f"final eval: loss {result.final_eval_loss:.4f} "
              f"acc {result.final_eval_acc:.4f}")
        print(f"checkpoint: {result.checkpoint}")
        return 0

    if args.command == "eval":
        import numpy as np
        from .checkpoint import load_into_network
        net = harness.build_network(config, np.random.default_rng(config.seed))
        load_into_network(net, args.checkpoint)
        _, _, te_x, te_y = harness.load_dataset(config)
        loss, acc = harness.evaluate(net, te_x, te_y)
        print(f"test loss {loss:.4f}  test acc {acc:.4f}")
        return 0

    if args.command == "gradcheck":
        report = harness.gradcheck(config)
        print(report.summary())
        return 0 if report.ok else 1

    if args.command == "attack":
        results = harness.attack_eval(config, args.checkpoint, limit=args.examples,
                                      out_dir=config.out_dir)
        for k in ("clean", "fgsm", "bim"):
            print(f"{k:>6}: {results[k]:.4f}")
        print(f"max perturbation: {results['max_perturbation']:.3f}/255")
        return 0

    parser.error(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
