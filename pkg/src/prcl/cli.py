"""Command line front end: dataset generation, training, evaluation, and sweeps."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import configio, data, harness
from .model import load_checkpoint


def _cmd_gen_data(args) -> int:
    spec = configio.load_dataset_spec(args.spec_file)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    ds = data.generate(spec)
    data.save_dataset(ds, args.output)
    print(f"wrote {args.output} ({spec.n_labeled} labeled + {spec.n_unlabeled} unlabeled images)")
    return 0


def _load_train_config(args) -> harness.RunConfig:
    cfg = configio.load_run_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    return cfg


def _cmd_train(args) -> int:
    cfg = dataclasses.replace(_load_train_config(args), output_dir=args.output)
    report = harness.train(cfg)
    final = report.summary["final"]
    if final is None:
        print("trained 0 epochs")
    else:
        miou = final["miou"]
        print(
            f"finished {cfg.epochs} epochs: "
            f"miou={'n/a' if miou is None else f'{miou:.4f}'} "
            f"loss_sup={final['loss_sup']:.4f}"
        )
    print(f"reports in {args.output}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    ds = data.load_dataset(args.dataset)
    res = harness.evaluate(model, [(img.features, img.labels) for img in ds.labeled])
    print(f"labeled split:   pixel_acc={res.pixel_acc:.4f} miou={res.miou:.4f}")
    for cls in sorted(res.per_class_iou):
        print(f"  class {cls}: iou={res.per_class_iou[cls]:.4f}")
    if ds.has_evaluation:
        pairs = list(zip((img.features for img in ds.unlabeled), ds.evaluation.unlabeled_labels))
        res_u = harness.evaluate(model, pairs)
        print(f"unlabeled split: pixel_acc={res_u.pixel_acc:.4f} miou={res_u.miou:.4f}")
    return 0


def _parse_axis(raw: str):
    key, _, values = raw.partition("=")
    if not values:
        raise ValueError(f"axis {raw!r} must look like key=v1,v2,...")
    return key.strip(), [v.strip() for v in values.split(",") if v.strip()]


def _cmd_sweep(args) -> int:
    cfg = _load_train_config(args)
    axes = dict(_parse_axis(a) for a in args.axis or [])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = harness.sweep(cfg, axes, seeds, output_dir=args.output)
    for row in rows:
        point = " ".join(f"{k}={row[k]}" for k in sorted(axes))
        miou = row["miou_mean"]
        status = "failed" if row["n_seeds"] == 0 else f"miou={miou:.4f}±{row['miou_std']:.4f}"
        print(f"{point or 'base'}: {status} ({row['n_seeds']}/{len(seeds)} seeds)")
        if row["errors"]:
            print(f"  errors: {row['errors']}")
    print(f"summary in {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prcl",
        description="Probabilistic pixel-representation contrastive training on synthetic data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset from a spec file")
    p.add_argument("spec_file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-d", "--dataset", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep", help="run a cross product of config overrides")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--axis", action="append", metavar="KEY=V1,V2,...")
    p.add_argument("--seeds", default=None, metavar="S1,S2,...")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
