"""Command-line front end: gendata, train, eval, compare.

Every effective setting comes from one flat config namespace: file values
(if --config is given) override defaults, --set key=value overrides both.
A finished training run leaves behind model.ckpt, metrics.csv, and
manifest.json; pointing --config at the manifest replays the run exactly.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .attacks import AttackConfig
from .config import (load_config_file, load_datasets, make_model,
                     make_train_config, parse_fraction, resolve)
from .data import make_synthetic_blobs, save_dataset
from .errors import ConfigError
from .evaluation import (clean_accuracy, compare_report, read_reports_csv,
                         robust_accuracy, write_reports_csv, EvalReport)
from .models import load_model
from .trainer import read_metrics_csv, train


def _resolved(args) -> dict:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"out={args.out}")
    return resolve(file_values, overrides)


def cmd_train(args) -> int:
    cfg = _resolved(args)
    if not cfg["out"]:
        raise ConfigError("an output directory is required (--out DIR or out=DIR)")
    train_ds, eval_ds = load_datasets(cfg)
    model = make_model(cfg, train_ds)
    record = train(model, train_ds, make_train_config(cfg), cfg["out"], eval_ds,
                   manifest_config=cfg)
    final = record.epochs[-1]
    print(f"method={record.method} epochs={len(record.epochs)} "
          f"clean_acc={final.clean_acc:.2f} robust_acc={final.robust_acc:.2f} "
          f"attack_passes={record.attack_passes}")
    print(f"wrote {record.checkpoint_path}, {record.csv_path}, {record.manifest_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    model = load_model(args.checkpoint)
    train_ds, eval_ds = load_datasets(cfg)
    ds = eval_ds if eval_ds is not None else train_ds
    steps = args.steps if args.steps is not None else cfg["eval_steps"]
    eps = parse_fraction(args.epsilon) if args.epsilon is not None else cfg["attack.epsilon"]
    attack = AttackConfig(eps=eps, alpha=cfg["attack.alpha"], steps=steps, random_start=True)
    clean = clean_accuracy(model, ds, cfg["batch_size"])
    robust = robust_accuracy(model, ds, attack, cfg["batch_size"], seed=cfg["seed"])
    label = f"PGD-{steps}"

    run_dir = os.path.dirname(os.path.abspath(args.checkpoint))
    method, passes, seconds = "model", 0, 0.0
    manifest_path = os.path.join(run_dir, "manifest.json")
    metrics_path = os.path.join(run_dir, "metrics.csv")
    if os.path.exists(manifest_path):
        method = load_config_file(manifest_path).get("method", method)
    if os.path.exists(metrics_path):
        rows = read_metrics_csv(metrics_path)
        passes, seconds = rows[-1].attack_passes_cum, sum(r.seconds for r in rows)

    report = EvalReport(method, clean, {label: robust}, passes, seconds)
    out_dir = args.out if args.out else run_dir
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "eval.csv")
    write_reports_csv(csv_path, [report])
    print(f"clean_acc {clean:.2f}")
    print(f"{label}_acc {robust:.2f}")
    print(f"wrote {csv_path}")
    return 0


def cmd_compare(args) -> int:
    reports = []
    for run_dir in args.run_dirs:
        path = os.path.join(run_dir, "eval.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"no eval.csv in {run_dir} (run `selat eval` there first)")
        reports.extend(read_reports_csv(path))
    print(compare_report(reports))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        csv_path = os.path.join(args.out, "compare.csv")
        write_reports_csv(csv_path, reports)
        print(f"wrote {csv_path}")
    return 0


def cmd_gendata(args) -> int:
    cfg = _resolved(args)
    if args.kind != "blobs":
        raise ConfigError(f"unknown dataset kind {args.kind!r}, options: blobs")
    ds = make_synthetic_blobs(cfg["data.n_per_class"], cfg["data.classes"], cfg["data.spread"],
                              cfg["data.seed"], dim=cfg["data.dim"])
    save_dataset(args.path, ds)
    print(f"wrote {args.path}: {len(ds)} samples, {ds.classes} classes, digest {ds.digest()}")
    return 0


def _common(p, out_help):
    p.add_argument("--config", help="key=value config file or a manifest.json")
    p.add_argument("--out", help=out_help)
    p.add_argument("--seed", type=int, help="override the seed key")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selat",
        description="Selective adversarial training: attack a chosen fraction of each "
                    "minibatch and train on the mixed clean/adversarial objective.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one method arm and write run artifacts")
    _common(p, "output directory for checkpoint/metrics/manifest")

    p = sub.add_parser("eval", help="clean and robust accuracy of a checkpoint")
    p.add_argument("checkpoint", help="path to a model.ckpt")
    p.add_argument("--steps", type=int, help="attack iteration count (label becomes PGD-K)")
    p.add_argument("--epsilon", help="attack radius, e.g. 8/255")
    _common(p, "directory for eval.csv (default: the checkpoint's directory)")

    p = sub.add_parser("compare", help="one table across finished run directories")
    p.add_argument("run_dirs", nargs="+", help="run directories containing eval.csv")
    p.add_argument("--out", help="directory for the combined compare.csv")

    p = sub.add_parser("gendata", help="write a synthetic dataset fixture")
    p.add_argument("kind", help="dataset kind (blobs)")
    p.add_argument("path", help="output file for the dataset container")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one data.* key (repeatable)")

    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "gendata": cmd_gendata}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
