"""Command-line entry point: ``robust-transfer <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .adversary import AttackConfig, PerturbationConstraint, robust_accuracy
from .gradcore import load_checkpoint
from .trainer import evaluate, fmt_float


def _config(args) -> harness.ExperimentConfig:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    if getattr(args, "out", None):
        overrides["experiment.out"] = args.out
    return harness.load_config(args.config, overrides)


def _source_overrides(args) -> dict[str, str]:
    out = {}
    if getattr(args, "constraint", None):
        out["source.constraint"] = args.constraint
    if getattr(args, "eps", None) is not None:
        out["source.eps"] = repr(args.eps)
    return out


def cmd_train_source(args) -> int:
    cfg = harness.config_from_entries(_source_overrides(args), _config(args))
    tag = harness.model_tag(args.adversary, args.pgd_steps)
    cfg = harness.config_from_entries({"source.models": tag}, cfg)
    data = harness.load_data(cfg)
    harness.ensure_source(cfg, data, cfg.out, tag, args.replicate)
    ckpt, meta = harness.source_paths(cfg.out, tag, args.replicate)
    print(f"{ckpt}\n{meta}")
    return 0


def cmd_fine_tune(args) -> int:
    cfg = _config(args)
    data = harness.load_data(cfg)
    source = load_checkpoint(args.checkpoint)
    tag = args.tag or Path(args.checkpoint).stem
    cell = Path(args.out or cfg.out) / "finetune" / f"{tag}-b{args.blocks}-n{args.subset}-s{args.seed}"
    paths = harness.finetune_one(cfg, data, source, tag, args.blocks, args.subset, args.seed, cell)
    for path in paths.values():
        print(path)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.seeds is not None:
        cfg = harness.config_from_entries({"finetune.seeds": str(args.seeds)}, cfg)
    print(harness.run_sweep(cfg, workers=args.workers))
    return 0


def cmd_attack_eval(args) -> int:
    cfg = _config(args)
    data = harness.load_data(cfg)
    split = {"source": data.source_test, "target": data.target_test}[args.split]
    net = load_checkpoint(args.checkpoint)
    if split.num_labels != net.spec.num_labels:
        raise SystemExit(f"checkpoint has {net.spec.num_labels} labels, {args.split} test set has "
                         f"{split.num_labels}")
    attack = AttackConfig(PerturbationConstraint(args.constraint, args.eps), args.pgd_steps, args.step_scale)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["checkpoint", "split", "constraint", "eps", "steps", "clean_accuracy", "robust_accuracy"])
    writer.writerow([args.checkpoint, args.split, args.constraint, fmt_float(args.eps), args.pgd_steps,
                     fmt_float(evaluate(net, split)),
                     fmt_float(robust_accuracy(net, split.images, split.labels, attack))])
    return 0


def cmd_influence(args) -> int:
    if args.checkpoint or args.manifest:
        if not (args.checkpoint and args.manifest):
            raise SystemExit("--checkpoint and --manifest go together")
        cfg = _config(args)
        data = harness.load_data(cfg)
        test = harness._head(data.target_test, cfg.influence.test_size)
        out = Path(args.out or Path(args.manifest).parent)
        rates = harness.influence_report_cmd(args.checkpoint, args.manifest, test, args.k or cfg.influence.k,
                                             out, (cfg.influence.majority_k, cfg.influence.majority_m))
        results = {Path(args.checkpoint).stem: rates}
    else:
        cfg = _config(args)
        if args.k:
            cfg = harness.config_from_entries({"influence.k": ",".join(map(str, args.k))}, cfg)
        results = harness.run_influence(cfg)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["model", "metric", "k", "m", "match_percent"])
    for tag, rates in results.items():
        for (metric, k, m), value in rates.items():
            writer.writerow([tag, metric, k, m, fmt_float(value)])
    return 0


def cmd_report(args) -> int:
    cfg = _config(args)
    results = Path(args.results or cfg.out / "results.csv")
    paths = harness.write_report(results, args.report_dir or results.parent / "report", args.model_a,
                                 args.model_b, cfg.net.blocks)
    for path in paths:
        print(path)
    return 0


def cmd_visualize(args) -> int:
    net = load_checkpoint(args.checkpoint)
    classes = args.classes or list(range(net.spec.num_labels))
    seed = np.full(net.spec.input_shape, args.seed_value)
    images = harness.visualize_classes(net, seed, classes, args.steps, args.alpha)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.write_pnm(out, harness.tile(images, args.cols))
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-transfer",
                                     description="Adversarially robust source models and transfer learning.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, out_required=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
        p.add_argument("--out", required=out_required, help="output directory (overrides experiment.out)")
        p.set_defaults(func=fn)
        return p

    p = add("train-source", cmd_train_source, "train and cache one source model")
    p.add_argument("--adversary", choices=["none", "pgd", "gaussian"], default="pgd")
    p.add_argument("--pgd-steps", type=int, default=20)
    p.add_argument("--constraint", choices=["l2", "linf"])
    p.add_argument("--eps", type=float)
    p.add_argument("--replicate", type=int, default=0)

    p = add("fine-tune", cmd_fine_tune, "fine-tune a source checkpoint on one target subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tag", help="model tag recorded in the manifest (default: checkpoint stem)")
    p.add_argument("--blocks", type=int, default=0)
    p.add_argument("--subset", type=int, required=True)
    p.add_argument("--seed", type=int, default=harness.seed_set(1)[0])

    p = add("sweep", cmd_sweep, "run or resume the fine-tuning grid")
    p.add_argument("--seeds", type=int, help="cap on seeds per subset size")
    p.add_argument("--workers", type=int, default=1)

    p = add("attack-eval", cmd_attack_eval, "clean and PGD accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["source", "target"], default="source")
    p.add_argument("--constraint", choices=["l2", "linf"], default="l2")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--pgd-steps", type=int, default=20)
    p.add_argument("--step-scale", type=float, default=2.5)

    p = add("influence", cmd_influence, "influence matrices and top-k label matches")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--k", type=int, nargs="+")

    p = add("report", cmd_report, "accuracy deltas and learning curves from a results CSV")
    p.add_argument("--results")
    p.add_argument("--report-dir")
    p.add_argument("--model-a", default="pgd20")
    p.add_argument("--model-b", default="natural")

    p = add("visualize", cmd_visualize, "feature visualisation per class as a PGM/PPM grid", out_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classes", type=int, nargs="+")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed-value", type=float, default=0.5, help="constant start image")
    p.add_argument("--cols", type=int, default=5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, harness.SweepError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
