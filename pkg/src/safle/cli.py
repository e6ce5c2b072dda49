"""Command-line driver.

Every command writes newline-delimited JSON records to ``--report`` (or
stdout). Exit codes: 0 success, 2 configuration error, 3 I/O or file-format
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .bucketing import BucketKind, BucketStrategy, fit_boundaries
from .data import Generator, SyntheticSpec, generate, load_features, save_features, train_test_split
from .errors import ConfigError, DimensionMismatch, FormatError, NumericalError
from .experiments import BUCKET_GRID, SHAPE_VOCABS, RunConfig, bucket_sweep, fit_central, shape_sweep
from .federation import ProtocolConfig, confusion, evaluate, parse_partition, run_protocol
from .solver import load_model, model_to_bytes, save_model

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _emit(records, path):
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if path is None or path == "-":
        sys.stdout.write(lines)
    else:
        with open(path, "a") as fh:
            fh.write(lines)


def _run_config(args) -> RunConfig:
    return RunConfig(
        strategy=args.strategy,
        buckets=args.buckets,
        experts=args.experts,
        group_size=args.group_size,
        base=args.base,
        gamma=args.gamma,
        seed=args.seed,
        clients=getattr(args, "clients", 1),
        partition=getattr(args, "partition", "dirichlet:0.1"),
    )


def _model_record(model, test, train_acc):
    rec = {
        "strategy": model.bucketing.strategy.kind.cli_name,
        "buckets": model.bucketing.strategy.buckets,
        "experts": model.lift.experts,
        "group_size": model.lift.group_size,
        "vocab": model.lift.vocab,
        "lifted_dim": model.lift.lifted_dim,
        "train_accuracy": train_acc,
    }
    if test is not None:
        rec["accuracy"] = evaluate(model, test)
    return rec


def cmd_generate(args):
    syn = SyntheticSpec(
        Generator(args.generator),
        args.samples,
        args.dims,
        args.classes,
        args.noise,
        args.seed,
    )
    fm = generate(syn)
    if args.test_out:
        train, test = train_test_split(fm, args.test_fraction, args.seed)
        save_features(test, args.test_out)
    else:
        train = fm
    save_features(train, args.out)
    _emit([{"command": "generate", "generator": syn.generator.value, "n_train": train.n_samples,
            "n_features": fm.n_features, "n_classes": fm.n_classes}], args.report)


def cmd_fit_central(args):
    config = _run_config(args)
    train = load_features(args.features)
    test = load_features(args.test_features) if args.test_features else None
    model, seconds = fit_central(train, config)
    if args.out:
        save_model(model, args.out)
    rec = {"command": "fit-central", **_model_record(model, test, evaluate(model, train))}
    rec["wall_seconds"] = round(seconds, 4)
    rec["model_bytes"] = len(model_to_bytes(model))
    _emit([rec], args.report)


def cmd_fit_federated(args):
    config = _run_config(args)
    train = load_features(args.features)
    test = load_features(args.test_features) if args.test_features else None
    t0 = time.perf_counter()
    plan = parse_partition(config.partition, config.clients, train.y, config.seed)
    # boundaries come from the union of client training data (shared calibration set)
    bucketing = fit_boundaries(train.X, config.bucket_strategy)
    lift = config.lift_for(bucketing.n_codes)
    model, report = run_protocol(train, plan, ProtocolConfig(bucketing, lift, config.gamma))
    seconds = time.perf_counter() - t0
    if args.out:
        save_model(model, args.out)
    rec = {"command": "fit-federated", **_model_record(model, test, evaluate(model, train))}
    rec.update(
        clients=report.n_clients,
        partition=config.partition,
        rounds=report.rounds,
        payload_bytes=report.payload_bytes,
        total_bytes=report.total_bytes,
        mean_payload_mb=report.mean_payload_mb,
        client_sparsity=report.client_sparsity,
        aggregate_sparsity=report.aggregate_sparsity,
        wall_seconds=round(seconds, 4),
    )
    _emit([rec], args.report)


def cmd_evaluate(args):
    model = load_model(args.model)
    fm = load_features(args.features)
    if fm.n_features != model.bucketing.n_features:
        raise DimensionMismatch(
            f"model expects {model.bucketing.n_features} features, file has {fm.n_features}"
        )
    if fm.n_classes != model.n_classes:
        raise DimensionMismatch(f"model has {model.n_classes} classes, file has {fm.n_classes}")
    rec = {
        "command": "evaluate",
        "accuracy": evaluate(model, fm),
        "n_samples": fm.n_samples,
        "confusion": confusion(model, fm).tolist(),
    }
    _emit([rec], args.report)


def cmd_partition(args):
    fm = load_features(args.features)
    plan = parse_partition(args.partition, args.clients, fm.y, args.seed)
    if args.out:
        plan.save(args.out)
    hist = plan.label_histograms(fm.y, fm.n_classes)
    ent = plan.label_entropies(fm.y, fm.n_classes)
    records = [
        {"command": "partition", "client": cid, "n_samples": int(hist[cid].sum()),
         "histogram": hist[cid].tolist(), "entropy": float(ent[cid])}
        for cid in range(plan.n_clients)
    ]
    records.append(
        {"command": "partition", "summary": True, "scheme": plan.scheme, "param": plan.param,
         "clients": plan.n_clients, "mean_entropy": float(ent.mean()), "max_entropy": float(np.log(fm.n_classes))}
    )
    _emit(records, args.report)


def cmd_ablate(args):
    train = load_features(args.features)
    if args.test_features:
        test = load_features(args.test_features)
    else:
        train, test = train_test_split(train, 0.25, args.seed)
    if args.sweep == "buckets":
        seeds = tuple(range(args.seed, args.seed + args.lift_seeds))
        rows = bucket_sweep(train, test, args.vocab, seeds, args.gamma, tuple(args.grid))
    else:
        strat = BucketStrategy(BucketKind.parse(args.strategy), args.buckets)
        rows = shape_sweep(train, test, strat, args.lifted_dim, tuple(args.vocabs), args.seed, args.gamma)
    _emit(rows, args.report)


def _add_model_flags(p):
    p.add_argument("--strategy", default="binary-overlap", choices=["integer", "onehot", "binary-overlap"])
    p.add_argument("--buckets", type=int, default=8, help="bucket count B_n")
    shape = p.add_mutually_exclusive_group()
    shape.add_argument("--experts", type=int, help="number of groups E (G derived)")
    shape.add_argument("--group-size", type=int, help="digits per group G (E derived)")
    p.add_argument("--base", type=int, help="digit alphabet k; must match the strategy")
    p.add_argument("--gamma", type=float, default=1.0)


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="append JSON-lines records here (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safle", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic SFLF feature file")
    p.add_argument("--generator", default="xor", choices=[g.value for g in Generator])
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--dims", type=int, default=8)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--test-out")
    p.add_argument("--test-fraction", type=float, default=0.25)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit-central", help="pooled closed-form fit")
    p.add_argument("--features", required=True)
    p.add_argument("--test-features")
    p.add_argument("--out", help="model file to write")
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_fit_central)

    p = sub.add_parser("fit-federated", help="single-round federated fit")
    p.add_argument("--features", required=True)
    p.add_argument("--test-features")
    p.add_argument("--out", help="model file to write")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--partition", default="dirichlet:0.1", help="dirichlet:<alpha> or shard:<s>")
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_fit_federated)

    p = sub.add_parser("evaluate", help="top-1 accuracy and confusion counts")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("partition", help="build a partition plan and report label heterogeneity")
    p.add_argument("--features", required=True, help="SFLF file whose labels are partitioned")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--partition", default="dirichlet:0.1")
    p.add_argument("--out", help="plan file (JSON)")
    _add_common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("ablate", help="bucket-strategy or embedding-shape sweep")
    p.add_argument("sweep", choices=["buckets", "embedding-shape"])
    p.add_argument("--features", required=True)
    p.add_argument("--test-features")
    p.add_argument("--vocab", type=int, default=64, help="vocabulary budget for the bucket sweep")
    p.add_argument("--lift-seeds", type=int, default=4, help="permutation seeds averaged per cell")
    p.add_argument("--grid", type=int, nargs="+", default=list(BUCKET_GRID))
    p.add_argument("--lifted-dim", type=int, default=2048)
    p.add_argument("--vocabs", type=int, nargs="+", default=list(SHAPE_VOCABS))
    p.add_argument("--strategy", default="binary-overlap", choices=["integer", "onehot", "binary-overlap"])
    p.add_argument("--buckets", type=int, default=8)
    p.add_argument("--gamma", type=float, default=1.0)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
