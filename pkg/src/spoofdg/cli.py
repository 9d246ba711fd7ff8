"""Command line front end: generate, train, eval, verify."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, apply_env_overrides, _parse_value
from .data import default_domain_specs, generate, load_dataset, save_dataset, \
    split_leave_one_domain_out
from .evaluation import evaluate, export_projection, extract_features, score_samples
from .meta import NumericalError
from .models import CheckpointError, ParamMismatchError, architecture_hash, load_checkpoint
from .train import build_networks, run_training
from .verify import run_suite

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors (exit 1)
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="flat key=value config file")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f"cfg_{f.name}", metavar="V", default=None)


def _resolve_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_text(Path(args.config).read_text())
    else:
        cfg = RunConfig()
    hints = {f.name: f for f in dataclasses.fields(RunConfig)}
    overrides = {}
    import typing
    types = typing.get_type_hints(RunConfig)
    for name in hints:
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            overrides[name] = _parse_value(name, raw, types[name])
    if overrides:
        cfg = cfg.replace(**overrides)
    cfg = apply_env_overrides(cfg)
    cfg.validate()
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="spoofdg",
                     description="pseudo-domain meta-learning for live/spoof detection")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-domain dataset")
    _add_config_flags(g)
    g.add_argument("--out", required=True)
    g.add_argument("--storage", choices=("blob", "files"), default="blob")

    t = sub.add_parser("train", help="train on a dataset directory")
    _add_config_flags(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--verbose", action="store_true")

    e = sub.add_parser("eval", help="score a held-out domain with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--held-out-domain", type=int, default=None)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--allow-train-eval", action="store_true")

    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("suite", choices=("gradients", "mldg-taylor", "clustering", "all"))
    return parser


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    specs = default_domain_specs()
    if cfg.gen_domains > len(specs):
        raise ConfigError(f"at most {len(specs)} built-in domain specs available")
    specs = specs[:cfg.gen_domains]
    samples = generate(specs, cfg.per_domain, cfg.live_fraction,
                       H=cfg.image_size, d=cfg.depth_size, seed=cfg.seed,
                       threads=cfg.threads)
    out = save_dataset(samples, specs, cfg.seed, args.out, storage=args.storage,
                       extra={"config_hash": cfg.config_hash()})
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    samples, _ = load_dataset(args.dataset)
    try:
        result = run_training(cfg, samples, args.out, verbose=args.verbose)
    except NumericalError as e:
        dump = Path(args.out) / "failure_dump.json"
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps({"error": str(e), "details": e.report,
                                    "config_hash": cfg.config_hash(),
                                    "seed": cfg.seed}, sort_keys=True, indent=1))
        print(f"numerical failure: {e}; diagnostics in {dump}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"trained {result.steps} steps; final checkpoint {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, manifest = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(manifest["config"]["config"])
    nets = build_networks(cfg)
    fresh_hash = architecture_hash(nets.init_params(0))
    if fresh_hash != manifest["architecture_hash"]:
        raise CheckpointError(
            "architecture hash mismatch between checkpoint and its config echo")
    held_out = args.held_out_domain if args.held_out_domain is not None \
        else cfg.held_out_domain
    samples, _ = load_dataset(args.dataset)
    train_records, test_samples = split_leave_one_domain_out(samples, held_out)
    if args.split == "train":
        if not args.allow_train_eval:
            raise ConfigError(
                "refusing to evaluate the training split without --allow-train-eval")
        eval_samples = [s for s in samples if s.true_domain != held_out]
    else:
        eval_samples = test_samples
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metadata = {"seed": manifest["seed"], "config_hash": cfg.config_hash(),
                "held_out_domain": held_out, "split": args.split,
                "checkpoint": str(args.checkpoint)}
    result = evaluate(nets, params, eval_samples, metadata=metadata)
    result.write_json(out / "eval_result.json")
    feats = extract_features(nets, params, eval_samples)
    scores = score_samples(nets, params, eval_samples)
    export_projection(feats, [s.y for s in eval_samples], scores,
                      [s.sample_id for s in eval_samples], out / "projection.csv")
    print(f"AUC {result.auc:.4f} on {len(eval_samples)} samples "
          f"(domain {held_out} {args.split}); results in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results, elapsed = run_suite(args.suite)
    for r in results:
        print(r.line())
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} properties passed "
          f"in {elapsed:.1f}s")
    return EXIT_OK if n_fail == 0 else EXIT_NUMERICAL


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"generate": cmd_generate, "train": cmd_train,
                   "eval": cmd_eval, "verify": cmd_verify}[args.command]
        return handler(args)
    except (ConfigError, ParamMismatchError, CheckpointError, ValueError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
