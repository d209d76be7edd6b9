"""Command-line interface.

Subcommands mirror the pipeline: gen-data, prepare, train, evaluate,
diagnose, compare. Every subcommand takes --config (JSON experiment config),
optional --seed (overrides the dataset seed for gen-data, the run seed
elsewhere) and --out (overrides the config's output directory).

Exit codes: 0 success, 1 validation error (including bad flags), 2 runtime
failure.
"""

import argparse
import json
import os
import sys

from . import experiment as exp
from .data import SyntheticConfig
from .errors import BearlabError, ValidationError
from .metrics import dump_report_csv


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bearlab",
                     description="Beam-search-aware fine-tuning lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("gen-data", "write the synthetic catalog and interaction log"),
        ("prepare", "build vocabulary, trie, and split instances"),
        ("train", "train one model with the configured objective"),
        ("evaluate", "evaluate a trained checkpoint on the test split"),
        ("diagnose", "dump one user's beam trace as JSON"),
        ("compare", "train and evaluate every configured method x seed"),
    ):
        p = sub.add_parser(name, help=text, add_help=True)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if name == "diagnose":
            p.add_argument("--user", type=int, required=True)
            p.add_argument("--split", default="test")
    return parser


def _load_config(args) -> tuple[exp.ExperimentConfig, str]:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file {args.config!r} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {args.config!r} is not valid JSON: {exc}") from None
    config = exp.config_from_json(payload)
    out_dir = args.out or config.out_dir
    return config, out_dir


def _run_seed(config, args) -> int:
    return args.seed if args.seed is not None else config.seeds[0]


def _run_dir(out_dir: str, objective: str, seed: int) -> str:
    return os.path.join(out_dir, "runs", f"{objective}-seed{seed}")


def _checkpoint_dir(out_dir: str, objective: str, seed: int) -> str:
    path = os.path.join(_run_dir(out_dir, objective, seed), "checkpoint")
    if not os.path.exists(os.path.join(path, "model.json")):
        raise ValidationError(f"no checkpoint under {path}; run train first")
    return path


def _cmd_gen_data(args) -> None:
    config, out_dir = _load_config(args)
    if args.seed is not None:
        dataset = SyntheticConfig(**{**config.dataset.__dict__, "seed": args.seed})
        config = exp.ExperimentConfig(**{**config.__dict__, "dataset": dataset})
    paths = exp.generate_data(config, out_dir)
    print(f"wrote {paths['catalog']} and {paths['interactions']}")


def _cmd_prepare(args) -> None:
    config, out_dir = _load_config(args)
    bundle = exp.prepare_dataset(config, out_dir)
    sizes = {s: len(bundle.split(s)) for s in ("train", "val", "test")}
    print(f"prepared {len(bundle.instances)} instances "
          f"(train/val/test = {sizes['train']}/{sizes['val']}/{sizes['test']}), "
          f"vocabulary of {len(bundle.vocab)} tokens")


def _cmd_train(args) -> None:
    config, out_dir = _load_config(args)
    bundle = exp.load_bundle(config, out_dir)
    seed = _run_seed(config, args)
    checkpoint, timing = exp.train(config, bundle, seed)
    run_dir = _run_dir(out_dir, config.objective, seed)
    os.makedirs(run_dir, exist_ok=True)
    checkpoint.save(os.path.join(run_dir, "checkpoint"))
    with open(os.path.join(run_dir, "timings.json"), "w", encoding="utf-8") as fh:
        json.dump(timing, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"trained {config.objective} seed {seed}: best epoch "
          f"{checkpoint.epoch}, val NDCG@10 {checkpoint.best_val_ndcg():.6f}")


def _cmd_evaluate(args) -> None:
    config, out_dir = _load_config(args)
    bundle = exp.load_bundle(config, out_dir)
    seed = _run_seed(config, args)
    run_dir = _run_dir(out_dir, config.objective, seed)
    checkpoint = exp.Checkpoint.load(_checkpoint_dir(out_dir, config.objective, seed))
    timings_path = os.path.join(run_dir, "timings.json")
    report = exp.evaluate(checkpoint, bundle, "test", config.k_list, config.decode,
                          method=config.objective)
    if os.path.exists(timings_path):
        with open(timings_path, "r", encoding="utf-8") as fh:
            report.timing.update(json.load(fh))
    report.dump_json(os.path.join(run_dir, "report.json"))
    dump_report_csv(os.path.join(run_dir, "report.csv"), [report])
    line = ", ".join(f"NDCG@{k} {report.ndcg[k]:.4f}" for k in report.k_list)
    print(f"evaluated {config.objective} seed {seed} on test: {line}")


def _cmd_diagnose(args) -> None:
    config, out_dir = _load_config(args)
    bundle = exp.load_bundle(config, out_dir)
    seed = _run_seed(config, args)
    checkpoint = exp.Checkpoint.load(_checkpoint_dir(out_dir, config.objective, seed))
    trace, inst = exp.diagnose_user(checkpoint, bundle, args.user, config.decode,
                                    split=args.split)
    os.makedirs(os.path.join(out_dir, "traces"), exist_ok=True)
    path = os.path.join(out_dir, "traces", f"user{args.user}.json")
    trace.dump(path)
    print(f"wrote {path} ({len(trace.steps)} steps, positive item "
          f"{inst.positive_item})")


def _cmd_compare(args) -> None:
    config, out_dir = _load_config(args)
    if not config.methods:
        raise ValidationError("compare needs a 'methods' list in the config")
    bundle = exp.load_bundle(config, out_dir)
    exp.compare(config, bundle, out_dir=out_dir)
    print(f"wrote {os.path.join(out_dir, 'compare', 'comparison.csv')}")


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "prepare": _cmd_prepare,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "diagnose": _cmd_diagnose,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BearlabError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
