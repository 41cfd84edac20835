"""Command-line entry point: ``scoreattn {train,eval,bench,verify,gen-data}``.

Global flags (``--config``, ``--seed``, ``--out``, ``--precision``) go after
the subcommand. Any other ``--key value`` pair overrides one config field;
keys are dotted paths (``--model.k 5``) or unique bare names (``--k 5``).

Exit codes: 0 ok, 2 configuration / usage / input errors, 3 numerical
failure, 4 a verification check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, from_mapping, load_config, parse_overrides
from .data import DataFormatError, save_split
from .encoders import ParseError
from .errors import ConfigError, ContractError, DegenerateInputError, DomainError, NumericalError, ShapeError
from .experiment import load_dataset, run_bench, run_training
from .metrics import format_comparison
from .training import evaluate_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
USAGE_ERRORS = (ConfigError, ShapeError, ContractError, DomainError, DegenerateInputError,
                DataFormatError, CheckpointError, ParseError)

CHECKPOINT_NAME = "model.ckpt"
LOSS_CSV = "loss.csv"
REPORT_JSON = "report.json"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run config")
    common.add_argument("--seed", type=int, help="run seed (all randomness derives from it)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--precision", type=int, choices=(32, 64), help="float width")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = argparse.ArgumentParser(prog="scoreattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one model; writes checkpoint, loss CSV, report")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on its test data")
    ev.add_argument("checkpoint", help="checkpoint written by train")
    sub.add_parser("bench", parents=[common], help="aggregator x seed comparison table")
    ver = sub.add_parser("verify", parents=[common], help="run the property / oracle suites")
    ver.add_argument("suite", nargs="?", default="all",
                     choices=("gradients", "oracles", "invariants", "all"))
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as files")
    return parser


def _config(args, extra: list[str]) -> RunConfig:
    overrides = parse_overrides(extra)
    for name in ("seed", "out", "precision"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = str(value)
    return load_config(args.config, overrides)


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(config: RunConfig) -> int:
    out = _out_dir(config)
    result = run_training(config, loss_csv=out / LOSS_CSV)
    save_checkpoint(out / CHECKPOINT_NAME, result.model, result.vocab, result.answers,
                    config.precision, extra={"run": config.to_dict()})
    payload = result.report.to_dict()
    payload["initial_loss"] = result.initial_loss
    payload["final_loss"] = result.final_loss
    (out / REPORT_JSON).write_text(json.dumps(payload, indent=2) + "\n")
    print(result.report.to_table())
    print(f"loss {result.initial_loss:.6f} -> {result.final_loss:.6f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(config: RunConfig, checkpoint: str, explicit_config: bool) -> int:
    model, vocab, answers, header = load_checkpoint(checkpoint)
    run = header.get("extra", {}).get("run")
    if not explicit_config and run is not None:
        # evaluate on the data the checkpoint was trained with
        saved = from_mapping({k: v for k, v in run.items() if k in ("seed", "precision", "data", "train")})
        config.data, config.train = saved.data, saved.train
        config.seed, config.precision = saved.seed, saved.precision
    config.model = model.config
    config.validate()
    dataset = load_dataset(config)
    if dataset.task != model.config.task:
        raise CheckpointError(f"checkpoint task {model.config.task!r} vs data task {dataset.task!r}")
    report = evaluate_model(model, dataset.test, vocab, answers, config.train.eval_folds,
                            config.precision)
    out = _out_dir(config)
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    print(report.to_table())
    return EXIT_OK


def cmd_bench(config: RunConfig) -> int:
    out = _out_dir(config)
    start = time.perf_counter()
    result = run_bench(config, csv_dir=out, workers=config.bench.workers)
    (out / "bench.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    print(f"{config.model.task}: median over seeds {config.bench.seeds}")
    print(format_comparison(result.medians()))
    print(f"{len(result.cells)} runs in {time.perf_counter() - start:.1f}s")
    return EXIT_OK


def cmd_verify(config: RunConfig, suite: str) -> int:
    from .verification import format_checks, run_suite

    checks = run_suite(suite, seed=config.seed)
    print(format_checks(checks))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY


def cmd_gen_data(config: RunConfig) -> int:
    if config.data.source != "synthetic":
        raise ConfigError("gen-data writes synthetic data; set data.source = 'synthetic'")
    out = _out_dir(config)
    dataset = load_dataset(config)
    for name, split in (("train", dataset.train), ("test", dataset.test)):
        regions, text = save_split(split, out, name)
        print(f"{name}: {len(split)} samples -> {regions.name}, {text.name}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args, extra = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        config = _config(args, extra)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "eval":
            return cmd_eval(config, args.checkpoint, args.config is not None)
        if args.command == "bench":
            return cmd_bench(config)
        if args.command == "verify":
            return cmd_verify(config, args.suite)
        return cmd_gen_data(config)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
