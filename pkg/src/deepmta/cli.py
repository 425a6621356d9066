"""Pipeline driver: gen, train, eval, attribute, and report subcommands.

stdout carries machine-parseable key=value lines; progress and prose go to
stderr. Exit codes: 0 ok, 2 usage/config/data error, 3 numeric failure,
4 evaluation impossible.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .attribution import AttributionResult, attribute_journey, load_attributions, save_attributions
from .errors import ConfigError, EvaluationError, NumericError, ValidationError
from .journey import (
    GeneratorConfig,
    generate_synthetic,
    load_journeys,
    load_vocabulary,
    save_journeys,
    save_vocabulary,
)
from .model import load_checkpoint, save_checkpoint
from .report import ChannelReport, aggregate_channels, emit_report, last_click_report
from .trainer import TrainConfig, evaluate_roc, save_loss_history, save_roc_csv, train

import numpy as np

_METHOD_FLAGS = {
    "ols": "ols",
    "kernel": "kernel_ols",
    "shapley-exact": "shapley_exact",
    "shapley-sampled": "shapley_sampled",
    "auto": "auto",
}


def _emit(key: str, value) -> None:
    print(f"{key}={value}")


def _info(message: str) -> None:
    print(message, file=sys.stderr)


def _cmd_gen(args) -> int:
    cfg = GeneratorConfig(
        n_journeys=args.journeys,
        n_channels=args.channels,
        n_campaigns=args.campaigns,
        max_len=args.max_len,
        key_channel_index=args.key_channel,
        key_lift=args.key_lift,
        base_rate=args.base_rate,
        time_span_hours=args.time_span_hours,
        include_nonconverted=args.include_nonconverted,
    )
    vocab, journeys = generate_synthetic(cfg, seed=args.seed)
    out = Path(args.out)
    vocab_path = out.with_suffix(".vocab.json")
    save_journeys(out, journeys)
    save_vocabulary(vocab_path, vocab)
    converted = sum(1 for j in journeys if j.converted)
    _emit("journeys", len(journeys))
    _emit("conversion_rate", repr(converted / len(journeys)))
    _emit("out", out)
    _emit("vocab", vocab_path)
    return 0


def _cmd_train(args) -> int:
    journeys = load_journeys(args.data)
    vocab = load_vocabulary(args.vocab)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.learning_rate is not None:
        overrides["learning_rate"] = args.learning_rate
    if args.hidden_size is not None:
        overrides["hidden_size"] = args.hidden_size
    if args.dropout is not None:
        overrides["dropout_p"] = args.dropout
    cfg = TrainConfig.preset(args.preset, **overrides)
    _info(f"training on {len(journeys)} journeys (preset {args.preset}, H={cfg.hidden_size}, {cfg.epochs} epochs)")
    result = train(journeys, vocab, cfg)
    save_checkpoint(args.out, result.params, result.vocab, seed=cfg.seed)
    history_path = args.history or str(Path(args.out).with_suffix(".history.csv"))
    save_loss_history(history_path, result.train_losses, result.val_losses)
    _emit("final_train_loss", repr(result.train_losses[-1]))
    _emit("final_val_loss", repr(result.val_losses[-1]))
    _emit("checkpoint", args.out)
    _emit("history", history_path)
    return 0


def _cmd_eval(args) -> int:
    params, vocab, _ = load_checkpoint(args.model)
    journeys = load_journeys(args.data)
    result = evaluate_roc(params, vocab, journeys)
    save_roc_csv(args.roc_out, result)
    _emit("auc", repr(result.auc))
    _emit("per_step_accuracy", repr(result.per_step_accuracy))
    _emit("roc_out", args.roc_out)
    return 0


def _attribution_workers() -> int:
    env = os.environ.get("MTA_THREADS", "").strip()
    if env:
        workers = int(env)
        if workers < 1:
            raise ConfigError("MTA_THREADS must be >= 1")
        return workers
    return os.cpu_count() or 1


def _cmd_attribute(args) -> int:
    params, vocab, _ = load_checkpoint(args.model)
    journeys = load_journeys(args.data)
    method = _METHOD_FLAGS[args.method]

    def run_one(journey):
        return attribute_journey(
            params, journey, vocab, method=method, n_samples=args.samples, seed=args.seed
        )

    workers = _attribution_workers()
    results = []
    if workers > 1 and len(journeys) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for idx, result in enumerate(pool.map(run_one, journeys), start=1):
                results.append(result)
                if idx % 200 == 0:
                    _info(f"attributed {idx}/{len(journeys)} journeys")
    else:
        for idx, journey in enumerate(journeys, start=1):
            results.append(run_one(journey))
            if idx % 200 == 0:
                _info(f"attributed {idx}/{len(journeys)} journeys")
    save_attributions(args.out, journeys, results)
    _emit("journeys", len(journeys))
    _emit("unattributed", sum(1 for r in results if r.unattributed))
    _emit("out", args.out)
    return 0


def _cmd_report(args) -> int:
    journeys = load_journeys(args.data)
    records = load_attributions(args.attr)
    if len(records) != len(journeys):
        raise ValidationError(
            f"mismatched journey sets: {len(journeys)} data journeys vs {len(records)} attribution lines"
        )
    pairs = []
    for idx, (journey, record) in enumerate(zip(journeys, records), start=1):
        if record["user_id"] != journey.user_id:
            raise ValidationError(f"line {idx}: attribution user_id {record['user_id']!r} does not match data")
        if len(record["weights"]) != len(journey.events):
            raise ValidationError(f"line {idx}: weight vector length does not match the journey")
        result = AttributionResult(
            raw_weights=np.asarray(record["raw_weights"], dtype=np.float64),
            intercept=float(record["intercept"]),
            weights=np.asarray(record["weights"], dtype=np.float64),
            method=record["method"],
            unattributed=bool(record["unattributed"]),
        )
        pairs.append((journey, result))
    if pairs:
        report = aggregate_channels(pairs, method="deepmta")
        baseline = last_click_report(pairs)
    else:
        report = ChannelReport(method="deepmta")
        baseline = ChannelReport(method="last_click")
    emit_report(report, baseline, args.out, fmt="csv")
    if args.json:
        emit_report(report, baseline, args.json, fmt="json")
    _emit("channels", len(set(report.channels) | set(baseline.channels)))
    _emit("attributed", report.attributed_journeys)
    _emit("unattributed", report.unattributed_journeys)
    _emit("total_deepmta_gmv", repr(report.total_gmv))
    _emit("total_lastclick_gmv", repr(baseline.total_gmv))
    _emit("out", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepmta", description="Attribution pipeline driver.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a seeded synthetic journey dataset")
    gen.add_argument("--out", required=True, help="output JSONL path (vocab written alongside)")
    gen.add_argument("--journeys", type=int, default=1000)
    gen.add_argument("--channels", type=int, default=5)
    gen.add_argument("--campaigns", type=int, default=3)
    gen.add_argument("--max-len", type=int, default=8)
    gen.add_argument("--key-channel", type=int, default=0)
    gen.add_argument("--key-lift", type=float, default=0.3)
    gen.add_argument("--base-rate", type=float, default=0.2)
    gen.add_argument("--time-span-hours", type=float, default=240.0)
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--include-nonconverted", action="store_true")
    gen.set_defaults(func=_cmd_gen)

    tr = sub.add_parser("train", help="train a conversion model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--vocab", required=True)
    tr.add_argument("--out", required=True, help="checkpoint JSON path")
    tr.add_argument("--preset", choices=("desk", "paper"), default="desk")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--learning-rate", type=float)
    tr.add_argument("--hidden-size", type=int)
    tr.add_argument("--dropout", type=float)
    tr.add_argument("--history", help="loss-history CSV path (default: alongside the checkpoint)")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="step-level ROC/AUC of a checkpoint")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--roc-out", required=True)
    ev.set_defaults(func=_cmd_eval)

    at = sub.add_parser("attribute", help="per-event attribution for every journey")
    at.add_argument("--model", required=True)
    at.add_argument("--data", required=True)
    at.add_argument("--out", required=True, help="attribution JSONL path")
    at.add_argument("--method", choices=sorted(_METHOD_FLAGS), default="auto")
    at.add_argument("--samples", type=int, default=2048)
    at.add_argument("--seed", type=int, default=0)
    at.set_defaults(func=_cmd_attribute)

    rp = sub.add_parser("report", help="channel GMV comparison against last-click")
    rp.add_argument("--attr", required=True)
    rp.add_argument("--data", required=True)
    rp.add_argument("--out", required=True, help="comparison CSV path")
    rp.add_argument("--json", help="optional JSON mirror path")
    rp.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _info(f"error: {exc}")
        return 2
    except (ConfigError, ValidationError) as exc:
        _info(f"error: {exc}")
        return 2
    except NumericError as exc:
        _info(f"error: {exc}")
        return 3
    except EvaluationError as exc:
        _info(f"error: {exc}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
