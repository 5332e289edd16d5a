"""``tdmr`` command line: synth-data, train, eval, dump-pairs, verify.

Exit codes: 0 success, 1 verify failure, 2 usage, 3 I/O, 4 validation, 5 divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import verify
from .checkpoint import CheckpointMismatchError, load_checkpoint
from .data import SynthConfig, load_dataset, save_dataset, synthetic_dataset
from .metrics import MODES, dump_predictions, evaluate, gt_windows, prepare_split, score_predictions
from .model import ModelConfig
from .numcore import RngStream
from .objectives import LossWeights, TrainingDivergenceError
from .trainer import TrainConfig, epoch_order, fit, load_model, synthesize_step, training_items

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3, 4, 5

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name not in ("video_dim", "text_dim"))
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name != "weights")
WEIGHT_KEYS = tuple("weights." + f.name for f in dataclasses.fields(LossWeights))

log = logging.getLogger("tdmr")


class UsageError(Exception):
    pass


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("TDMR_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"TDMR_SEED must be an integer, got {env!r}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; values are JSON where possible."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def merged_config(config_path=None, overrides=()) -> dict:
    cfg = {}
    if config_path is not None:
        cfg.update(parse_config_text(Path(config_path).read_text(), str(config_path)))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _parse_value(value.strip())
    unknown = set(cfg) - set(MODEL_KEYS) - set(TRAIN_KEYS) - set(WEIGHT_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    return cfg


def build_configs(cfg: dict, video_dim: int, text_dim: int) -> tuple[ModelConfig, TrainConfig]:
    model = ModelConfig(video_dim=video_dim, text_dim=text_dim, **{k: cfg[k] for k in MODEL_KEYS if k in cfg})
    train = {k: cfg[k] for k in TRAIN_KEYS if k in cfg}
    weights = {k.split(".", 1)[1]: cfg[k] for k in WEIGHT_KEYS if k in cfg}
    if weights:
        train["weights"] = LossWeights(**weights)
    if "adam_betas" in train:
        train["adam_betas"] = tuple(train["adam_betas"])
    return model, TrainConfig(**train)


def config_text(model: ModelConfig, train: TrainConfig) -> str:
    flat = {k: v for k, v in model.to_dict().items()}
    for k, v in train.to_dict().items():
        if k == "weights":
            flat.update({f"weights.{wk}": wv for wk, wv in v.items()})
        else:
            flat[k] = v
    return "".join(f"{k} = {json.dumps(flat[k])}\n" for k in sorted(flat))


def run_dir_name(text: str, data_path) -> str:
    digest = hashlib.sha256((text + "data = " + str(Path(data_path).resolve())).encode()).hexdigest()
    return "run-" + digest[:12]


def _dims(dataset):
    video, ann = dataset.sample(0)
    return video.dim, ann.query_tokens.shape[1]


# ------------------------------------------------------------------ commands


def cmd_synth_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    seed = resolve_seed(args.seed)
    cfg = SynthConfig(num_samples=args.n, feature_dim=args.dim, text_dim=args.text_dim,
                      signal_strength=args.signal, context_strength=args.context)
    dataset = synthetic_dataset(cfg, seed)
    manifest = save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {manifest} (video dim {cfg.feature_dim}, text dim {cfg.text_dim}, seed {seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    cfg = merged_config(args.config, args.set)
    if args.seed is not None or "seed" not in cfg:
        cfg["seed"] = resolve_seed(args.seed)
    if args.steps is not None:
        cfg["max_steps"] = args.steps
    model_cfg, train_cfg = build_configs(cfg, *_dims(dataset))
    text = config_text(model_cfg, train_cfg)
    run_dir = Path(args.out) / run_dir_name(text, args.data)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(text)
    log_path = run_dir / "train_log.jsonl"
    if args.resume is None and log_path.exists():
        log_path.unlink()
    try:
        result = fit(dataset, model_cfg, train_cfg, out_dir=run_dir, resume=args.resume, log_path=log_path)
    except TrainingDivergenceError as exc:
        last = log_path.read_text().splitlines()[-1] if log_path.exists() and log_path.stat().st_size else "none"
        print(f"training diverged: {exc}\nlast loss report: {last}", file=sys.stderr)
        return EXIT_DIVERGENCE
    last = f"{result.losses[-1]:.6f}" if result.losses else "n/a"
    print(f"trained {result.state.step} steps in {result.elapsed:.1f}s, final loss {last}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _write_report(report, out_dir, mode):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"report_{mode}.json").write_text(report.to_json() + "\n")
    (out_dir / f"report_{mode}.txt").write_text(report.to_text() + "\n")


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    seed = resolve_seed(args.seed)
    out_dir = args.out
    if args.preds is not None:
        report = score_predictions(args.preds, prepare_split(dataset, args.mode, seed), args.mode)
    else:
        if args.ckpt is None:
            raise UsageError("eval needs --ckpt or --preds")
        expect = None
        if args.config is not None:
            expect, _ = build_configs(merged_config(args.config), *_dims(dataset))
        ckpt_cfg = load_checkpoint(args.ckpt).model_config
        if (ckpt_cfg.video_dim, ckpt_cfg.text_dim) != _dims(dataset):
            raise CheckpointMismatchError(
                f"checkpoint expects dims {(ckpt_cfg.video_dim, ckpt_cfg.text_dim)}, data has {_dims(dataset)}")
        model = load_model(args.ckpt, expect)
        report, preds = evaluate(model, dataset, args.mode, seed, args.batch_size, return_predictions=True)
        if args.dump_preds is not None:
            dump_predictions(args.dump_preds, preds)
        if out_dir is None:
            out_dir = Path(args.ckpt).parent
    if out_dir is not None:
        _write_report(report, out_dir, args.mode)
    print(report.to_text())
    return EXIT_OK


def cmd_dump_pairs(args) -> int:
    dataset = load_dataset(args.data)
    cfg = merged_config(args.config, args.set)
    if args.seed is not None or "seed" not in cfg:
        cfg["seed"] = resolve_seed(args.seed)
    _, train = build_configs(cfg, *_dims(dataset))
    items = training_items(dataset)
    qids = [a.qid for a in dataset.annotations]
    per_epoch = math.ceil(len(items) / train.batch_size)
    order = epoch_order(len(items), train.seed, args.epoch)
    lines = []
    for pos in range(per_epoch):
        idx = [int(i) for i in order[pos * train.batch_size:(pos + 1) * train.batch_size]]
        if len(idx) < 2:
            continue
        step = args.epoch * per_epoch + pos
        plan, results = synthesize_step([items[i] for i in idx], train, RngStream(train.seed).child("step", step))
        for j, (own, other) in enumerate(results):
            k = plan.partners[j]
            sim = plan.similarities[j]
            rec = {
                "step": step,
                "qid": qids[idx[j]],
                "partner_qid": qids[idx[k]],
                "similarity": None if sim is None else float(sim),
                "self": {"gt": [own.gt_span.first, own.gt_span.last], "provenance": [list(p) for p in own.provenance]},
                "partner": {"gt": [other.gt_span.first, other.gt_span.last],
                            "provenance": [list(p) for p in other.provenance]},
            }
            lines.append(json.dumps(rec, sort_keys=True))
    text = "".join(line + "\n" for line in lines)
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
        print(f"wrote {len(lines)} pair records to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        results = verify.run(args.suite, fault=args.fault)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<10} {r.seconds:6.1f}s  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdmr", description="Moment retrieval with temporal dynamics.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a planted-moment dataset")
    p.add_argument("--n", type=int, default=64, help="number of samples")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=64, help="clip feature dimension")
    p.add_argument("--text-dim", type=int, default=64)
    p.add_argument("--signal", type=float, default=5.0, help="planted signal strength")
    p.add_argument("--context", type=float, default=0.0, help="strength of the query cue around the moment")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--out", default="runs", help="parent directory for run directories")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="shorthand for max_steps")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a prediction file")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--preds", help="score this prediction file without a model")
    p.add_argument("--mode", choices=MODES, default="standard")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="expected model config; a mismatch with the checkpoint is an error")
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p.add_argument("--dump-preds", help="write predictions as line-delimited JSON")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-pairs", help="write the synthesis pair plan of one epoch as JSON lines")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_pairs)

    p = sub.add_parser("verify", help="run the self-check battery")
    p.add_argument("--suite", action="append", choices=sorted(verify.SUITES))
    p.add_argument("--fault", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tdmr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergenceError as exc:
        print(f"tdmr: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"tdmr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"tdmr: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
