"""Command-line entry point: ``tempxcnn <subcommand> ...``.

Every subcommand accepts ``--config FILE`` holding ``key=value`` lines;
explicit flags override file values.  Reports go to stdout as plain-text
tables; machine-readable CSV files land in ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .gradcheck import format_battery, run_battery
from .models import KINDS, load_checkpoint, normalize_kind, save_checkpoint
from .phantom import PhantomConfig, generate_dataset, load_dataset
from .prep import (PrepStats, build_samples, class_balance_report, format_balance, load_split,
                   partition, save_split, write_balance_report)
from .tensor import SeededRng
from .training import (ExperimentConfig, compare_models, comparison_csv, format_comparison,
                       predict, read_key_values, run_experiment)

log = logging.getLogger("tempxcnn")

SPLIT_FILE = "split.npz"
CHECKPOINT_FILE = "model.xmid"
MODE_CHOICES = {"abs": ("absolute",), "rel": ("relative",), "both": ("absolute", "relative"), "none": ()}


class CliError(Exception):
    """Bad input from the user; reported without a traceback, exit code 2."""


def _config(args) -> dict[str, str]:
    return read_key_values(args.config) if getattr(args, "config", None) else {}


def _pick(args, values: dict, key: str, default=None, cast=str):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in values:
        return cast(values[key])
    return default


def _split_path(data) -> Path:
    path = Path(data)
    if path.is_dir():
        path = path / SPLIT_FILE
    if not path.exists():
        raise CliError(f"no preprocessed split at {path}; run `tempxcnn preprocess` first")
    return path


def _out_dir(path) -> Path:
    if not path:
        raise CliError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    values = _config(args)
    cfg = PhantomConfig.from_mapping(values, seed=args.seed, mice_per_group=args.mice_per_group,
                                     slices_per_week=args.slices_per_week)
    out = _out_dir(_pick(args, values, "out"))
    manifest = generate_dataset(cfg, out)
    print(f"wrote {len(manifest.files)} slices to {out} (manifest: {out / 'manifest.txt'})")
    return 0


def cmd_preprocess(args) -> int:
    values = _config(args)
    data = _pick(args, values, "data")
    if not data:
        raise CliError("--data is required")
    mode = _pick(args, values, "mode", "both")
    timestamps = _pick(args, values, "timestamps", "on") == "on"
    seed = _pick(args, values, "seed", 0, int)
    out = _out_dir(_pick(args, values, "out"))
    slices = load_dataset(data)
    stats = PrepStats()
    samples = build_samples(slices, MODE_CHOICES[mode], max_shift=args.max_shift, stats=stats)
    split = partition(samples, SeededRng(seed), train_fraction=args.train_fraction)
    split.timestamps = timestamps
    save_split(split, out / SPLIT_FILE)
    title = f"class balance (held out: {', '.join(sorted(split.held_out_mice.values()))})"
    write_balance_report(split, out, title)
    (out / "prep.txt").write_text(
        f"mode={mode}\ntimestamps={'on' if timestamps else 'off'}\nseed={seed}\n"
        f"slices={stats.images}\nunused={stats.unused}\nunused_fraction={stats.unused_fraction:.6f}\n"
        f"intensity_scale={split.intensity_scale}\n")
    print(format_balance(class_balance_report(split), title))
    print(f"\n{stats.images} slices, {stats.unused} unpaired ({100 * stats.unused_fraction:.2f} %) -> {out}")
    return 0


def cmd_train(args) -> int:
    values = _config(args)
    cfg = ExperimentConfig.from_mapping(values, kind=args.model, epochs=args.epochs, seed=args.seed,
                                        data=args.data, out=args.out, batch_size=args.batch_size,
                                        learning_rate=args.learning_rate, momentum=args.momentum)
    split = load_split(_split_path(cfg.data))
    out = _out_dir(cfg.out)
    try:
        model, record = run_experiment(split, cfg)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    save_checkpoint(model, out / CHECKPOINT_FILE)
    (out / "metrics.csv").write_text(record.to_csv())
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mouse_id", "week", "slice_index", "label", "prediction"])
        for s, p in zip(split.test, record.test_predictions):
            w.writerow([s.mouse_id, s.week, s.slice_index, s.label, p])
    print(f"{'epoch':>5} {'loss':>9} {'val acc':>9} {'seconds':>9}")
    for i, (loss, acc, sec) in enumerate(zip(record.train_loss, record.validation_accuracy,
                                             record.epoch_seconds), 1):
        print(f"{i:>5} {loss:>9.4f} {acc:>9.4f} {sec:>9.2f}")
    print(f"test accuracy: {record.test_accuracy:.4f}")
    print(f"params: {record.trainable_params} trainable, {record.total_params} total")
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    split = load_split(_split_path(args.data))
    samples = split.parts()[args.split]
    if not samples:
        raise CliError(f"{args.split} split is empty")
    try:
        preds = predict(model, samples, split.intensity_scale)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    labels = [s.label for s in samples]
    acc = sum(int(p == y) for p, y in zip(preds, labels)) / len(labels)
    print(f"{model.spec.kind} on {args.split}: accuracy {acc:.4f} ({len(labels)} samples)")
    return 0


def cmd_compare(args) -> int:
    values = _config(args)
    base = ExperimentConfig.from_mapping(values, seed=args.seed, data=args.data, out=args.out,
                                         batch_size=args.batch_size, learning_rate=args.learning_rate,
                                         momentum=args.momentum)
    epochs = tuple(int(e) for e in args.epochs.split(","))
    kinds = [normalize_kind(k) for k in args.models.split(",")] if args.models else KINDS
    split = load_split(_split_path(base.data))
    out = _out_dir(base.out)
    rows = compare_models(split, base, kinds, epochs)
    table = format_comparison(rows)
    (out / "comparison.txt").write_text(table + "\n")
    (out / "comparison.csv").write_text(comparison_csv(rows))
    print(table)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_battery(instances=args.instances, seed=args.seed)
    print(format_battery(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print("all gradient checks passed")
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _pair(text: str) -> tuple[int, int]:
    parts = [int(v) for v in text.split(",")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected N or LO,HI")
    return tuple(parts)


def _optimizer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--momentum", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempxcnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic phantom dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--mice-per-group", type=int)
    p.add_argument("--slices-per-week", type=_pair, help="N or LO,HI")
    p.add_argument("--config")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="expand, difference and partition a dataset")
    p.add_argument("--data", help="dataset root written by `generate`")
    p.add_argument("--out")
    p.add_argument("--mode", choices=sorted(MODE_CHOICES))
    p.add_argument("--timestamps", choices=("on", "off"))
    p.add_argument("--seed", type=int)
    p.add_argument("--max-shift", type=int, default=16)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--config")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model kind")
    p.add_argument("--model", type=normalize_kind, help=", ".join(k.replace("_", "-") for k in KINDS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="directory written by `preprocess`")
    p.add_argument("--out")
    _optimizer_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy of a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="train all six kinds and tabulate")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", default="5,10", help="comma-separated epoch budgets")
    p.add_argument("--models", help="comma-separated subset of kinds")
    _optimizer_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference battery; exit 1 on failure")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
