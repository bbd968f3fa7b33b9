"""Batching, fixed-epoch training, evaluation and the six-model comparison."""

from __future__ import annotations

import copy
import csv
import io
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .layers import SGD
from .models import KINDS, Model, ModelSpec, build_model, normalize_kind
from .prep import DatasetSplit, Sample
from .tensor import SeededRng

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    kind: str = "cnn"
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    learning_rate: float = 0.01
    momentum: float = 0.9
    data: str = ""
    out: str = ""
    snapshot_epochs: tuple[int, ...] = ()
    bn_recalibration_samples: int = 1024  # 0 keeps the training-time running averages

    def __post_init__(self):
        self.kind = normalize_kind(self.kind)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.snapshot_epochs = tuple(int(e) for e in self.snapshot_epochs)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        """Line-oriented ``key=value``; ``#`` starts a comment; overrides win."""
        values = read_key_values(path)
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ValueError(f"{path}: unknown key(s) {', '.join(unknown)}")
        return cls.from_mapping(values, **overrides)

    @classmethod
    def from_mapping(cls, values: dict, **overrides) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        merged = {k: v for k, v in values.items() if k in names}
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**{k: _coerce(k, v) for k, v in merged.items()})


def read_key_values(path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    if key in ("epochs", "batch_size", "seed", "bn_recalibration_samples"):
        return int(value)
    if key in ("learning_rate", "momentum"):
        return float(value)
    if key == "snapshot_epochs":
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value


@dataclass
class MetricsRecord:
    kind: str
    train_loss: list[float] = field(default_factory=list)
    validation_accuracy: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    test_accuracy: float | None = None
    snapshot_test_accuracy: dict[int, float] = field(default_factory=dict)
    trainable_params: int = 0
    total_params: int = 0
    test_predictions: list[int] = field(default_factory=list)
    test_labels: list[int] = field(default_factory=list)
    test_reads_before_final: int = 0

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean(self.epoch_seconds)) if self.epoch_seconds else 0.0

    def recount_accuracy(self) -> float:
        p, y = np.asarray(self.test_predictions), np.asarray(self.test_labels)
        return float((p == y).mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "validation_accuracy", "seconds"])
        for i, (loss, acc, sec) in enumerate(zip(self.train_loss, self.validation_accuracy, self.epoch_seconds), 1):
            w.writerow([i, f"{loss:.6f}", f"{acc:.6f}", f"{sec:.3f}"])
        w.writerow(["test_accuracy", f"{self.test_accuracy:.6f}" if self.test_accuracy is not None else ""])
        for e, acc in sorted(self.snapshot_test_accuracy.items()):
            w.writerow([f"test_accuracy@{e}", f"{acc:.6f}"])
        w.writerow(["trainable_params", self.trainable_params])
        w.writerow(["total_params", self.total_params])
        return buf.getvalue()


class TrackedSamples(list):
    """List that counts element reads, to prove the test split stays sealed."""

    reads = 0

    def __iter__(self):
        self.reads += 1
        return super().__iter__()

    def __getitem__(self, i):
        self.reads += 1
        return super().__getitem__(i)


DIFF_MODE = {"absdiff": "absolute", "reldiff": "relative"}


def diff_mode_for(kind: str) -> str | None:
    for suffix, mode in DIFF_MODE.items():
        if kind.endswith(suffix):
            return mode
    return None


def assemble_batch(samples: Sequence[Sample], kind: str, scale: float = 1.0) -> tuple[dict, np.ndarray]:
    """Stack samples into the channels ``kind`` consumes, scaled by ``1/scale``."""
    kind = normalize_kind(kind)
    inv = np.float32(1.0 / scale)
    batch = {"image": np.stack([s.image for s in samples])[:, None].astype(np.float32) * inv}
    mode = diff_mode_for(kind)
    if mode is not None:
        try:
            batch["difference"] = np.stack([s.differences[mode] for s in samples])[:, None].astype(np.float32) * inv
        except KeyError:
            raise ValueError(f"{kind} needs {mode} difference images; preprocess with that mode") from None
    if "_ts" in kind:
        batch["timestamp"] = np.array([s.timestamp for s in samples], dtype=np.float32)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return batch, labels


def make_batches(samples: Sequence[Sample], kind: str, batch_size: int, rng: SeededRng | None,
                 scale: float = 1.0) -> Iterator[tuple[dict, np.ndarray]]:
    """One epoch of batches; shuffled when ``rng`` is given.  The last batch may be short."""
    if not len(samples):
        raise ValueError("cannot batch an empty split")
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    items = list(samples)
    for start in range(0, len(order), batch_size):
        yield assemble_batch([items[i] for i in order[start:start + batch_size]], kind, scale)


def predict(model: Model, samples: Sequence[Sample], scale: float = 1.0, batch_size: int = 128) -> np.ndarray:
    preds = [model.predict(batch) for batch, _ in make_batches(samples, model.spec.kind, batch_size, None, scale)]
    return np.concatenate(preds)


def evaluate(model: Model, samples: Sequence[Sample], scale: float = 1.0) -> float:
    """Fraction of argmax-correct predictions in infer mode."""
    if not len(samples):
        raise ValueError("cannot evaluate on an empty sample set")
    labels = np.array([s.label for s in samples])
    return float((predict(model, samples, scale) == labels).mean())


def recalibration_batches(samples: Sequence[Sample], kind: str, n: int, scale: float = 1.0,
                          batch_size: int = 64):
    """Evenly spaced subset of at most ``n`` samples, in batches of >= 2."""
    if n <= 0 or len(samples) < 2:
        return
    idx = np.unique(np.linspace(0, len(samples) - 1, min(n, len(samples))).astype(int))
    subset = [samples[i] for i in idx]
    for batch, labels in make_batches(subset, kind, batch_size, None, scale):
        if len(labels) >= 2:
            yield batch


def train(model: Model, split: DatasetSplit, config: ExperimentConfig) -> MetricsRecord:
    """Fixed-epoch training; the test split is read once, after the last epoch."""
    if normalize_kind(config.kind) != model.spec.kind:
        raise ValueError(f"config kind {config.kind} does not match model {model.spec.kind}")
    if not split.train:
        raise ValueError("empty training split")
    if model.spec.uses_timestamp and not split.timestamps:
        raise ValueError(f"{model.spec.kind} needs timestamps; preprocess with timestamps on")
    assemble_batch(split.train[:2], model.spec.kind, split.intensity_scale)  # channel check

    test = split.test if isinstance(split.test, TrackedSamples) else TrackedSamples(split.test)
    reads_at_start = test.reads
    report = model.count_params()
    record = MetricsRecord(model.spec.kind, trainable_params=report.trainable, total_params=report.total)
    optimizer = SGD(model.optimizer_config(config.learning_rate, config.momentum))
    batch_rng = SeededRng(config.seed).spawn(7)
    snapshots: dict[int, Model] = {}

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        losses, weights = [], []
        for batch, labels in make_batches(split.train, model.spec.kind, config.batch_size, batch_rng,
                                          split.intensity_scale):
            if len(labels) < 2:
                continue  # a lone trailing sample cannot be batch-normalised
            losses.append(model.backward_and_step(batch, labels, optimizer))
            weights.append(len(labels))
        model.recalibrate_batchnorm(recalibration_batches(
            split.train, model.spec.kind, config.bn_recalibration_samples, split.intensity_scale))
        elapsed = time.perf_counter() - start
        record.train_loss.append(float(np.average(losses, weights=weights)))
        record.epoch_seconds.append(max(elapsed, 1e-9))
        val = evaluate(model, split.validation, split.intensity_scale) if split.validation else float("nan")
        record.validation_accuracy.append(val)
        log.info("%s epoch %d: loss %.4f  val acc %.4f  (%.1fs)", model.spec.kind, epoch,
                 record.train_loss[-1], val, elapsed)
        if epoch in config.snapshot_epochs and epoch != config.epochs:
            snapshots[epoch] = copy.deepcopy(model)

    record.test_reads_before_final = test.reads - reads_at_start
    labels = np.array([s.label for s in test])
    preds = predict(model, test, split.intensity_scale)
    record.test_predictions, record.test_labels = preds.tolist(), labels.tolist()
    record.test_accuracy = float((preds == labels).mean())
    for epoch, snap in snapshots.items():
        record.snapshot_test_accuracy[epoch] = evaluate(snap, test, split.intensity_scale)
    if config.epochs in config.snapshot_epochs:
        record.snapshot_test_accuracy[config.epochs] = record.test_accuracy
    return record


def run_experiment(split: DatasetSplit, config: ExperimentConfig, input_hw=None) -> tuple[Model, MetricsRecord]:
    if input_hw is None:
        input_hw = split.train[0].image.shape
    model = build_model(ModelSpec(config.kind, input_hw=input_hw), SeededRng(config.seed))
    return model, train(model, split, config)


# --------------------------------------------------------------------------
# six-model comparison
# --------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    kind: str
    accuracy: dict[int, float]
    mean_seconds: dict[int, float]
    trainable_params: int
    total_params: int


class ComparisonError(RuntimeError):
    def __init__(self, message: str, partial: list[ComparisonRow]):
        super().__init__(message)
        self.partial = partial


LABELS = {
    "cnn": "CNN",
    "cnn_ts": "CNN, timestamps",
    "xcnn_absdiff": "X-CNN, abs. diff.",
    "xcnn_reldiff": "X-CNN, rel. diff.",
    "xcnn_ts_absdiff": "X-CNN, timestamps & abs. diff.",
    "xcnn_ts_reldiff": "X-CNN, timestamps & rel. diff.",
}


def compare_models(split: DatasetSplit, base: ExperimentConfig, kinds: Sequence[str] = KINDS,
                   epochs: Sequence[int] = (5, 10)) -> list[ComparisonRow]:
    """Train every kind on the same split and seed; report test accuracy and
    mean epoch time at each epoch budget (one run, snapshots at the smaller
    budgets)."""
    epochs = tuple(sorted(set(int(e) for e in epochs)))
    rows: list[ComparisonRow] = []
    for kind in kinds:
        cfg = _replace(base, kind=kind, epochs=epochs[-1], snapshot_epochs=epochs)
        try:
            _, rec = run_experiment(split, cfg)
        except Exception as exc:
            raise ComparisonError(f"{kind} failed: {exc}", rows) from exc
        rows.append(ComparisonRow(
            kind=normalize_kind(kind),
            accuracy=dict(rec.snapshot_test_accuracy),
            mean_seconds={e: float(np.mean(rec.epoch_seconds[:e])) for e in epochs},
            trainable_params=rec.trainable_params,
            total_params=rec.total_params,
        ))
    return rows


def _replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    values = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    values.update(changes)
    return ExperimentConfig(**values)


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    if not rows:
        return "(no results)"
    epochs = sorted(rows[0].accuracy)
    name_w = max(len(LABELS.get(r.kind, r.kind)) for r in rows)
    head = f"{'method':<{name_w}}" + "".join(f"{f'acc@{e} / %':>13}" for e in epochs) \
        + "".join(f"{f'time@{e} / s':>13}" for e in epochs) + f"{'params':>11}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{LABELS.get(r.kind, r.kind):<{name_w}}"
                     + "".join(f"{100 * r.accuracy[e]:>13.2f}" for e in epochs)
                     + "".join(f"{r.mean_seconds[e]:>13.2f}" for e in epochs)
                     + f"{r.total_params:>11}")
    return "\n".join(lines)


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    epochs = sorted(rows[0].accuracy) if rows else []
    w.writerow(["kind"] + [f"acc@{e}" for e in epochs] + [f"time@{e}" for e in epochs]
               + ["trainable_params", "total_params"])
    for r in rows:
        w.writerow([r.kind] + [f"{r.accuracy[e]:.6f}" for e in epochs]
                   + [f"{r.mean_seconds[e]:.3f}" for e in epochs] + [r.trainable_params, r.total_params])
    return buf.getvalue()
