"""Finite-difference test battery over every layer type and a miniature model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .layers import (BatchNorm, Conv2D, Dense, Dropout, MaxPool2x2, ReLU, Sequential,
                     SoftmaxCrossEntropy, gradient_check, one_hot)
from .models import KINDS, ModelSpec, build_model, model_gradient_check
from .tensor import SeededRng

LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
# Deep stacks have many ReLU/max-pool kinks; a 1e-5 step on a first-layer
# weight moves thousands of activations and can cross one.
MODEL_STEP = 1e-6


@dataclass
class BatteryResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _distinct(g: np.random.Generator, shape) -> np.ndarray:
    # well-separated values keep max-pool and ReLU away from their kinks
    n = int(np.prod(shape))
    vals = (g.permutation(n) - (n - 1) / 2 + 0.25) * (2.0 / n)  # never exactly 0
    return vals.reshape(shape)


def _case_conv3(g, rng):
    c_in, c_out = int(g.integers(1, 4)), int(g.integers(1, 5))
    return Conv2D(c_in, c_out, 3, rng, dtype=np.float64), g.normal(size=(2, c_in, 5, 6))


def _case_conv1(g, rng):
    c_in, c_out = int(g.integers(1, 5)), int(g.integers(1, 5))
    return Conv2D(c_in, c_out, 1, rng, dtype=np.float64), g.normal(size=(2, c_in, 4, 5))


def _case_pool(g, rng):
    h, w = int(g.integers(2, 7)), int(g.integers(2, 7))
    return MaxPool2x2(), _distinct(g, (2, 2, h, w))


def _case_bn(g, rng):
    n = int(g.integers(1, 5))
    layer = BatchNorm(n, dtype=np.float64)
    layer.params["gamma"][...] = g.uniform(0.5, 1.5, n)
    layer.params["beta"][...] = g.normal(size=n)
    shape = (4, n, 3, 3) if g.random() < 0.5 else (5, n)
    return layer, g.normal(size=shape)


def _case_dense(g, rng):
    f_in, f_out = int(g.integers(1, 7)), int(g.integers(1, 6))
    return Dense(f_in, f_out, rng, dtype=np.float64), g.normal(size=(3, f_in))


def _case_relu(g, rng):
    return ReLU(), _distinct(g, (3, 7))


def _case_dropout(g, rng):
    return Dropout(float(g.uniform(0.1, 0.6)), rng), g.normal(size=(4, 6))


def _case_softmax_ce(g, rng):
    n, k = int(g.integers(2, 6)), int(g.integers(2, 5))
    labels = one_hot(g.integers(0, k, n), k, dtype=np.float64)
    return SoftmaxCrossEntropy(labels), g.normal(size=(n, k))


def _case_stack(g, rng):
    layers = [Conv2D(2, 3, 3, rng, dtype=np.float64), BatchNorm(3, dtype=np.float64), ReLU(),
              MaxPool2x2()]
    return Sequential(layers), g.normal(size=(3, 2, 4, 6))


CASES: dict[str, Callable] = {
    "conv3x3": _case_conv3,
    "conv1x1": _case_conv1,
    "maxpool2x2": _case_pool,
    "batchnorm": _case_bn,
    "dense": _case_dense,
    "relu": _case_relu,
    "dropout": _case_dropout,
    "softmax_crossentropy": _case_softmax_ce,
    "conv_bn_relu_pool": _case_stack,
}


def check_layer_kind(name: str, instances: int = 5, seed: int = 0) -> BatteryResult:
    worst = 0.0
    for i in range(instances):
        rng = SeededRng(seed).spawn(hash_name(name), i)
        layer, x = CASES[name](rng.gen, rng.spawn(0))
        report = gradient_check(layer, x, tolerance=LAYER_TOLERANCE, rng=rng.spawn(1))
        worst = max(worst, report.max_rel_error)
    return BatteryResult(name, instances, worst, LAYER_TOLERANCE)


def hash_name(name: str) -> int:
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")


def check_miniature_model(kind: str = "xcnn_ts_absdiff", seed: int = 0, batch: int = 4) -> BatteryResult:
    """End-to-end check of a 16x16 model with every channel the kind uses.

    Three narrow chains (16 -> 2 after pooling) keep the dense head small.
    """
    spec = ModelSpec(kind, input_hw=(16, 16), kernels=(3, 4, 4), dense_widths=(6, 5), dtype="float64")
    model = build_model(spec, SeededRng(seed))
    g = SeededRng(seed).spawn(9).gen
    data: dict[str, np.ndarray] = {"image": g.normal(size=(batch, 1, 16, 16))}
    if model.spec.uses_difference:
        data["difference"] = g.normal(size=(batch, 1, 16, 16))
    if model.spec.uses_timestamp:
        data["timestamp"] = g.integers(0, 9, batch).astype(np.float64)
    labels = np.arange(batch) % model.spec.n_classes
    errors = model_gradient_check(model, data, labels, step=MODEL_STEP, rng=SeededRng(seed).spawn(10))
    return BatteryResult(f"model:{kind}@16x16", 1, max(errors.values()), MODEL_TOLERANCE)


def run_battery(instances: int = 5, seed: int = 0, model_kinds=KINDS) -> list[BatteryResult]:
    results = [check_layer_kind(name, instances, seed) for name in CASES]
    results += [check_miniature_model(kind, seed) for kind in model_kinds]
    return results


def format_battery(results: list[BatteryResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'n':>3}  {'max rel err':>12}  {'tol':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.instances:>3}  {r.max_rel_error:>12.3e}  {r.tolerance:>7.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
