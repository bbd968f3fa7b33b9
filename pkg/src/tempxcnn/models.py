"""The six architectures: CNN and X-CNN families, with and without timestamps.

A model is assembled from *chains* (conv, conv, max-pool, batch norm,
optional dropout).  X-CNN models run an image stream and a difference
stream side by side and, after every chain, exchange feature maps through
1x1 convolutions whose outputs are concatenated onto the other stream.
Timestamp variants append the raw week number to the flattened features
before the first dense layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .layers import (
    SGD, BatchNorm, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2x2,
    OptimizerConfig, ReLU, Sequential, central_differences, one_hot,
    relative_error, softmax, softmax_crossentropy,
)
from .tensor import SeededRng

KINDS = ("cnn", "cnn_ts", "xcnn_absdiff", "xcnn_reldiff", "xcnn_ts_absdiff", "xcnn_ts_reldiff")

CNN_KERNELS = (16, 32, 32, 32, 32)
XCNN_KERNELS = (8, 8, 16, 16, 32)
DENSE_WIDTHS = (64, 32)


def normalize_kind(kind: str) -> str:
    kind = kind.replace("-", "_")
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    return kind


@dataclass(frozen=True)
class ChainSpec:
    kernels: int
    conv_count: int = 2
    use_dropout: bool = True
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.conv_count != 2:
            raise ValueError("a chain has exactly two convolutions")


@dataclass(frozen=True)
class XChainSpec:
    chain: ChainSpec
    cross_kernels: int
    bn_position: str = "before_cross"

    def __post_init__(self):
        if self.bn_position not in ("before_cross", "after_cross"):
            raise ValueError(f"bn_position must be before_cross or after_cross, got {self.bn_position!r}")
        if self.cross_kernels < 0:
            raise ValueError("cross_kernels must be >= 0")


@dataclass
class ModelSpec:
    """Declarative description of one architecture.

    Unset fields (``None``) take the family default: CNN kernels
    16,32,32,32,32 with dropout 0.5 and L2 0.003; X-CNN kernels 8,8,16,16,32
    per stream with dropout 0.25 and L2 0.0003.  Cross-connections default
    to half the chain's kernel count.
    """

    kind: str
    n_classes: int = 2
    input_hw: tuple[int, int] = (64, 96)
    kernels: tuple[int, ...] | None = None
    dense_widths: tuple[int, ...] = DENSE_WIDTHS
    dropout_rate: float | None = None
    l2: float | None = None
    cross_kernels: tuple[int, ...] | None = None
    bn_position: str = "before_cross"
    dtype: str = "float32"

    def __post_init__(self):
        self.kind = normalize_kind(self.kind)
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.dense_widths = tuple(int(v) for v in self.dense_widths)
        if self.kernels is None:
            self.kernels = XCNN_KERNELS if self.cross_modal else CNN_KERNELS
        self.kernels = tuple(int(k) for k in self.kernels)
        if self.dropout_rate is None:
            self.dropout_rate = 0.25 if self.cross_modal else 0.5
        if self.l2 is None:
            self.l2 = 0.0003 if self.cross_modal else 0.003
        if self.cross_kernels is None:
            self.cross_kernels = tuple(k // 2 for k in self.kernels)
        self.cross_kernels = tuple(int(k) for k in self.cross_kernels)
        if self.cross_modal and len(self.cross_kernels) != len(self.kernels):
            raise ValueError("need one cross-kernel count per chain")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def cross_modal(self) -> bool:
        return self.kind.startswith("xcnn")

    @property
    def uses_timestamp(self) -> bool:
        return "_ts" in self.kind

    @property
    def uses_difference(self) -> bool:
        return self.cross_modal

    @property
    def channels(self) -> tuple[str, ...]:
        names = ["image"]
        if self.uses_difference:
            names.append("difference")
        if self.uses_timestamp:
            names.append("timestamp")
        return tuple(names)

    def chain_specs(self) -> list[ChainSpec]:
        last = len(self.kernels) - 1
        return [ChainSpec(k, use_dropout=i < last, dropout_rate=self.dropout_rate)
                for i, k in enumerate(self.kernels)]

    def xchain_specs(self) -> list[XChainSpec]:
        return [XChainSpec(c, k, self.bn_position)
                for c, k in zip(self.chain_specs(), self.cross_kernels)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        return d


@dataclass
class ParamReport:
    trainable: int
    non_trainable: int
    per_layer: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.trainable + self.non_trainable

    def format(self) -> str:
        width = max((len(n) for n, _, _ in self.per_layer), default=10)
        lines = [f"{'layer':<{width}}  {'trainable':>10}  {'non-train':>10}"]
        lines += [f"{n:<{width}}  {t:>10}  {nt:>10}" for n, t, nt in self.per_layer]
        lines.append(f"{'total':<{width}}  {self.trainable:>10}  {self.non_trainable:>10}  ({self.total})")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def build_chain(c_in: int, spec: ChainSpec, rng: SeededRng, dtype, with_bn: bool = True,
                dropout_rng: SeededRng | None = None) -> Sequential:
    layers: list[Layer] = []
    c = c_in
    for _ in range(spec.conv_count):
        layers += [Conv2D(c, spec.kernels, 3, rng, dtype), ReLU()]
        c = spec.kernels
    layers.append(MaxPool2x2())
    if with_bn:
        layers.append(BatchNorm(spec.kernels, dtype))
    if spec.use_dropout and dropout_rng is not None:
        layers.append(Dropout(spec.dropout_rate, dropout_rng))
    return Sequential(layers)


class CrossConnection(Layer):
    """1x1 convolutions exchanging feature maps between two streams.

    ``merged_a = concat(a, conv_b(b))`` and ``merged_b = concat(b, conv_a(a))``
    along the channel axis.  With zero cross kernels the inputs pass through.
    """

    def __init__(self, c_a: int, c_b: int, k: int, rng: SeededRng, dtype=np.float32):
        super().__init__()
        self.c_a, self.c_b, self.k = c_a, c_b, k
        self.from_b = Conv2D(c_b, k, 1, rng, dtype) if k else None
        self.from_a = Conv2D(c_a, k, 1, rng, dtype) if k else None
        self.layers = [c for c in (self.from_b, self.from_a) if c is not None]

    def forward(self, pair, train=False):
        a, b = pair
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ValueError(f"cross-connected streams differ in batch/spatial dims: {a.shape} vs {b.shape}")
        if not self.k:
            return a, b
        merged_a = np.concatenate([a, self.from_b.forward(b, train)], axis=1)
        merged_b = np.concatenate([b, self.from_a.forward(a, train)], axis=1)
        return merged_a, merged_b

    def backward(self, grads):
        ga, gb = grads
        if not self.k:
            return ga, gb
        grad_a = ga[:, :self.c_a] + self.from_a.backward(gb[:, self.c_b:])
        grad_b = gb[:, :self.c_b] + self.from_b.backward(ga[:, self.c_a:])
        return grad_a, grad_b

    def describe(self):
        return f"Cross {self.c_a}|{self.c_b} k={self.k}"


def cross_connect(a: np.ndarray, b: np.ndarray, cross: CrossConnection, train: bool = False):
    return cross.forward((a, b), train)


class XChain(Layer):
    """Chain pair plus cross-connection, optional BN after the merge, dropout."""

    def __init__(self, c_a: int, c_b: int, spec: XChainSpec, rng: SeededRng, dtype,
                 drop_a: SeededRng | None, drop_b: SeededRng | None):
        super().__init__()
        before = spec.bn_position == "before_cross"
        plain = replace(spec.chain, use_dropout=False)
        self.chain_a = build_chain(c_a, plain, rng, dtype, with_bn=before)
        self.chain_b = build_chain(c_b, plain, rng, dtype, with_bn=before)
        k = spec.chain.kernels
        self.cross = CrossConnection(k, k, spec.cross_kernels, rng, dtype)
        self.out_channels = k + spec.cross_kernels
        post_a: list[Layer] = []
        post_b: list[Layer] = []
        if not before:
            post_a.append(BatchNorm(self.out_channels, dtype))
            post_b.append(BatchNorm(self.out_channels, dtype))
        if spec.chain.use_dropout:
            post_a.append(Dropout(spec.chain.dropout_rate, drop_a))
            post_b.append(Dropout(spec.chain.dropout_rate, drop_b))
        self.post_a, self.post_b = Sequential(post_a), Sequential(post_b)
        self.layers = [self.chain_a, self.chain_b, self.cross, self.post_a, self.post_b]

    def forward(self, pair, train=False):
        a, b = pair
        a, b = self.cross.forward((self.chain_a.forward(a, train), self.chain_b.forward(b, train)), train)
        return self.post_a.forward(a, train), self.post_b.forward(b, train)

    def backward(self, grads):
        ga, gb = grads
        ga, gb = self.cross.backward((self.post_a.backward(ga), self.post_b.backward(gb)))
        return self.chain_a.backward(ga), self.chain_b.backward(gb)


def iter_leaf_layers(layer: Layer):
    children = getattr(layer, "layers", None)
    if children is None:
        yield layer
        return
    for child in children:
        yield from iter_leaf_layers(child)


# --------------------------------------------------------------------------
# whole model
# --------------------------------------------------------------------------

class Model:
    """Forward/backward over one of the six architectures.

    Batches are dicts with ``image`` (b, 1, h, w), ``difference`` (b, 1, h, w)
    and ``timestamp`` (b,) or (b, 1), depending on the kind.
    """

    def __init__(self, spec: ModelSpec, rng: SeededRng):
        self.spec = spec
        self.dtype = np.dtype(spec.dtype)
        h, w = spec.input_hw
        n_pool = len(spec.kernels)
        if h >> n_pool < 1 or w >> n_pool < 1:
            raise ValueError(
                f"input {h}x{w} too small for {n_pool} pooling stages (needs >= {2 ** n_pool} per side)")
        dtype = self.dtype
        conv_rng, head_rng = rng.spawn(0), rng.spawn(2)
        drop_rngs = [rng.spawn(3, i) for i in range(2 * n_pool)]

        if spec.cross_modal:
            self.blocks: list[Layer] = []
            c_a = c_b = 1
            for i, xs in enumerate(spec.xchain_specs()):
                block = XChain(c_a, c_b, xs, conv_rng, dtype,
                               drop_rngs[2 * i], drop_rngs[2 * i + 1])
                self.blocks.append(block)
                c_a = c_b = block.out_channels
            final_channels = 2 * c_a
        else:
            self.blocks = []
            c = 1
            for i, cs in enumerate(spec.chain_specs()):
                self.blocks.append(build_chain(c, cs, conv_rng, dtype, dropout_rng=drop_rngs[i]))
                c = cs.kernels
            final_channels = c
        self.flatten_size = (h >> n_pool) * (w >> n_pool) * final_channels

        f_in = self.flatten_size + (1 if spec.uses_timestamp else 0)
        head: list[Layer] = []
        for width in spec.dense_widths:
            head += [Dense(f_in, width, head_rng, regularized=True, dtype=dtype), ReLU(), BatchNorm(width, dtype)]
            f_in = width
        head.append(Dense(f_in, spec.n_classes, head_rng, init="glorot", dtype=dtype))
        self.head = Sequential(head)
        self._flatten = [Flatten(), Flatten()]
        self._shapes = None

    # ---- structure ---------------------------------------------------------

    @property
    def layers(self) -> list[Layer]:
        out: list[Layer] = []
        for block in self.blocks:
            out.extend(iter_leaf_layers(block))
        out.extend(iter_leaf_layers(self.head))
        return out

    def set_dropout_frozen(self, frozen: bool) -> None:
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.freeze_mask = frozen

    def count_params(self) -> ParamReport:
        return count_params(self)

    def recalibrate_batchnorm(self, batches) -> int:
        """Reset every batch norm's running statistics to the average batch
        statistics over ``batches`` with dropout switched off.

        Running averages collected during training see dropout-scaled
        activations, whose variance differs from the infer-mode path.
        Parameters and RNG state are untouched.  Returns the batch count.
        """
        layers = self.layers
        norms = [l for l in layers if isinstance(l, BatchNorm)]
        drops = [(l, l.rate) for l in layers if isinstance(l, Dropout)]
        momenta = [bn.state.momentum for bn in norms]
        count = 0
        try:
            for l, _ in drops:
                l.rate = 0.0
            for batch in batches:
                for bn in norms:
                    bn.state.momentum = count / (count + 1)  # cumulative mean
                self.logits(batch, train=True)
                count += 1
        finally:
            for l, rate in drops:
                l.rate = rate
            for bn, m in zip(norms, momenta):
                bn.state.momentum = m
        return count

    def optimizer_config(self, learning_rate: float = 0.01, momentum: float = 0.9) -> OptimizerConfig:
        return OptimizerConfig(learning_rate, momentum, self.spec.l2)

    # ---- passes --------------------------------------------------------------

    def _check_batch(self, batch: dict) -> None:
        wanted = set(self.spec.channels)
        given = {k for k, v in batch.items() if v is not None}
        missing, extra = wanted - given, given - wanted
        if missing:
            raise ValueError(f"{self.spec.kind} batch is missing channel(s) {sorted(missing)}")
        if extra:
            raise ValueError(f"{self.spec.kind} does not accept channel(s) {sorted(extra)}")
        h, w = self.spec.input_hw
        for name in ("image", "difference"):
            if name in wanted and batch[name].shape[1:] != (1, h, w):
                raise ValueError(f"{name} must be (batch, 1, {h}, {w}), got {batch[name].shape}")

    def logits(self, batch: dict, train: bool = False) -> np.ndarray:
        self._check_batch(batch)
        x = np.asarray(batch["image"], dtype=self.dtype)
        if self.spec.cross_modal:
            pair = (x, np.asarray(batch["difference"], dtype=self.dtype))
            for block in self.blocks:
                pair = block.forward(pair, train)
            self._shapes = (pair[0].shape, pair[1].shape)
            feats = [self._flatten[0].forward(pair[0]), self._flatten[1].forward(pair[1])]
        else:
            for block in self.blocks:
                x = block.forward(x, train)
            self._shapes = (x.shape,)
            feats = [self._flatten[0].forward(x)]
        if self.spec.uses_timestamp:
            ts = np.asarray(batch["timestamp"], dtype=self.dtype).reshape(-1, 1)
            feats.append(ts)
        z = np.concatenate(feats, axis=1) if len(feats) > 1 else feats[0]
        if z.shape[1] - self.spec.uses_timestamp != self.flatten_size:
            raise AssertionError(f"flatten size {z.shape[1]} disagrees with architecture arithmetic {self.flatten_size}")
        return self.head.forward(z, train)

    def forward(self, batch: dict, train: bool = False) -> np.ndarray:
        """Class probabilities (batch, n_classes)."""
        return softmax(self.logits(batch, train))

    def predict(self, batch: dict) -> np.ndarray:
        return self.logits(batch, train=False).argmax(axis=1)

    def backward(self, grad_logits: np.ndarray) -> None:
        grad = self.head.backward(grad_logits)
        if self.spec.cross_modal:
            n = self.flatten_size // 2
            ga = self._flatten[0].backward(grad[:, :n])
            gb = self._flatten[1].backward(grad[:, n:2 * n])
            pair = (ga, gb)
            for block in reversed(self.blocks):
                pair = block.backward(pair)
        else:
            g = self._flatten[0].backward(grad[:, :self.flatten_size])
            for block in reversed(self.blocks):
                g = block.backward(g)

    def loss_and_gradients(self, batch: dict, labels) -> float:
        """Train-mode forward and backward; gradients are left on the layers."""
        y = self._labels(labels, batch)
        loss, grad = softmax_crossentropy(self.logits(batch, train=True), y)
        self.backward(grad)
        return loss

    def backward_and_step(self, batch: dict, labels, optimizer: SGD | OptimizerConfig) -> float:
        if isinstance(optimizer, OptimizerConfig):
            optimizer = SGD(optimizer)
        loss = self.loss_and_gradients(batch, labels)
        optimizer.step(self.layers)
        return loss

    def _labels(self, labels, batch) -> np.ndarray:
        labels = np.asarray(labels)
        n = len(batch["image"])
        if labels.ndim == 1:
            if labels.shape[0] != n:
                raise ValueError(f"{labels.shape[0]} labels for a batch of {n}")
            return one_hot(labels, self.spec.n_classes, self.dtype)
        if labels.shape != (n, self.spec.n_classes):
            raise ValueError(f"labels {labels.shape} do not match batch of {n}")
        return labels.astype(self.dtype)

    # ---- parameters ------------------------------------------------------------

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter and buffer, in a stable order, by reference."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out.append((f"{i}.{name}", arr))
            for name, arr in layer.buffers.items():
                out.append((f"{i}.{name}", arr))
        return out


def build_model(spec: ModelSpec, rng: SeededRng | int = 0, check_shapes: bool = True) -> Model:
    """Construct a model; optionally verify flatten arithmetic on a dummy batch."""
    if not isinstance(rng, SeededRng):
        rng = SeededRng(rng)
    model = Model(spec, rng)
    if check_shapes:
        h, w = spec.input_hw
        dummy = {"image": np.zeros((2, 1, h, w), model.dtype)}
        if spec.uses_difference:
            dummy["difference"] = dummy["image"]
        if spec.uses_timestamp:
            dummy["timestamp"] = np.zeros(2, model.dtype)
        model.logits(dummy, train=False)
        n_pool = len(spec.kernels)
        for shape in model._shapes:
            if shape[2:] != (h >> n_pool, w >> n_pool):
                raise AssertionError(f"final feature map {shape} disagrees with {n_pool} floor-halvings of {h}x{w}")
    return model


def count_params(model: Model) -> ParamReport:
    """Exact counts; batch-norm running statistics are non-trainable."""
    per_layer = []
    trainable = non_trainable = 0
    for layer in model.layers:
        t = sum(int(p.size) for p in layer.params.values())
        nt = sum(int(b.size) for b in layer.buffers.values())
        if t or nt:
            per_layer.append((layer.describe(), t, nt))
        trainable += t
        non_trainable += nt
    return ParamReport(trainable, non_trainable, per_layer)


def model_gradient_check(model: Model, batch: dict, labels, max_entries: int = 12,
                         step: float = 1e-5, rng: SeededRng | None = None) -> dict[str, float]:
    """Finite-difference check of every parameter tensor of a float64 model.

    Samples up to ``max_entries`` coordinates per tensor.  Returns the
    relative error per tensor.
    """
    if model.dtype != np.float64:
        raise TypeError("model gradient checks need a float64 model")
    rng = rng or SeededRng(0)
    y = model._labels(labels, batch)
    model.logits(batch, train=True)
    model.set_dropout_frozen(True)
    try:
        def loss() -> float:
            return softmax_crossentropy(model.logits(batch, train=True), y)[0]

        model.loss_and_gradients(batch, labels)
        errors = {}
        for i, layer in enumerate(model.layers):
            for name, p in layer.params.items():
                analytic = layer.grads[name].reshape(-1).copy()
                idx = np.arange(p.size)
                if p.size > max_entries:
                    idx = np.sort(rng.gen.choice(p.size, size=max_entries, replace=False))
                numeric = central_differences(loss, p, idx, step)
                errors[f"{i}:{layer.describe()}.{name}"] = relative_error(analytic[idx], numeric)
    finally:
        model.set_dropout_frozen(False)
    return errors


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"XMID"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    """Binary container, all integers little-endian.

    ``XMID`` | u16 version | u32 spec-json length | spec json (utf-8) |
    u32 blob count | per blob: u16 name length, name, u8 rank,
    rank x u32 extents, float32 values (little-endian, row-major).
    """
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    arrays = model.state_arrays()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(spec_json)))
        fh.write(spec_json)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an XMID checkpoint")
    version, spec_len = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    spec_dict = json.loads(take(spec_len))
    for key in ("input_hw", "kernels", "dense_widths", "cross_kernels"):
        spec_dict[key] = tuple(spec_dict[key])
    model = build_model(ModelSpec(**spec_dict), SeededRng(0), check_shapes=False)
    expected = dict(model.state_arrays())
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise CheckpointError(f"{path}: {count} blobs, model expects {len(expected)}")
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        values = np.frombuffer(take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4")
        target = expected.get(name)
        if target is None or target.shape != shape:
            raise CheckpointError(f"{path}: blob {name} {shape} does not fit the model")
        target[...] = values.reshape(shape)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last blob")
    return model
