"""Layer forward/backward passes, loss, init, SGD and a gradient checker.

Arrays are numpy ndarrays in NCHW layout (conv side) or (batch, features)
(dense side).  Every kernel keeps the dtype of its input so the same code
runs in float32 for training and float64 for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import SeededRng

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


# --------------------------------------------------------------------------
# functional kernels
# --------------------------------------------------------------------------

# Working-set size for one im2col block; small channel counts are
# memory-bound, so sub-batches sized to stay in cache run ~2x faster.
_CONV_BLOCK_BYTES = 1 << 20


def _conv_chunk(c_in: int, k: int, h: int, w: int, itemsize: int) -> int:
    return max(1, _CONV_BLOCK_BYTES // max(k * k * c_in * h * w * itemsize, 1))


def _im2col(xp: np.ndarray, k: int, h: int, w: int, cols: np.ndarray) -> np.ndarray:
    """Fill ``cols`` (k, k, c_in, n, h, w) from padded ``xp`` (n, c_in, ...)."""
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[i, j] = xt[:, :, i:i + h, j:j + w]
    return cols


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Stride-1 "same" cross-correlation.  Returns ``(out, cache)``.

    ``weight`` has shape (c_out, c_in, k, k) with k in {1, 3}.
    """
    if x.ndim != 4:
        raise ValueError(f"conv input must be (batch, ch, h, w), got {x.shape}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    b, _, h, w = x.shape
    pad = kh // 2
    dtype = np.result_type(x, weight)
    if pad:
        xp = np.zeros((b, c_in, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:-pad, pad:-pad] = x
    else:
        xp = x
    wm = weight.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = np.empty((b, c_out, h, w), dtype=dtype)
    cs = _conv_chunk(c_in, kh, h, w, xp.itemsize)
    cols = np.empty((kh, kw, c_in, min(cs, b), h, w), dtype=xp.dtype)
    for s in range(0, b, cs):
        n = min(cs, b - s)
        cc = _im2col(xp[s:s + n], kh, h, w, cols[:, :, :, :n])
        res = wm @ cc.reshape(kh * kw * c_in, -1)
        res += bias[:, None]
        out[s:s + n] = res.reshape(c_out, n, h, w).transpose(1, 0, 2, 3)
    return out, (xp, weight, x.shape)


def conv2d_backward(grad_out: np.ndarray, cache):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    xp, weight, in_shape = cache
    c_out, c_in, kh, kw = weight.shape
    b, _, h, w = in_shape
    if grad_out.shape != (b, c_out, h, w):
        raise ValueError(f"grad shape {grad_out.shape} does not match forward output {(b, c_out, h, w)}")
    pad = kh // 2
    wm = weight.transpose(0, 2, 3, 1).reshape(c_out, -1)
    grad_wm = np.zeros(wm.shape, dtype=weight.dtype)
    grad_xp = np.zeros(xp.shape, dtype=xp.dtype)
    cs = _conv_chunk(c_in, kh, h, w, xp.itemsize)
    cols = np.empty((kh, kw, c_in, min(cs, b), h, w), dtype=xp.dtype)
    for s in range(0, b, cs):
        n = min(cs, b - s)
        cc = _im2col(xp[s:s + n], kh, h, w, cols[:, :, :, :n]).reshape(kh * kw * c_in, -1)
        g = np.ascontiguousarray(grad_out[s:s + n].transpose(1, 0, 2, 3)).reshape(c_out, -1)
        grad_wm += g @ cc.T
        dcols = (wm.T @ g).reshape(kh, kw, c_in, n, h, w)
        gt = grad_xp[s:s + n].transpose(1, 0, 2, 3)
        for i in range(kh):
            for j in range(kw):
                gt[:, :, i:i + h, j:j + w] += dcols[i, j]
    grad_w = np.ascontiguousarray(grad_wm.reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2))
    grad_b = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(weight.dtype)
    grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w] if pad else grad_xp
    return grad_x, grad_w, grad_b


def maxpool2x2_forward(x: np.ndarray):
    """2x2 non-overlapping max pooling with floor semantics.

    Returns ``(out, mask)`` where ``mask`` holds the winner index (0..3,
    row-major within the block, first maximum wins) and the input shape.
    """
    b, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"pooling needs h, w >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2x2_backward(grad_out: np.ndarray, mask):
    idx, in_shape = mask
    if grad_out.shape != idx.shape:
        raise ValueError(f"grad shape {grad_out.shape} does not match pooled shape {idx.shape}")
    b, c, h, w = in_shape
    h2, w2 = h // 2, w // 2
    blocks = np.zeros((b, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, idx[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    grad = np.zeros(in_shape, dtype=grad_out.dtype)
    grad[:, :, :2 * h2, :2 * w2] = blocks.reshape(b, c, 2 * h2, 2 * w2)
    return grad


def _bn_axes(x: np.ndarray):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ValueError(f"batch norm expects rank 2 or 4 input, got {x.shape}")


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, n: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.ones(n, dtype), np.zeros(n, dtype), np.zeros(n, dtype), np.ones(n, dtype))


def batchnorm_forward(x: np.ndarray, state: BatchNormState, train: bool):
    """Per-channel normalisation.  Returns ``(out, cache)``; cache is None in infer mode."""
    axes, bshape = _bn_axes(x)
    dtype = x.dtype
    if train:
        n = x.size // x.shape[1]
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs batch >= 2")
        mean = x.mean(axis=axes, dtype=np.float64)
        centered = x - mean.astype(dtype).reshape(bshape)
        var = (centered * centered).mean(axis=axes, dtype=np.float64)
        inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(dtype)
        xhat = centered * inv_std.reshape(bshape)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
        out = xhat * state.gamma.reshape(bshape) + state.beta.reshape(bshape)
        return out, (xhat, inv_std, state.gamma, n)
    inv_std = (1.0 / np.sqrt(state.running_var.astype(np.float64) + state.epsilon)).astype(dtype)
    scale = (state.gamma * inv_std).reshape(bshape)
    shift = (state.beta - state.running_mean * state.gamma * inv_std).reshape(bshape)
    return x * scale + shift, None


def batchnorm_backward(grad_out: np.ndarray, cache):
    """Train-mode gradient.  Returns ``(grad_input, grad_gamma, grad_beta)``."""
    if cache is None:
        raise ValueError("no train-mode forward cache; run batchnorm_forward(train=True) first")
    xhat, inv_std, gamma, n = cache
    axes, bshape = _bn_axes(grad_out)
    dtype = grad_out.dtype
    grad_beta = grad_out.sum(axis=axes, dtype=np.float64)
    grad_gamma = (grad_out * xhat).sum(axis=axes, dtype=np.float64)
    grad_x = (gamma * inv_std).reshape(bshape) / n * (
        n * grad_out
        - grad_beta.astype(dtype).reshape(bshape)
        - xhat * grad_gamma.astype(dtype).reshape(bshape))
    return grad_x.astype(dtype), grad_gamma.astype(dtype), grad_beta.astype(dtype)


def dropout_apply(x: np.ndarray, rate: float, train: bool, rng: SeededRng | None = None,
                  mask: np.ndarray | None = None):
    """Inverted dropout.  Returns ``(out, mask)``; mask is None when inactive.

    Passing ``mask`` reuses a previously drawn mask instead of sampling.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = rng.gen.random(size=x.shape) >= rate
        mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense input {x.shape} does not match weight {weight.shape}")
    return x @ weight + bias, x


def dense_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray):
    if grad_out.shape != (x.shape[0], weight.shape[1]):
        raise ValueError(f"grad shape {grad_out.shape} does not match dense output")
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(grad_out: np.ndarray, positive: np.ndarray):
    return grad_out * positive


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_crossentropy(logits: np.ndarray, labels: np.ndarray):
    """Mean categorical cross-entropy.  Returns ``(loss, grad_logits)``."""
    if logits.shape != labels.shape or logits.ndim != 2:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} must match (batch, n)")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    batch = logits.shape[0]
    loss = float(-(labels * log_p).sum(dtype=np.float64) / batch)
    grad = (np.exp(log_p) - labels) / logits.dtype.type(batch)
    return loss, grad.astype(logits.dtype)


def one_hot(labels, n: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValueError(f"labels must be integers in [0, {n})")
    out = np.zeros((labels.size, n), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def fan_in(shape) -> int:
    """Conv kernels are (c_out, c_in, k, k); dense weights are (f_in, f_out)."""
    if len(shape) == 4:
        return int(shape[1] * shape[2] * shape[3])
    if len(shape) == 2:
        return int(shape[0])
    raise ValueError(f"cannot infer fan-in of shape {shape}")


def he_init(rng: SeededRng, shape, dtype=np.float32) -> np.ndarray:
    """Gaussian with stddev sqrt(2 / fan_in)."""
    return rng.normal(tuple(shape), 0.0, math.sqrt(2.0 / fan_in(shape)), dtype=dtype)


def glorot_uniform(rng: SeededRng, shape, dtype=np.float32) -> np.ndarray:
    fan_out = shape[1] if len(shape) == 2 else shape[0] * shape[2] * shape[3]
    limit = math.sqrt(6.0 / (fan_in(shape) + fan_out))
    return (rng.gen.uniform(-limit, limit, size=tuple(shape))).astype(dtype)


# --------------------------------------------------------------------------
# layer objects
# --------------------------------------------------------------------------

class Layer:
    """Base class: ``params``/``grads`` share keys; ``buffers`` are non-trainable."""

    regularized = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)

    def describe(self) -> str:
        return type(self).__name__


class Conv2D(Layer):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: SeededRng, dtype=np.float32):
        super().__init__()
        if kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {kernel}")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.params["weight"] = he_init(rng, (c_out, c_in, kernel, kernel), dtype)
        self.params["bias"] = np.zeros(c_out, dtype)
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = conv2d_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(grad, self._cache)
        self.grads["weight"], self.grads["bias"] = gw, gb
        return gx

    def describe(self):
        return f"Conv2D {self.kernel}x{self.kernel} {self.c_in}->{self.c_out}"


class ReLU(Layer):
    def forward(self, x, train=False):
        out, self._positive = relu(x)
        return out

    def backward(self, grad):
        return relu_backward(grad, self._positive)


class MaxPool2x2(Layer):
    def forward(self, x, train=False):
        out, self._mask = maxpool2x2_forward(x)
        return out

    def backward(self, grad):
        return maxpool2x2_backward(grad, self._mask)


class BatchNorm(Layer):
    def __init__(self, n: int, dtype=np.float32):
        super().__init__()
        self.n = n
        self.state = BatchNormState.create(n, dtype)
        self.params = {"gamma": self.state.gamma, "beta": self.state.beta}
        self.buffers = {"running_mean": self.state.running_mean, "running_var": self.state.running_var}
        self._cache = None

    def forward(self, x, train=False):
        out, self._cache = batchnorm_forward(x, self.state, train)
        return out

    def backward(self, grad):
        gx, gg, gb = batchnorm_backward(grad, self._cache)
        self.grads["gamma"], self.grads["beta"] = gg, gb
        return gx

    def describe(self):
        return f"BatchNorm {self.n}"


class Dropout(Layer):
    """Inverted dropout.  ``freeze_mask`` reuses the last mask (for gradient checks)."""

    def __init__(self, rate: float, rng: SeededRng):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.freeze_mask = False
        self._mask = None

    def forward(self, x, train=False):
        reuse = self._mask if (self.freeze_mask and self._mask is not None) else None
        out, mask = dropout_apply(x, self.rate, train, self.rng, mask=reuse)
        self._mask = mask
        return out

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask

    def describe(self):
        return f"Dropout {self.rate}"


class Dense(Layer):
    def __init__(self, f_in: int, f_out: int, rng: SeededRng, init: str = "he",
                 regularized: bool = False, dtype=np.float32):
        super().__init__()
        self.f_in, self.f_out = f_in, f_out
        initializer = he_init if init == "he" else glorot_uniform
        self.params["weight"] = initializer(rng, (f_in, f_out), dtype)
        self.params["bias"] = np.zeros(f_out, dtype)
        self.regularized = regularized
        self._x = None

    def forward(self, x, train=False):
        out, self._x = dense_forward(x, self.params["weight"], self.params["bias"])
        return out

    def backward(self, grad):
        gx, gw, gb = dense_backward(grad, self._x, self.params["weight"])
        self.grads["weight"], self.grads["bias"] = gw, gb
        return gx

    def describe(self):
        return f"Dense {self.f_in}->{self.f_out}"


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class SoftmaxCrossEntropy(Layer):
    """Loss as a layer with fixed labels: forward gives a 0-d loss array."""

    def __init__(self, labels: np.ndarray):
        super().__init__()
        self.labels = labels

    def forward(self, x, train=False):
        loss, self._grad = softmax_crossentropy(x, self.labels.astype(x.dtype))
        return np.asarray(loss, dtype=x.dtype)

    def backward(self, grad):
        return self._grad * grad


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    l2_gamma: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.l2_gamma < 0:
            raise ValueError(f"l2 coefficient must be >= 0, got {self.l2_gamma}")


class SGD:
    """Momentum SGD; L2 (2*gamma*w) only on weights of ``regularized`` layers."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self, layers) -> None:
        cfg = self.config
        for layer in layers:
            for name, value in layer.params.items():
                grad = layer.grads.get(name)
                if grad is None:
                    continue
                if grad.shape != value.shape:
                    raise ValueError(f"{layer.describe()}.{name}: grad {grad.shape} vs param {value.shape}")
                if layer.regularized and name == "weight" and cfg.l2_gamma:
                    grad = grad + 2.0 * cfg.l2_gamma * value
                key = (id(layer), name)
                v = self.velocity.get(key)
                if v is None:
                    v = self.velocity[key] = np.zeros_like(value)
                v *= cfg.momentum
                v -= cfg.learning_rate * grad
                value += v


def sgd_step(layers, config: OptimizerConfig, optimizer: SGD | None = None) -> SGD:
    """One update of every parameter; returns the optimizer holding velocities."""
    optimizer = optimizer or SGD(config)
    optimizer.step(layers)
    return optimizer


# --------------------------------------------------------------------------
# finite-difference gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


GRAD_ABS_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor is 1e-3 of the largest gradient magnitude in the tensor, but
    never below ``GRAD_ABS_FLOOR``: a tensor whose true gradient is zero
    (a conv bias feeding batch norm) then reads as round-off, not 100 %.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(1e-3 * scale, GRAD_ABS_FLOOR))
    return float((np.abs(a - n) / denom).max())


def central_differences(loss, array: np.ndarray, idx: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d loss / d array[flat idx] by central differences, perturbing in place."""
    flat = array.reshape(-1)
    numeric = np.empty(idx.size)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        plus = loss()
        flat[i] = orig - step
        minus = loss()
        flat[i] = orig
        numeric[k] = (plus - minus) / (2 * step)
    return numeric


def gradient_check(layer: Layer, x: np.ndarray, tolerance: float = 1e-4, step: float = 1e-5,
                   rng: SeededRng | None = None, max_entries: int | None = None,
                   train: bool = True) -> GradCheckReport:
    """Central differences on L = sum(forward(x) * R) for a fixed random R.

    Checks the input gradient and every parameter gradient.  The layer must
    hold float64 parameters; ``max_entries`` caps how many coordinates of
    each tensor are perturbed.
    """
    rng = rng or SeededRng(0)
    x = np.array(x, dtype=np.float64)
    layers = list(_walk(layer))
    for lyr in layers:
        for name, p in lyr.params.items():
            if p.dtype != np.float64:
                raise TypeError(f"{lyr.describe()}.{name} is {p.dtype}; gradient checks need float64")

    dropouts = [lyr for lyr in layers if isinstance(lyr, Dropout)]
    out = layer.forward(x, train)
    for d in dropouts:
        d.freeze_mask = True
    proj = rng.normal(np.shape(out), dtype=np.float64)

    def loss() -> float:
        return float(np.sum(layer.forward(x, train) * proj))

    try:
        loss()
        analytic = {"input": np.array(layer.backward(proj.copy()), dtype=np.float64)}
        targets = {"input": x}
        for i, lyr in enumerate(layers):
            for name, p in lyr.params.items():
                key = f"{i}:{lyr.describe()}.{name}"
                analytic[key] = np.array(lyr.grads[name], dtype=np.float64)
                targets[key] = p

        errors = {}
        for key, arr in targets.items():
            idx = np.arange(arr.size)
            if max_entries is not None and arr.size > max_entries:
                idx = np.sort(rng.gen.choice(arr.size, size=max_entries, replace=False))
            numeric = central_differences(loss, arr, idx, step)
            errors[key] = relative_error(analytic[key].reshape(-1)[idx], numeric)
    finally:
        for d in dropouts:
            d.freeze_mask = False
    return GradCheckReport(max(errors.values(), default=0.0), tolerance, errors)


def _walk(layer: Layer):
    yield layer
    for child in getattr(layer, "layers", ()):
        yield from _walk(child)
