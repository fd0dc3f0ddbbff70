"""Small numpy neural-network kernel.

Arrays are channels-last (``(batch, height, width, channels)`` for 2-D
convolutions, ``(batch, length, channels)`` for 1-D ones). Every parameterized
layer stores a ``(weights, biases)`` pair inside :class:`ModelParams`; the
non-parameterized layers (activations, pooling, dropout, flatten) only live in
the :class:`Architecture`.

The network returns logits. A trailing ``softmax`` activation in an
architecture is fused into the loss functions and skipped by :func:`forward`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

LAYER_KINDS = ("dense", "conv2d", "conv1d", "maxpool1d", "dropout", "flatten", "activation")
ACTIVATIONS = ("relu", "leaky_relu", "softmax", "linear")
PARAM_KINDS = ("dense", "conv2d", "conv1d")


class ShapeError(ValueError):
    """Raised when consecutive layers cannot be chained."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0  # dense units or conv filters
    kernel: int = 0
    stride: int = 1
    padding: str = "same"
    rate: float = 0.0
    activation: str = ""
    slope: float = 0.2
    pool: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "conv1d", "maxpool1d"):
            if self.stride < 1:
                raise ValueError(f"{self.kind}: stride must be >= 1, got {self.stride}")
            if self.padding != "same":
                raise ValueError(f"{self.kind}: only 'same' padding is supported")
        if self.kind in ("conv2d", "conv1d"):
            if self.kernel < 1:
                raise ValueError(f"{self.kind}: kernel size must be >= 1, got {self.kernel}")
            if self.units < 1:
                raise ValueError(f"{self.kind}: filter count must be >= 1")
        if self.kind == "dense" and self.units < 1:
            raise ValueError("dense: units must be >= 1")
        if self.kind == "maxpool1d" and self.pool < 1:
            raise ValueError("maxpool1d: pool size must be >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def describe(self) -> str:
        if self.kind == "activation":
            return f"activation[{self.activation}]"
        return self.kind


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def conv2d(filters: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", units=filters, kernel=kernel, stride=stride)


def conv1d(filters: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv1d", units=filters, kernel=kernel, stride=stride)


def maxpool1d(pool: int = 2, stride: int = 1) -> LayerSpec:
    return LayerSpec("maxpool1d", pool=pool, stride=stride)


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def activation(name: str, slope: float = 0.2) -> LayerSpec:
    return LayerSpec("activation", activation=name, slope=slope)


def same_padding(n: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out_len, pad_before, pad_after)`` for TF-style 'same' padding."""
    out = -(-n // stride)
    total = max((out - 1) * stride + kernel - n, 0)
    return out, total // 2, total - total // 2


@dataclass(frozen=True)
class Architecture:
    name: str
    specs: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False)
    param_shapes: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        shapes, params = _infer_shapes(self.specs, self.input_shape)
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "param_shapes", params)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def forward_specs(self) -> tuple[LayerSpec, ...]:
        """Specs actually executed by :func:`forward` (trailing softmax removed)."""
        specs = self.specs
        if specs and specs[-1].kind == "activation" and specs[-1].activation == "softmax":
            specs = specs[:-1]
        return specs


def _infer_shapes(specs, input_shape):
    if not specs:
        raise ShapeError("architecture has no layers")
    shape = tuple(input_shape)
    shapes = []
    params = []
    prev = "input"
    for idx, spec in enumerate(specs):
        here = f"layer {idx} ({spec.describe()})"

        def fail(expect):
            raise ShapeError(f"{here} cannot follow {prev}: expected {expect}, got shape {shape}")

        if spec.kind == "dense":
            if len(shape) != 1:
                fail("flat features")
            params.append(((shape[0], spec.units), (spec.units,)))
            shape = (spec.units,)
        elif spec.kind == "conv2d":
            if len(shape) != 3:
                fail("(height, width, channels)")
            h = same_padding(shape[0], spec.kernel, spec.stride)[0]
            w = same_padding(shape[1], spec.kernel, spec.stride)[0]
            params.append(((spec.kernel, spec.kernel, shape[2], spec.units), (spec.units,)))
            shape = (h, w, spec.units)
        elif spec.kind == "conv1d":
            if len(shape) != 2:
                fail("(length, channels)")
            n = same_padding(shape[0], spec.kernel, spec.stride)[0]
            params.append(((spec.kernel, shape[1], spec.units), (spec.units,)))
            shape = (n, spec.units)
        elif spec.kind == "maxpool1d":
            if len(shape) != 2:
                fail("(length, channels)")
            shape = (same_padding(shape[0], spec.pool, spec.stride)[0], shape[1])
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
        prev = here
    if len(shape) != 1:
        raise ShapeError(f"final {prev} must produce flat class scores, got shape {shape}")
    return tuple(shapes), tuple(params)


@dataclass
class ModelParams:
    arch: Architecture
    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def architecture_id(self) -> str:
        return self.arch.name

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, [(w.copy(), b.copy()) for w, b in self.layers])

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in self.layers for a in pair])

    def from_flat(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec)
        out = []
        pos = 0
        for w, b in self.layers:
            nw, nb = w.size, b.size
            out.append(
                (
                    vec[pos : pos + nw].reshape(w.shape).astype(w.dtype),
                    vec[pos + nw : pos + nw + nb].reshape(b.shape).astype(b.dtype),
                )
            )
            pos += nw + nb
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, model needs {pos}")
        return ModelParams(self.arch, out)

    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def equals(self, other: "ModelParams") -> bool:
        if self.architecture_id != other.architecture_id:
            return False
        return all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )


def build_model(arch: Architecture, rng_seed: int, dtype=np.float32) -> ModelParams:
    """Initialize weights with He-uniform fan-in scaling and zero biases."""
    rng = np.random.default_rng(rng_seed)
    layers = []
    for wshape, bshape in arch.param_shapes:
        fan_in = int(np.prod(wshape[:-1]))
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=wshape).astype(dtype)
        layers.append((w, np.zeros(bshape, dtype=dtype)))
    return ModelParams(arch, layers)


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams(params.arch, [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers])


def average_params(models: Sequence[ModelParams], weights: Sequence[float] | None = None) -> ModelParams:
    """Element-wise (weighted) mean of models sharing one architecture.

    Accumulates in float64 in the given order; averaging identical models
    returns them bit for bit.
    """
    if not models:
        raise ValueError("cannot average an empty set of models")
    first = models[0]
    for m in models[1:]:
        if m.architecture_id != first.architecture_id or len(m.layers) != len(first.layers):
            raise ValueError(
                f"architecture mismatch while averaging: {first.architecture_id!r} vs {m.architecture_id!r}"
            )
    if weights is None:
        weights = [1.0] * len(models)
    if len(weights) != len(models):
        raise ValueError("one weight per model required")
    total = float(sum(weights))
    if total <= 0:
        raise ValueError("averaging weights must sum to a positive value")
    out = []
    for li, (w0, b0) in enumerate(first.layers):
        accw = np.zeros(w0.shape, dtype=np.float64)
        accb = np.zeros(b0.shape, dtype=np.float64)
        for m, wt in zip(models, weights):
            w, b = m.layers[li]
            if w.shape != w0.shape or b.shape != b0.shape:
                raise ValueError(f"parameter shape mismatch in layer {li} while averaging")
            accw += float(wt) * w
            accb += float(wt) * b
        out.append(((accw / total).astype(w0.dtype), (accb / total).astype(b0.dtype)))
    return ModelParams(first.arch, out)


# ---------------------------------------------------------------- layers


def _patches2d(xp, k, s, oh, ow):
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(xp, (n, oh, ow, k, k, c), (sn, sh * s, sw * s, sh, sw, sc), writeable=False)


def _conv2d_fwd(spec, w, b, x):
    n, h, wd, c = x.shape
    k, s = spec.kernel, spec.stride
    oh, pt, pb = same_padding(h, k, s)
    ow, pl, pr = same_padding(wd, k, s)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
    cols = _patches2d(np.ascontiguousarray(xp), k, s, oh, ow).reshape(n * oh * ow, k * k * c)
    y = cols @ w.reshape(k * k * c, -1) + b
    return y.reshape(n, oh, ow, -1), (cols, xp.shape, (pt, pl), x.shape)


def _conv2d_bwd(spec, w, b, cache, dy):
    cols, xp_shape, (pt, pl), x_shape = cache
    k, s = spec.kernel, spec.stride
    n, oh, ow, f = dy.shape
    dy2 = dy.reshape(-1, f)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(-1, f).T).reshape(n, oh, ow, k, k, -1)
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pt : pt + x_shape[1], pl : pl + x_shape[2], :]
    return dx, dw, db


def _conv1d_fwd(spec, w, b, x):
    n, length, c = x.shape
    k, s = spec.kernel, spec.stride
    ol, pb, pa = same_padding(length, k, s)
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (pb, pa), (0, 0))) if (pb or pa) else x)
    sn, sl, sc = xp.strides
    cols = as_strided(xp, (n, ol, k, c), (sn, sl * s, sl, sc), writeable=False).reshape(n * ol, k * c)
    y = cols @ w.reshape(k * c, -1) + b
    return y.reshape(n, ol, -1), (cols, xp.shape, pb, x.shape)


def _conv1d_bwd(spec, w, b, cache, dy):
    cols, xp_shape, pb, x_shape = cache
    k, s = spec.kernel, spec.stride
    n, ol, f = dy.shape
    dy2 = dy.reshape(-1, f)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(-1, f).T).reshape(n, ol, k, -1)
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for i in range(k):
        dxp[:, i : i + s * (ol - 1) + 1 : s, :] += dcols[:, :, i, :]
    return dxp[:, pb : pb + x_shape[1], :], dw, db


def _maxpool1d_fwd(spec, x):
    n, length, c = x.shape
    p, s = spec.pool, spec.stride
    ol, pb, pa = same_padding(length, p, s)
    xp = np.pad(x, ((0, 0), (pb, pa), (0, 0)), constant_values=-np.inf)
    sn, sl, sc = xp.strides
    win = as_strided(xp, (n, ol, p, c), (sn, sl * s, sl, sc), writeable=False)
    arg = win.argmax(axis=2)
    y = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return y, (arg, xp.shape, pb, x.shape)


def _maxpool1d_bwd(spec, cache, dy):
    arg, xp_shape, pb, x_shape = cache
    p, s = spec.pool, spec.stride
    ol = dy.shape[1]
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for i in range(p):
        dxp[:, i : i + s * (ol - 1) + 1 : s, :] += np.where(arg == i, dy, 0)
    return dxp[:, pb : pb + x_shape[1], :]


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _activation_fwd(spec, x):
    name = spec.activation
    if name == "relu":
        return np.maximum(x, 0), x
    if name == "leaky_relu":
        return np.where(x > 0, x, x * x.dtype.type(spec.slope)), x
    if name == "softmax":
        y = softmax(x)
        return y, y
    return x, None


def _activation_bwd(spec, cache, dy):
    name = spec.activation
    if name == "relu":
        return dy * (cache > 0)
    if name == "leaky_relu":
        return np.where(cache > 0, dy, dy * dy.dtype.type(spec.slope))
    if name == "softmax":
        y = cache
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    return dy


def _prepare_batch(arch: Architecture, batch) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim == 0:
        raise ShapeError("batch must have a leading batch dimension")
    if x.shape[1:] != arch.input_shape:
        # Channel axis of size one may be omitted, as for raw HAR feature rows.
        if arch.input_shape[-1] == 1 and x.shape[1:] == arch.input_shape[:-1]:
            x = x[..., None]
        else:
            raise ShapeError(
                f"batch shape {x.shape[1:]} does not match architecture {arch.name!r} input {arch.input_shape}"
            )
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite values")
    return x


def forward(
    params: ModelParams, batch, training: bool = False, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, list[Any]]:
    """Run the network and return ``(logits, cache)``.

    ``rng`` is only consumed by dropout layers in training mode.
    """
    arch = params.arch
    x = _prepare_batch(arch, batch).astype(params.dtype, copy=False)
    caches: list[Any] = []
    pi = 0
    for spec in arch.forward_specs:
        if spec.kind in PARAM_KINDS:
            w, b = params.layers[pi]
            pi += 1
            if spec.kind == "dense":
                cache = x
                x = x @ w + b
            elif spec.kind == "conv2d":
                x, cache = _conv2d_fwd(spec, w, b, x)
            else:
                x, cache = _conv1d_fwd(spec, w, b, x)
        elif spec.kind == "maxpool1d":
            x, cache = _maxpool1d_fwd(spec, x)
        elif spec.kind == "dropout":
            if training and spec.rate > 0:
                if rng is None:
                    raise ValueError("training-mode dropout needs an rng")
                keep = (rng.random(x.shape) >= spec.rate).astype(x.dtype) / x.dtype.type(1.0 - spec.rate)
                x = x * keep
                cache = keep
            else:
                cache = None
        elif spec.kind == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        else:
            x, cache = _activation_fwd(spec, x)
        caches.append(cache)
    return x, caches


def backward(params: ModelParams, caches: list[Any], dlogits: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of the loss w.r.t. every parameter pair, given dL/dlogits."""
    arch = params.arch
    specs = arch.forward_specs
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    pi = len(params.layers)
    dy = dlogits.astype(params.dtype, copy=False)
    for spec, cache in zip(reversed(specs), reversed(caches)):
        if spec.kind in PARAM_KINDS:
            pi -= 1
            w, b = params.layers[pi]
            if spec.kind == "dense":
                grads[pi] = (cache.T @ dy, dy.sum(axis=0))
                dy = dy @ w.T
            elif spec.kind == "conv2d":
                dy, dw, db = _conv2d_bwd(spec, w, b, cache, dy)
                grads[pi] = (dw, db)
            else:
                dy, dw, db = _conv1d_bwd(spec, w, b, cache, dy)
                grads[pi] = (dw, db)
        elif spec.kind == "maxpool1d":
            dy = _maxpool1d_bwd(spec, cache, dy)
        elif spec.kind == "dropout":
            if cache is not None:
                dy = dy * cache
        elif spec.kind == "flatten":
            dy = dy.reshape(cache)
        else:
            dy = _activation_bwd(spec, cache, dy)
    return grads


def input_gradient(params: ModelParams, caches: list[Any], dlogits: np.ndarray) -> np.ndarray:
    """dL/dinput; used by gradient checks of non-parameterized layers."""
    specs = params.arch.forward_specs
    pi = len(params.layers)
    dy = dlogits.astype(params.dtype, copy=False)
    for spec, cache in zip(reversed(specs), reversed(caches)):
        if spec.kind in PARAM_KINDS:
            pi -= 1
            w, b = params.layers[pi]
            if spec.kind == "dense":
                dy = dy @ w.T
            elif spec.kind == "conv2d":
                dy = _conv2d_bwd(spec, w, b, cache, dy)[0]
            else:
                dy = _conv1d_bwd(spec, w, b, cache, dy)[0]
        elif spec.kind == "maxpool1d":
            dy = _maxpool1d_bwd(spec, cache, dy)
        elif spec.kind == "dropout":
            if cache is not None:
                dy = dy * cache
        elif spec.kind == "flatten":
            dy = dy.reshape(cache)
        else:
            dy = _activation_bwd(spec, cache, dy)
    return dy


def predict_logits(params: ModelParams, features, batch_size: int = 1000) -> np.ndarray:
    """Eval-mode logits for a whole array, computed in chunks."""
    outs = [forward(params, features[i : i + batch_size])[0] for i in range(0, len(features), batch_size)]
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------- losses


def _check_labels(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got shape {logits.shape}")
    n, q = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= q:
        raise ValueError(f"labels must lie in [0, {q})")
    return labels


def ce_loss_and_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = _check_labels(logits, labels)
    n = logits.shape[0]
    logp = log_softmax(logits.astype(np.float64))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def kd_loss_and_grad(
    student_logits: np.ndarray, teacher_logits: np.ndarray, labels, temperature: float, kd_weight: float
) -> tuple[float, np.ndarray]:
    """``(1 - w) * CE + w * T^2 * KL(softmax(teacher/T) || softmax(student/T))``.

    The teacher logits are constants; the gradient is w.r.t. the student only.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not 0.0 <= kd_weight <= 1.0:
        raise ValueError(f"kd weight must lie in [0, 1], got {kd_weight}")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"student {student_logits.shape} and teacher {teacher_logits.shape} logits differ in shape")
    ce, dce = ce_loss_and_grad(student_logits, labels)
    if kd_weight == 0:
        return ce, dce
    n = student_logits.shape[0]
    kl, dkl = kl_term_and_grad(student_logits, teacher_logits, temperature)
    loss = (1.0 - kd_weight) * ce + kd_weight * temperature**2 * kl
    grad = (1.0 - kd_weight) * dce.astype(np.float64) + kd_weight * temperature**2 * dkl
    return float(loss), grad.astype(student_logits.dtype)


def kl_term_and_grad(student_logits, teacher_logits, temperature) -> tuple[float, np.ndarray]:
    """Batch-mean KL(p_teacher || p_student) on temperature-softened logits."""
    n = student_logits.shape[0]
    t = float(temperature)
    log_ps = log_softmax(student_logits.astype(np.float64) / t)
    log_pt = log_softmax(teacher_logits.astype(np.float64) / t)
    pt = np.exp(log_pt)
    kl = float((pt * (log_pt - log_ps)).sum(axis=1).mean())
    grad = (np.exp(log_ps) - pt) / (t * n)
    return max(kl, 0.0), grad


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    local_epochs: int = 1
    learning_rate: float = 0.01
    kd_temperature: float = 3.0
    kd_weight: float = 0.5
    rng_seed: int = 0
    momentum: float = 0.0
    allow_small_clients: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be positive")
        if not 0.0 <= self.kd_weight <= 1.0:
            raise ValueError("kd_weight must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def steps_for(self, d: int) -> int:
        return (self.local_epochs * d) // self.batch_size


def batch_schedule(d: int, cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches for tau = floor(E*d/B) SGD steps over reshuffled epochs."""
    if d < 1:
        raise ValueError("cannot train on an empty dataset")
    tau = cfg.steps_for(d)
    B = cfg.batch_size
    if tau == 0:
        if not cfg.allow_small_clients:
            raise ValueError(
                f"dataset smaller than one batch ({d} < {B}); set allow_small_clients to pad by resampling"
            )
        # one padded batch per epoch: the client's rows plus draws with replacement
        out = []
        for _ in range(cfg.local_epochs):
            extra = rng.integers(0, d, size=B - d)
            out.append(np.concatenate([rng.permutation(d), extra]))
        return out
    epochs_needed = -(-tau * B // d)
    stream = np.concatenate([rng.permutation(d) for _ in range(epochs_needed)])
    return [stream[i * B : (i + 1) * B] for i in range(tau)]


def sgd_train(
    params: ModelParams,
    data,
    cfg: TrainConfig,
    teacher: ModelParams | None = None,
) -> tuple[ModelParams, float]:
    """Mini-batch SGD on ``data.features`` / ``data.labels``.

    With a teacher the distillation loss is used, otherwise cross-entropy.
    Returns the updated copy and the mean loss over the final epoch's steps.
    """
    if teacher is not None and teacher.arch.num_classes != params.arch.num_classes:
        raise ValueError(
            f"teacher has {teacher.arch.num_classes} classes, student has {params.arch.num_classes}"
        )
    rng = np.random.default_rng(cfg.rng_seed)
    features = data.features
    labels = np.asarray(data.labels)
    d = len(labels)
    batches = batch_schedule(d, cfg, rng)
    steps_per_epoch = max(len(batches) // cfg.local_epochs, 1)
    last_epoch_start = len(batches) - steps_per_epoch

    out = params.copy()
    lr = out.dtype.type(cfg.learning_rate)
    mom = out.dtype.type(cfg.momentum)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in out.layers] if cfg.momentum else None
    use_kd = teacher is not None and cfg.kd_weight > 0
    losses = []
    for step, idx in enumerate(batches):
        xb = features[idx]
        yb = labels[idx]
        logits, cache = forward(out, xb, training=True, rng=rng)
        if use_kd:
            t_logits = forward(teacher, xb)[0]
            loss, dlogits = kd_loss_and_grad(logits, t_logits, yb, cfg.kd_temperature, cfg.kd_weight)
        else:
            loss, dlogits = ce_loss_and_grad(logits, yb)
        if not np.isfinite(loss):
            raise FloatingPointError(f"training diverged at step {step} (loss {loss}); lower the learning rate")
        if step >= last_epoch_start:
            losses.append(loss)
        if cfg.learning_rate == 0:
            continue
        grads = backward(out, cache, dlogits)
        new_layers = []
        for li, ((w, b), (gw, gb)) in enumerate(zip(out.layers, grads)):
            if velocity is not None:
                vw, vb = velocity[li]
                vw = mom * vw + gw
                vb = mom * vb + gb
                velocity[li] = (vw, vb)
                gw, gb = vw, vb
            new_layers.append((w - lr * gw, b - lr * gb))
        out.layers = new_layers
    return out, float(np.mean(losses)) if losses else float("nan")


# ---------------------------------------------------------------- reference architectures


def mnist_teacher(conv_activation: str = "linear") -> Architecture:
    return _mnist_arch("mnist_teacher", (32, 64, 64, 64), conv_activation)


def mnist_student(conv_activation: str = "linear") -> Architecture:
    return _mnist_arch("mnist_student", (32, 16, 16, 64), conv_activation)


def _mnist_arch(name, filters, conv_activation):
    specs: list[LayerSpec] = []
    for f in filters:
        specs.append(conv2d(f, 3, 2))
        if conv_activation != "linear":
            specs.append(activation(conv_activation))
    specs += [flatten(), dense(10), activation("softmax")]
    suffix = "" if conv_activation == "linear" else f"_{conv_activation}"
    return Architecture(name + suffix, tuple(specs), (28, 28, 1))


def har_teacher() -> Architecture:
    return _har_arch("har_teacher", 128)


def har_student() -> Architecture:
    return _har_arch("har_student", 64)


def _har_arch(name, first_filters):
    specs = (
        conv1d(first_filters, 3, 2),
        activation("leaky_relu", 0.2),
        maxpool1d(2, 1),
        dropout(0.25),
        conv1d(256, 3, 2),
        flatten(),
        dense(128),
        activation("relu"),
        dense(6),
        activation("softmax"),
    )
    return Architecture(name, specs, (561, 1))


def reference_architectures(dataset: str, conv_activation: str = "linear") -> tuple[Architecture, Architecture]:
    """``(teacher, student)`` architectures for ``'mnist'`` or ``'har'``."""
    if dataset == "mnist":
        return mnist_teacher(conv_activation), mnist_student(conv_activation)
    if dataset == "har":
        return har_teacher(), har_student()
    raise ValueError(f"unknown dataset {dataset!r}")
