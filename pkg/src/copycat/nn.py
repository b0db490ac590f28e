"""Small deterministic CNN engine in float64 numpy.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 laid out NCHW.
A :class:`Model` is an ordered stack of layer descriptors plus a flat dict of
named parameters; the final ``Dense`` layer is the "head" and everything
before it is the "backbone".
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

CHECKPOINT_MAGIC = b"CPYC"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


Layer = Union[Conv2D, MaxPool, ReLU, Flatten, Dense]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv2D, MaxPool, ReLU, Flatten, Dense)}


def layer_to_dict(layer: Layer) -> dict:
    return {"type": type(layer).__name__, **asdict(layer)}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("type")
    try:
        return _LAYER_TYPES[kind](**d)
    except KeyError:
        raise ValueError(f"unknown layer type {kind!r}") from None


def default_architecture(n_classes: int) -> list[Layer]:
    """Conv16-pool-Conv32-pool-Dense64-Dense(n_classes), 3x3 'same' convolutions."""
    return [
        Conv2D(16, kernel=3, stride=1, pad=1),
        ReLU(),
        MaxPool(2, 2),
        Conv2D(32, kernel=3, stride=1, pad=1),
        ReLU(),
        MaxPool(2, 2),
        Flatten(),
        Dense(64),
        ReLU(),
        Dense(n_classes),
    ]


def _output_shape(layer: Layer, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    name = f"layer {index} ({type(layer).__name__})"
    if isinstance(layer, (Conv2D, MaxPool)):
        if len(shape) != 3:
            raise ShapeError(f"{name} expects a (C, H, W) input, got {shape}")
        c, h, w = shape
        if isinstance(layer, Conv2D):
            k, s, p = layer.kernel, layer.stride, layer.pad
            ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            c = layer.out_channels
        else:
            k, s = layer.kernel, layer.stride
            ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{name} reduces spatial input {h}x{w} to nothing")
        return (c, ho, wo)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ShapeError(f"{name} expects a flat input, got {shape}; add Flatten first")
        return (layer.out_features,)
    return shape


# ---------------------------------------------------------------------------
# initialisation


def glorot_init(fan_in: int, fan_out: int, shape, seed: int) -> np.ndarray:
    """Uniform Glorot samples in [-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fans must be positive, got fan_in={fan_in}, fan_out={fan_out}")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(int(seed))
    return rng.uniform(-limit, limit, size=tuple(shape)).astype(DTYPE)


def _fans(layer: Layer, in_shape: tuple[int, ...]) -> tuple[int, int]:
    if isinstance(layer, Conv2D):
        receptive = layer.kernel * layer.kernel
        return in_shape[0] * receptive, layer.out_channels * receptive
    return in_shape[0], layer.out_features


def _param_shapes(layer: Layer, in_shape: tuple[int, ...]) -> tuple[tuple, tuple]:
    if isinstance(layer, Conv2D):
        return (layer.out_channels, in_shape[0], layer.kernel, layer.kernel), (layer.out_channels,)
    return (layer.out_features, in_shape[0]), (layer.out_features,)


def _layer_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n, dtype=np.uint64)]


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    input_shape: tuple[int, int, int]
    layers: list[Layer]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.layers = list(self.layers)
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ValueError("the final layer must be Dense")
        self.shapes = self._propagate_shapes()

    def _propagate_shapes(self) -> list[tuple[int, ...]]:
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(_output_shape(layer, shapes[-1], i))
        return shapes

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_features

    @property
    def head_index(self) -> int:
        return len(self.layers) - 1

    def param_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Conv2D, Dense))]

    def param_names(self, group: str = "all") -> list[str]:
        if group not in ("all", "head", "backbone"):
            raise ValueError(f"unknown parameter group {group!r}")
        names = []
        for i in self.param_layers():
            in_head = i == self.head_index
            if group == "all" or (group == "head") == in_head:
                names += [f"{i}.weight", f"{i}.bias"]
        return names

    @property
    def groups(self) -> dict[str, list[int]]:
        return {"backbone": list(range(self.head_index)), "head": [self.head_index]}

    def copy(self) -> "Model":
        return Model(self.input_shape, list(self.layers),
                     {k: v.copy() for k, v in self.params.items()})

    def architecture(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer_to_dict(l) for l in self.layers],
            "groups": self.groups,
        }

    def check_params(self) -> None:
        for i in self.param_layers():
            w_shape, b_shape = _param_shapes(self.layers[i], self.shapes[i])
            for name, want in ((f"{i}.weight", w_shape), (f"{i}.bias", b_shape)):
                got = self.params.get(name)
                if got is None or got.shape != want:
                    raise ShapeError(f"parameter {name} should have shape {want}, "
                                     f"got {None if got is None else got.shape}")


def build_model(layers, input_shape, seed: int = 0) -> Model:
    """Glorot-initialised weights and zero biases for every Conv2D/Dense layer."""
    model = Model(tuple(input_shape), list(layers))
    seeds = _layer_seeds(seed, len(model.layers))
    for i in model.param_layers():
        layer, in_shape = model.layers[i], model.shapes[i]
        w_shape, b_shape = _param_shapes(layer, in_shape)
        fan_in, fan_out = _fans(layer, in_shape)
        model.params[f"{i}.weight"] = glorot_init(fan_in, fan_out, w_shape, seeds[i])
        model.params[f"{i}.bias"] = np.zeros(b_shape, dtype=DTYPE)
    return model


def replace_head(model: Model, n_classes: int, seed: int) -> Model:
    """Copy of ``model`` with the final Dense rebuilt for ``n_classes`` outputs."""
    layers = list(model.layers[:-1]) + [Dense(n_classes)]
    new = Model(model.input_shape, layers)
    head = new.head_index
    for name, value in model.params.items():
        if not name.startswith(f"{head}."):
            new.params[name] = value.copy()
    in_shape = new.shapes[head]
    w_shape, b_shape = _param_shapes(layers[head], in_shape)
    fan_in, fan_out = _fans(layers[head], in_shape)
    new.params[f"{head}.weight"] = glorot_init(fan_in, fan_out, w_shape, seed)
    new.params[f"{head}.bias"] = np.zeros(b_shape, dtype=DTYPE)
    return new


# ---------------------------------------------------------------------------
# forward / backward


def _windows(x: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]


def _scatter_windows(dx: np.ndarray, dwin: np.ndarray, k: int, s: int, ho: int, wo: int):
    # dwin: (N, C, Ho, Wo, k, k) accumulated into dx (N, C, H, W)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dwin[..., i, j]


def _conv_forward(layer: Conv2D, w, b, x):
    n, c, _, _ = x.shape
    k, s, p = layer.kernel, layer.stride, layer.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho = (xp.shape[2] - k) // s + 1
    wo = (xp.shape[3] - k) // s + 1
    cols = _windows(xp, k, s, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, xp.shape, ho, wo)


def _conv_backward(layer: Conv2D, w, cache, dout, need_dx: bool):
    cols, xp_shape, ho, wo = cache
    k, s, p = layer.kernel, layer.stride, layer.pad
    o = w.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    n, c = xp_shape[0], xp_shape[1]
    dcols = (d2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(xp_shape, dtype=DTYPE)
    _scatter_windows(dxp, dcols, k, s, ho, wo)
    dx = dxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else dxp
    return dx, dw, db


def _pool_forward(layer: MaxPool, x):
    n, c, h, w = x.shape
    k, s = layer.kernel, layer.stride
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    win = _windows(x, k, s, ho, wo).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, ho, wo)


def _pool_backward(layer: MaxPool, cache, dout):
    idx, x_shape, ho, wo = cache
    k, s = layer.kernel, layer.stride
    dx = np.zeros(x_shape, dtype=DTYPE)
    for q in range(k * k):
        i, j = divmod(q, k)
        dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += np.where(idx == q, dout, 0.0)
    return dx


def _check_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4 or batch.shape[1:] != model.input_shape:
        raise ShapeError(
            f"layer 0 ({type(model.layers[0]).__name__}) expects input (N, "
            f"{', '.join(map(str, model.input_shape))}), got {batch.shape}")
    return batch


def _forward(model: Model, x: np.ndarray, keep: bool = False):
    caches = []
    for i, layer in enumerate(model.layers):
        cache = None
        if isinstance(layer, Conv2D):
            x, cache = _conv_forward(layer, model.params[f"{i}.weight"], model.params[f"{i}.bias"], x)
        elif isinstance(layer, MaxPool):
            x, cache = _pool_forward(layer, x)
        elif isinstance(layer, ReLU):
            cache = x > 0
            x = np.maximum(x, 0.0)  # propagates NaN, unlike where(x > 0)
        elif isinstance(layer, Flatten):
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            w = model.params[f"{i}.weight"]
            if x.ndim != 2 or x.shape[1] != w.shape[1]:
                raise ShapeError(f"layer {i} (Dense) expects {w.shape[1]} input features, got {x.shape[1:]}")
            cache = x
            x = x @ w.T + model.params[f"{i}.bias"]
        if keep:
            caches.append(cache)
    return x, caches


def _backward(model: Model, caches, dout, stop_at: int = 0) -> dict[str, np.ndarray]:
    """Gradients for every parameter in layers >= ``stop_at``."""
    grads = {}
    for i in range(len(model.layers) - 1, stop_at - 1, -1):
        layer, cache = model.layers[i], caches[i]
        need_dx = i > stop_at
        if isinstance(layer, Conv2D):
            dout, grads[f"{i}.weight"], grads[f"{i}.bias"] = _conv_backward(
                layer, model.params[f"{i}.weight"], cache, dout, need_dx)
        elif isinstance(layer, Dense):
            w = model.params[f"{i}.weight"]
            grads[f"{i}.weight"] = dout.T @ cache
            grads[f"{i}.bias"] = dout.sum(axis=0)
            dout = dout @ w if need_dx else None
        elif not need_dx:
            break
        elif isinstance(layer, MaxPool):
            dout = _pool_backward(layer, cache, dout)
        elif isinstance(layer, ReLU):
            dout = np.where(cache, dout, 0.0)
        elif isinstance(layer, Flatten):
            dout = dout.reshape(cache)
    return grads


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Raw logits of shape (N, n_classes)."""
    logits, _ = _forward(model, _check_batch(model, batch))
    return logits


def predict(model: Model, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
    batch = _check_batch(model, batch)
    out = np.empty(len(batch), dtype=np.int64)
    for start in range(0, len(batch), chunk):
        out[start:start + chunk] = forward(model, batch[start:start + chunk]).argmax(axis=1)
    return out


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def loss_and_grads(model: Model, images, labels, group: str = "all"):
    images = _check_batch(model, images)
    labels = np.asarray(labels, dtype=np.int64)
    logits, caches = _forward(model, images, keep=True)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    stop_at = model.head_index if group == "head" else 0
    return loss, logits, _backward(model, caches, dlogits, stop_at)


# ---------------------------------------------------------------------------
# training


@dataclass
class SgdConfig:
    base_lr: float = 0.01
    gamma: float = 0.1
    step_size: int | None = None  # None -> ceil(max_epochs / 3)
    momentum: float = 0.9
    max_epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if (self.step_size is not None and self.step_size < 1) or self.batch_size < 1:
            raise ValueError("step_size and batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    @property
    def effective_step_size(self) -> int:
        return self.step_size if self.step_size is not None else math.ceil(self.max_epochs / 3)


def lr_at(config: SgdConfig, epoch: int) -> float:
    if not 0 <= epoch < config.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.max_epochs})")
    return config.base_lr * config.gamma ** (epoch // config.effective_step_size)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def train(model: Model, dataset, config: SgdConfig, trainable: str = "all") -> TrainLog:
    """Minibatch SGD with momentum and a step-down schedule, in place.

    ``dataset`` needs ``images``, ``labels`` and ``n_classes``. Only the
    parameters of the ``trainable`` group ("all" or "head") are updated.
    """
    if dataset.n_classes != model.n_classes:
        raise ValueError(f"dataset has {dataset.n_classes} classes, model has {model.n_classes}")
    images = _check_batch(model, dataset.images)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError("labels outside [0, n_classes)")
    names = model.param_names(trainable)
    velocity = {k: np.zeros_like(model.params[k]) for k in names}
    rng = np.random.default_rng(int(config.seed))
    log = TrainLog()
    n = len(labels)
    for epoch in range(config.max_epochs):
        lr = lr_at(config, epoch)
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, logits, grads = loss_and_grads(model, images[idx], labels[idx], trainable)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b, loss)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
            for k in names:
                v = velocity[k]
                v *= config.momentum
                v -= lr * grads[k]
                model.params[k] += v
        log.losses.append(total_loss / n)
        log.accuracies.append(correct / n)
    return log


def grad_check(model: Model, images, labels, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences."""
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    images = _check_batch(model, images)
    labels = np.asarray(labels, dtype=np.int64)
    _, _, analytic = loss_and_grads(model, images, labels)

    def loss_at() -> float:
        logits, _ = _forward(model, images)
        return softmax_cross_entropy(logits, labels)[0]

    worst = 0.0
    for name in model.param_names():
        p = model.params[name]
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_at()
            flat[j] = orig - eps
            down = loss_at()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            a = a_flat[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
#
# "CPYC" | u32 version | u32 len + UTF-8 JSON architecture |
# repeated: u32 name len, name, u32 rank, u32 dims..., f64 values (all little-endian)


def save_model(model: Model, path) -> None:
    model.check_params()
    arch = json.dumps(model.architecture(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arch)), arch]
    for name in model.param_names():
        value = np.ascontiguousarray(model.params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    version, arch_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    arch = json.loads(raw[pos:pos + arch_len].decode("utf-8"))
    pos += arch_len
    model = Model(tuple(arch["input_shape"]), [layer_from_dict(d) for d in arch["layers"]])
    while pos < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", raw, pos)
        dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
        pos += 4 + 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if pos + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated tensor {name!r} at byte {pos}")
        model.params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).astype(DTYPE)
        pos += 8 * count
    model.check_params()
    return model

