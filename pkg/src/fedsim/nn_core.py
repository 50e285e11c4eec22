"""Dense feed-forward network with exact backprop, softmax cross-entropy and SGD/Adam.

Everything here is a pure function over immutable values: models, parameter
sets and optimizer states are never modified in place, every update returns a
fresh object.  All arithmetic is float64.

Weight matrices are stored ``(out_dim, in_dim)`` so a layer computes
``act(x @ W.T + b)`` for a row-major batch ``x``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import AggregationError, ConfigurationError, DataError, FedSimError, FormatError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")

MAGIC = b"FSNN"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError(f"layer dims must be >= 1, got {self.input_dim}->{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")


def mlp_specs(input_dim: int, hidden: Sequence[int], output_dim: int,
              activation: str = "relu") -> list[LayerSpec]:
    """Hidden layers use ``activation``; the output layer emits raw logits."""
    dims = [input_dim, *hidden, output_dim]
    specs = [LayerSpec(dims[i], dims[i + 1], activation) for i in range(len(dims) - 2)]
    specs.append(LayerSpec(dims[-2], dims[-1], "identity"))
    return specs


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str

    @property
    def spec(self) -> LayerSpec:
        out_dim, in_dim = self.weights.shape
        return LayerSpec(in_dim, out_dim, self.activation)


@dataclass(frozen=True)
class ModelParams:
    """Flat ordered parameter list ``(W_0, b_0, W_1, b_1, ...)``."""

    arrays: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.arrays)

    def __iter__(self):
        return iter(self.arrays)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.arrays[i]

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(a.shape for a in self.arrays)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays)

    @property
    def nbytes(self) -> int:
        return 8 * self.size

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays)

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls(tuple(np.zeros_like(a) for a in other.arrays))


@dataclass(frozen=True)
class GradientSet:
    """Gradient of the *mean* loss over ``sample_count`` examples."""

    arrays: tuple[np.ndarray, ...]
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ShapeError("GradientSet.sample_count must be >= 1")

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(a.shape for a in self.arrays)

    @property
    def nbytes(self) -> int:
        return 8 * sum(a.size for a in self.arrays) + 8

    def to_bytes(self) -> bytes:
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays)
        return struct.pack("<Q", self.sample_count) + body


@dataclass(frozen=True)
class MlpModel:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        for k in range(len(self.layers) - 1):
            if self.layers[k].weights.shape[0] != self.layers[k + 1].weights.shape[1]:
                raise ConfigurationError(f"layer {k} output does not feed layer {k + 1}")

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    @property
    def num_params(self) -> int:
        return sum(l.weights.size + l.biases.size for l in self.layers)

    def params(self) -> ModelParams:
        arrays = []
        for layer in self.layers:
            arrays.extend((layer.weights, layer.biases))
        return ModelParams(tuple(arrays))

    def with_params(self, params: ModelParams | Iterable[np.ndarray]) -> "MlpModel":
        arrays = tuple(params.arrays if isinstance(params, ModelParams) else params)
        if len(arrays) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} arrays, got {len(arrays)}")
        layers = []
        for k, layer in enumerate(self.layers):
            w, b = arrays[2 * k], arrays[2 * k + 1]
            if w.shape != layer.weights.shape or b.shape != layer.biases.shape:
                raise ShapeError(f"layer {k}: shape {w.shape}/{b.shape} does not match "
                                 f"{layer.weights.shape}/{layer.biases.shape}")
            layers.append(Layer(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64),
                                layer.activation))
        return MlpModel(tuple(layers))


@dataclass(frozen=True)
class ForwardCache:
    inputs: np.ndarray
    pre: tuple[np.ndarray, ...]  # per-layer pre-activations
    post: tuple[np.ndarray, ...]  # per-layer outputs; post[-1] are the logits
    model_shapes: tuple[tuple[int, ...], ...] = field(default=())

    @property
    def logits(self) -> np.ndarray:
        return self.post[-1]


@dataclass(frozen=True)
class AdamState:
    first_moment: ModelParams
    second_moment: ModelParams
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 0.001

    @classmethod
    def for_model(cls, model: MlpModel, learning_rate: float = 0.001, **kw) -> "AdamState":
        zeros = ModelParams.zeros_like(model.params())
        return cls(zeros, ModelParams.zeros_like(zeros), learning_rate=learning_rate, **kw)

    @property
    def nbytes(self) -> int:
        return self.first_moment.nbytes + self.second_moment.nbytes + 8 + 4 * 8

    def to_bytes(self) -> bytes:
        head = struct.pack("<Q4d", self.step_count, self.beta1, self.beta2, self.epsilon, self.learning_rate)
        return head + self.first_moment.to_bytes() + self.second_moment.to_bytes()


def init_model(specs: Sequence[LayerSpec], seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    if not specs:
        raise ConfigurationError("at least one layer is required")
    for k in range(len(specs) - 1):
        if specs[k].output_dim != specs[k + 1].input_dim:
            raise ConfigurationError(
                f"layer {k} output_dim {specs[k].output_dim} != layer {k + 1} input_dim {specs[k + 1].input_dim}")
    rng = np.random.default_rng(seed)
    layers = []
    for s in specs:
        bound = np.sqrt(6.0 / (s.input_dim + s.output_dim))
        w = rng.uniform(-bound, bound, size=(s.output_dim, s.input_dim))
        layers.append(Layer(w, np.zeros(s.output_dim), s.activation))
    return MlpModel(tuple(layers))


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(pre: np.ndarray, post: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (pre > 0.0).astype(np.float64)
    if activation == "tanh":
        return 1.0 - post * post
    return np.ones_like(pre)


def forward(model: MlpModel, inputs: np.ndarray) -> ForwardCache:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"inputs of shape {x.shape} do not match model input_dim {model.input_dim}")
    pre, post = [], []
    a = x
    for layer in model.layers:
        z = a @ layer.weights.T + layer.biases
        a = _activate(z, layer.activation)
        pre.append(z)
        post.append(a)
    return ForwardCache(x, tuple(pre), tuple(post), model.params().shapes)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / n


def backward(model: MlpModel, cache: ForwardCache, d_logits: np.ndarray) -> GradientSet:
    if cache.model_shapes and cache.model_shapes != model.params().shapes:
        raise FedSimError("forward cache was produced by a different model")
    if len(cache.pre) != len(model.layers):
        raise FedSimError("forward cache was produced by a different model")
    delta = np.asarray(d_logits, dtype=np.float64)
    if delta.shape != cache.logits.shape:
        raise ShapeError(f"dLogits shape {delta.shape} != logits shape {cache.logits.shape}")
    grads: list[np.ndarray] = []
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        dz = delta * _activation_grad(cache.pre[k], cache.post[k], layer.activation)
        a_prev = cache.post[k - 1] if k > 0 else cache.inputs
        grads.append(dz.sum(axis=0))
        grads.append(dz.T @ a_prev)
        if k > 0:
            delta = dz @ layer.weights
    grads.reverse()
    return GradientSet(tuple(grads), cache.inputs.shape[0])


def loss_and_gradients(model: MlpModel, features: np.ndarray, labels: np.ndarray) -> tuple[float, GradientSet]:
    """forward + loss + backward on one batch."""
    cache = forward(model, features)
    loss, d_logits = softmax_cross_entropy(cache.logits, labels)
    return loss, backward(model, cache, d_logits)


def _check_congruent(shapes_a, shapes_b, what: str):
    if tuple(shapes_a) != tuple(shapes_b):
        raise ShapeError(f"{what}: shapes {shapes_a} and {shapes_b} are not congruent")


def sgd_step(model: MlpModel, grads: GradientSet, lr: float) -> MlpModel:
    params = model.params()
    _check_congruent(params.shapes, grads.shapes, "sgd_step")
    return model.with_params(p - lr * g for p, g in zip(params, grads))


def adam_step(model: MlpModel, grads: GradientSet, state: AdamState) -> tuple[MlpModel, AdamState]:
    params = model.params()
    _check_congruent(params.shapes, grads.shapes, "adam_step")
    _check_congruent(params.shapes, state.first_moment.shapes, "adam_step state")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_p.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(ModelParams(tuple(new_m)), ModelParams(tuple(new_v)), t,
                          b1, b2, state.epsilon, state.learning_rate)
    return model.with_params(new_p), new_state


def average_params(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Weighted elementwise mean, accumulated in list order."""
    if not models:
        raise AggregationError("cannot average an empty list of models")
    if len(weights) != len(models):
        raise AggregationError(f"{len(models)} models but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise AggregationError("aggregation weights must be non-negative")
    total = float(sum(weights))
    if total <= 0.0:
        raise AggregationError("aggregation weights sum to zero")
    shapes = models[0].shapes
    for m in models[1:]:
        _check_congruent(shapes, m.shapes, "average_params")
    acc = [np.zeros(s) for s in shapes]
    for m, w in zip(models, weights):
        for a, p in zip(acc, m):
            a += float(w) * p
    return ModelParams(tuple(a / total for a in acc))


def average_gradients(reports: Sequence[GradientSet]) -> GradientSet:
    """Sample-count-weighted mean; equals the gradient of the mean loss over the union of batches."""
    if not reports:
        raise AggregationError("cannot average an empty list of gradients")
    shapes = reports[0].shapes
    for r in reports[1:]:
        _check_congruent(shapes, r.shapes, "average_gradients")
    if len(reports) == 1:
        return reports[0]
    total = sum(r.sample_count for r in reports)
    acc = [np.zeros(s) for s in shapes]
    for r in reports:
        for a, g in zip(acc, r):
            a += g * r.sample_count
    return GradientSet(tuple(a / total for a in acc), total)


def predict(model: MlpModel, inputs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(forward(model, inputs).logits, axis=1)


_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


def serialize_model(model: MlpModel) -> bytes:
    """Binary layout: ``FSNN``, u32 version, u32 layer count, then per layer
    u32 out, u32 in, u8 activation, f64 LE weights (row-major), f64 LE biases."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(model.layers))]
    for layer in model.layers:
        out_dim, in_dim = layer.weights.shape
        parts.append(struct.pack("<IIB", out_dim, in_dim, _ACT_CODES[layer.activation]))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_model(buf: bytes) -> MlpModel:
    if len(buf) < 12:
        raise FormatError("truncated model header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    pos = 12
    layers = []
    for _ in range(count):
        if pos + 9 > len(buf):
            raise FormatError("truncated layer header", pos)
        out_dim, in_dim, code = struct.unpack_from("<IIB", buf, pos)
        if code >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {code}", pos + 8)
        pos += 9
        n_w, n_b = out_dim * in_dim, out_dim
        end = pos + 8 * (n_w + n_b)
        if end > len(buf):
            raise FormatError("truncated layer payload", pos)
        w = np.frombuffer(buf, dtype="<f8", count=n_w, offset=pos).reshape(out_dim, in_dim).astype(np.float64)
        b = np.frombuffer(buf, dtype="<f8", count=n_b, offset=pos + 8 * n_w).astype(np.float64)
        layers.append(Layer(w, b, ACTIVATIONS[code]))
        pos = end
    if pos != len(buf):
        raise FormatError("trailing bytes after last layer", pos)
    return MlpModel(tuple(layers))
