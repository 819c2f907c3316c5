"""Small dense ReLU network trained with plain mini-batch SGD.

Parameters live in :class:`ModelParams`, an immutable ordered list of dense
layers. The byte encoding produced by :func:`serialize` is canonical: equal
models give equal bytes and therefore equal content identifiers.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .errors import EmptyDataset, InvalidSchema, MalformedModel, NonFiniteWeight, ShapeMismatch

DEFAULT_LR = 0.05
DEFAULT_BATCH_SIZE = 32


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Layer:
    rows: int
    cols: int
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.rows <= 0 or self.cols <= 0:
            raise InvalidSchema(f"layer shape ({self.rows}, {self.cols}) has a zero dimension")
        if self.weights.size != self.rows * self.cols or self.bias.size != self.rows:
            raise ShapeMismatch(
                f"layer ({self.rows}, {self.cols}) got {self.weights.size} weights, {self.bias.size} biases"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise NonFiniteWeight("layer holds non-finite values")

    @property
    def matrix(self) -> np.ndarray:
        return self.weights.reshape(self.rows, self.cols)

    @property
    def pool(self) -> np.ndarray:
        """Weights followed by biases: the array the privacy mechanisms act on."""
        return np.concatenate([self.weights, self.bias])

    def with_pool(self, pool: np.ndarray) -> "Layer":
        n = self.rows * self.cols
        return Layer(self.rows, self.cols, pool[:n], pool[n:])


def schema_id_for(shapes: Iterable[tuple[int, int]]) -> str:
    return "dense:" + ",".join(f"{r}x{c}" for r, c in shapes)


@dataclass(frozen=True, eq=False)
class ModelParams:
    layers: tuple[Layer, ...]
    schema_id: str = field(default="")

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InvalidSchema("a model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.cols != prev.rows:
                raise InvalidSchema(f"layer input {nxt.cols} does not match previous output {prev.rows}")
        expected = schema_id_for(self.shapes)
        if not self.schema_id:
            object.__setattr__(self, "schema_id", expected)
        elif self.schema_id != expected:
            raise InvalidSchema(f"schema_id {self.schema_id!r} does not describe shapes {expected!r}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [(l.rows, l.cols) for l in self.layers]

    @property
    def n_inputs(self) -> int:
        return self.layers[0].cols

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].rows

    def pools(self) -> list[np.ndarray]:
        return [l.pool for l in self.layers]

    def with_pools(self, pools: Sequence[np.ndarray]) -> "ModelParams":
        if len(pools) != len(self.layers):
            raise ShapeMismatch("pool count differs from layer count")
        return ModelParams(tuple(l.with_pool(p) for l, p in zip(self.layers, pools)), self.schema_id)

    def compatible(self, other: "ModelParams") -> bool:
        return self.schema_id == other.schema_id

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return serialize(self) == serialize(other)

    def __hash__(self):
        return hash(serialize(self))


@dataclass(frozen=True)
class TrainReport:
    node_id: str
    round: int
    duration: float
    final_loss: float
    samples_seen: int
    epoch_losses: tuple[float, ...] = ()


def init_model(schema: Sequence[tuple[int, int]], seed: int) -> ModelParams:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases start at zero."""
    shapes = [(int(r), int(c)) for r, c in schema]
    if not shapes or any(r <= 0 or c <= 0 for r, c in shapes):
        raise InvalidSchema(f"invalid layer schema {schema!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for rows, cols in shapes:
        bound = 1.0 / math.sqrt(cols)
        layers.append(Layer(rows, cols, rng.uniform(-bound, bound, rows * cols), np.zeros(rows)))
    return ModelParams(tuple(layers))


def dense_schema(n_features: int, hidden: int, n_classes: int) -> list[tuple[int, int]]:
    return [(hidden, n_features), (n_classes, hidden)]


# forward / backward


def _forward(mats, biases, x):
    acts = [x]
    a = x
    for i, (w, b) in enumerate(zip(mats, biases)):
        z = a @ w.T + b
        a = z if i == len(mats) - 1 else np.maximum(z, 0.0)
        acts.append(a)
    return acts


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    logp = shifted - np.log(expz.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(y)), y].mean()
    return float(loss), probs


def _check_data(model: ModelParams, data: Dataset):
    if data.features.shape[1] != model.n_inputs or data.n_classes > model.n_outputs:
        raise ShapeMismatch(
            f"model {model.schema_id} cannot consume {data.features.shape[1]} features / {data.n_classes} classes"
        )


def loss(model: ModelParams, data: Dataset) -> float:
    _check_data(model, data)
    mats = [l.matrix for l in model.layers]
    biases = [l.bias for l in model.layers]
    value, _ = _softmax_xent(_forward(mats, biases, data.features)[-1], data.labels)
    return value


def train_local(
    model: ModelParams,
    shard: Dataset,
    epochs: int,
    lr: float,
    capacity: float,
    seed: int,
    *,
    batch_size: int = DEFAULT_BATCH_SIZE,
    node_id: str = "",
    round: int = 0,
    wall_clock: bool = False,
) -> tuple[ModelParams, TrainReport]:
    """Mini-batch SGD with mean cross-entropy.

    The reported duration is simulated time, ``samples_seen / capacity``,
    unless ``wall_clock`` is set, in which case elapsed seconds are scaled by
    ``1 / capacity`` instead.
    """
    if len(shard) == 0:
        raise EmptyDataset("cannot train on an empty shard")
    if epochs < 0 or lr <= 0 or capacity <= 0 or batch_size <= 0:
        raise ValueError("epochs must be >= 0; lr, capacity and batch_size must be positive")
    _check_data(model, shard)

    mats = [l.matrix.copy() for l in model.layers]
    biases = [l.bias.copy() for l in model.layers]
    x, y = shard.features, shard.labels
    n = len(y)
    rng = np.random.default_rng(seed)
    seen = 0
    epoch_losses = []
    started = time.perf_counter()

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            acts = _forward(mats, biases, xb)
            _, probs = _softmax_xent(acts[-1], yb)
            grad = probs
            grad[np.arange(len(yb)), yb] -= 1.0
            grad /= len(yb)
            for i in range(len(mats) - 1, -1, -1):
                gw = grad.T @ acts[i]
                gb = grad.sum(axis=0)
                if i > 0:
                    grad = (grad @ mats[i]) * (acts[i] > 0)
                mats[i] -= lr * gw
                biases[i] -= lr * gb
            seen += len(idx)
        epoch_losses.append(_softmax_xent(_forward(mats, biases, x)[-1], y)[0])

    elapsed = time.perf_counter() - started
    trained = ModelParams(
        tuple(Layer(l.rows, l.cols, m, b) for l, m, b in zip(model.layers, mats, biases)),
        model.schema_id,
    )
    final = epoch_losses[-1] if epoch_losses else loss(model, shard)
    duration = (elapsed if wall_clock else seen) / capacity if seen else 0.0
    return trained, TrainReport(node_id, round, duration, final, seen, tuple(epoch_losses))


def predict(model: ModelParams, features: np.ndarray) -> np.ndarray:
    mats = [l.matrix for l in model.layers]
    biases = [l.bias for l in model.layers]
    return _forward(mats, biases, features)[-1].argmax(axis=1)


def evaluate(model: ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    _check_data(model, data)
    return float((predict(model, data.features) == data.labels).mean())


def average(models: Sequence[ModelParams]) -> ModelParams:
    """Element-wise arithmetic mean (FedAvg over equal-size shards)."""
    if not models:
        raise ValueError("nothing to average")
    first = models[0]
    for m in models[1:]:
        if not first.compatible(m):
            raise ShapeMismatch(f"{m.schema_id} vs {first.schema_id}")
    pools = [np.mean(np.stack([m.layers[i].pool for m in models]), axis=0) for i in range(len(first.layers))]
    return first.with_pools(pools)


# canonical encoding

_U32 = struct.Struct("<I")


def serialize(model: ModelParams) -> bytes:
    sid = model.schema_id.encode("utf-8")
    parts = [_U32.pack(len(sid)), sid]
    for l in model.layers:
        parts.append(struct.pack("<II", l.rows, l.cols))
        parts.append(l.weights.astype("<f8").tobytes())
        parts.append(l.bias.astype("<f8").tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> ModelParams:
    try:
        (n,) = _U32.unpack_from(blob, 0)
        off = 4 + n
        if off > len(blob):
            raise MalformedModel("schema id runs past end of data")
        sid = blob[4:off].decode("utf-8")
        layers = []
        while off < len(blob):
            rows, cols = struct.unpack_from("<II", blob, off)
            off += 8
            end = off + 8 * (rows * cols + rows)
            if rows == 0 or cols == 0 or end > len(blob):
                raise MalformedModel(f"layer {len(layers)} truncated or empty")
            vals = np.frombuffer(blob, dtype="<f8", count=rows * cols + rows, offset=off).astype(np.float64)
            if not np.isfinite(vals).all():
                raise MalformedModel(f"layer {len(layers)} holds non-finite values")
            layers.append(Layer(rows, cols, vals[: rows * cols], vals[rows * cols :]))
            off = end
        return ModelParams(tuple(layers), sid)
    except MalformedModel:
        raise
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise MalformedModel(str(exc)) from exc
