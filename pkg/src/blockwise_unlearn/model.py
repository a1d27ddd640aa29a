"""Small fully connected classifier with explicit forward/backward passes.

Parameters live in a flat float64 vector plus a layer map, so the subspace
and engine modules can treat the model as a point in R^d.  All arithmetic is
float64 and deterministic given the inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, NumericalError

_CKPT_MAGIC = b"BWUNCKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input, hidden..., classes); ReLU activations,
    softmax cross-entropy loss."""

    widths: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise DomainError("need at least one hidden layer")
        if any(w < 1 for w in self.widths):
            raise DomainError(f"widths must be >= 1, got {self.widths}")

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @property
    def input_dim(self) -> int:
        return self.widths[0]


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.ndim != 1 or inputs.shape[0] != labels.shape[0]:
            raise DomainError("batch needs (n, dim) inputs and (n,) labels")
        if inputs.shape[0] < 1:
            raise DomainError("batch must contain at least one sample")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def layer_map(spec: MlpSpec):
    entries, offset = [], 0
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths, spec.widths[1:])):
        entries.append((f"fc{i + 1}.w", (fan_out, fan_in), offset))
        offset += fan_out * fan_in
        entries.append((f"fc{i + 1}.b", (fan_out,), offset))
        offset += fan_out
    return tuple(entries)


def param_dim(spec: MlpSpec) -> int:
    return sum(
        fan_out * fan_in + fan_out
        for fan_in, fan_out in zip(spec.widths, spec.widths[1:])
    )


@dataclass
class ParamVector:
    """Flat parameters with the layer map describing their structure."""

    values: np.ndarray
    layer_map: tuple

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        last_name, last_shape, last_offset = self.layer_map[-1]
        d = last_offset + int(np.prod(last_shape))
        if self.values.shape != (d,):
            raise DomainError(
                f"parameter vector length {self.values.shape} does not match layer map ({d})"
            )

    @property
    def d(self) -> int:
        return self.values.shape[0]

    def view(self, name: str) -> np.ndarray:
        for entry_name, shape, offset in self.layer_map:
            if entry_name == name:
                size = int(np.prod(shape))
                return self.values[offset : offset + size].reshape(shape)
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layer_map)


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """He-style init for the weights, zero biases; deterministic in seed."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(spec.widths, spec.widths[1:]):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        chunks.append(w.ravel())
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), layer_map(spec))


def zeros_like(params: ParamVector) -> ParamVector:
    return ParamVector(np.zeros_like(params.values), params.layer_map)


def _weights(params: ParamVector):
    n_layers = len(params.layer_map) // 2
    return [
        (params.view(f"fc{i + 1}.w"), params.view(f"fc{i + 1}.b"))
        for i in range(n_layers)
    ]


def _check_finite(params: ParamVector) -> None:
    if not np.all(np.isfinite(params.values)):
        raise NumericalError("non-finite parameter values")


def _forward_cached(params: ParamVector, batch: Batch):
    layers = _weights(params)
    num_classes = layers[-1][0].shape[0]
    if np.any(batch.labels < 0) or np.any(batch.labels >= num_classes):
        raise DomainError("label out of range for the output layer")
    activations = [batch.inputs]
    h = batch.inputs
    for w, b in layers[:-1]:
        h = np.maximum(h @ w.T + b, 0.0)
        activations.append(h)
    w, b = layers[-1]
    logits = h @ w.T + b
    return layers, activations, logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(params: ParamVector, batch: Batch):
    """Logits and mean softmax cross-entropy loss."""
    _check_finite(params)
    _, _, logits = _forward_cached(params, batch)
    log_probs = _log_softmax(logits)
    n = len(batch)
    loss = -float(log_probs[np.arange(n), batch.labels].mean())
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    return logits, loss


def backward(params: ParamVector, batch: Batch) -> ParamVector:
    """Gradient of the mean loss with respect to every parameter."""
    return loss_and_grad(params, batch)[1]


def loss_and_grad(params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    """Mean loss and its gradient from a single forward/backward pass."""
    _check_finite(params)
    layers, activations, logits = _forward_cached(params, batch)
    n = len(batch)
    log_probs = _log_softmax(logits)
    loss = -float(log_probs[np.arange(n), batch.labels].mean())
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    probs = np.exp(log_probs)
    delta = probs
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grad = np.empty_like(params.values)
    gview = ParamVector(grad, params.layer_map)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        np.matmul(delta.T, activations[i], out=gview.view(f"fc{i + 1}.w"))
        gview.view(f"fc{i + 1}.b")[:] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ w) * (activations[i] > 0.0)
    return loss, gview


def clip(v: np.ndarray, c: float) -> np.ndarray:
    """Radial projection onto the ball of radius c; the zero vector stays 0.

    The computed norm of the result is <= c, so clipping twice returns the
    same array bit for bit.
    """
    if not c > 0:
        raise DomainError(f"clipping radius must be > 0, got {c}")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= c:
        return v.copy()
    out = v * (c / norm)
    # rounding can leave the scaled norm a few ulps above c
    for _ in range(4):
        norm = float(np.linalg.norm(out))
        if norm <= c:
            return out
        out = out * (c / norm)
    return out * (1.0 - 1e-15)


def predict(params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Argmax class ids; ties resolve to the lowest class index."""
    batch = Batch(inputs, np.zeros(len(inputs), dtype=np.int64))
    _, _, logits = _forward_cached(params, batch)
    return np.argmax(logits, axis=1)


def accuracy(params: ParamVector, inputs: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise DomainError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(params, inputs) == labels))


def save_params(params: ParamVector, path) -> None:
    """Versioned little-endian binary checkpoint."""
    header = json.dumps(
        {
            "d": params.d,
            "layer_map": [[n, list(s), o] for n, s, o in params.layer_map],
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        raw = fh.read(8)
        if len(raw) < 8:
            raise FormatError("truncated checkpoint header")
        version, header_len = struct.unpack("<II", raw)
        if version != _CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from exc
        d = int(header["d"])
        payload = fh.read(d * 8)
        if len(payload) != d * 8:
            raise FormatError("truncated checkpoint payload")
        values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        lm = tuple((n, tuple(s), int(o)) for n, s, o in header["layer_map"])
        return ParamVector(values, lm)
