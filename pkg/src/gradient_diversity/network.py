"""Feedforward tanh classifiers, ensembles and the GDEN model file format."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

MAGIC = b"GDEN"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
DEFAULT_HIDDEN = (256, 128)


class ModelFormatError(ValueError):
    """Malformed or truncated model payload."""


class VersionMismatchError(ModelFormatError):
    """Payload has the wrong magic header or an unsupported format version."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Classifier ``n -> hidden... -> C`` with tanh hidden units and softmax output.

    ``weights[i]`` has shape ``(layer_dims[i], layer_dims[i+1])`` so a batch
    ``X`` of shape ``(B, n)`` maps to logits via ``X @ W + b``.
    """

    layer_dims: tuple
    weights: tuple
    biases: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError(f"layer_dims must be >= 2 positive integers, got {self.layer_dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("need one weight matrix and one bias vector per layer")
        weights = tuple(_frozen(w) for w in self.weights)
        biases = tuple(_frozen(b) for b in self.biases)
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(
                    f"layer {i}: expected W{(dims[i], dims[i + 1])} b{(dims[i + 1],)}, "
                    f"got W{w.shape} b{b.shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @classmethod
    def initialize(cls, layer_dims: Sequence[int], rng) -> "MlpModel":
        """Uniform ``+-sqrt(6 / (fan_in + fan_out))`` weights, zero biases."""
        rng = np.random.default_rng(rng)
        dims = [int(d) for d in layer_dims]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(dims), tuple(weights), tuple(biases))

    @classmethod
    def zeros(cls, layer_dims: Sequence[int]) -> "MlpModel":
        dims = [int(d) for d in layer_dims]
        return cls(
            tuple(dims),
            tuple(np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])),
            tuple(np.zeros(b) for b in dims[1:]),
        )

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "MlpModel":
        return MlpModel(self.layer_dims, tuple(params[0::2]), tuple(params[1::2]))

    def equals(self, other: "MlpModel") -> bool:
        """Bit-exact parameter equality."""
        return self.layer_dims == other.layer_dims and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.params, other.params)
        )

    def logits(self, x) -> np.ndarray:
        h = self._check(x)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
        out = h @ self.weights[-1] + self.biases[-1]
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite activation")
        return out

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_inputs or x.ndim not in (1, 2):
            raise ValueError(f"expected input of dimension {self.n_inputs}, got shape {x.shape}")
        return x


def forward_logits(x: ad.Node, params: Sequence) -> ad.Node:
    """Recorded forward pass; ``params`` are nodes or arrays ``[W0, b0, ...]``."""
    h = x
    n_layers = len(params) // 2
    for i in range(n_layers):
        z = ad.add(ad.matmul(h, params[2 * i]), params[2 * i + 1])
        h = ad.tanh(z) if i < n_layers - 1 else z
    return h


def confidences(model: MlpModel, x) -> np.ndarray:
    """Softmax class probabilities, shape ``(C,)`` or ``(B, C)``."""
    z = model.logits(x)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_class(model: MlpModel, x):
    """Index of the largest confidence; ``np.argmax`` breaks ties toward the lowest index."""
    out = np.argmax(confidences(model, x), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def _one_hot(y, batch: int, n_classes: int) -> np.ndarray:
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (batch,))
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"class index out of range [0, {n_classes})")
    out = np.zeros((batch, n_classes))
    out[np.arange(batch), y] = 1.0
    return out


def _true_class_gradient(model: MlpModel, x, y, log: bool) -> np.ndarray:
    x = model._check(x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    onehot = _one_hot(y, X.shape[0], model.n_classes)
    g = ad.Graph()
    xn = g.leaf(X)
    z = forward_logits(xn, model.params)
    if log:
        root = ad.neg(ad.sum(ad.softmax_cross_entropy(z, onehot)))
    else:
        root = ad.sum(ad.mul(ad.softmax(z, axis=1), onehot))
    (grad,) = g.gradient(root, [xn])
    return grad[0] if single else grad


def input_gradient(model: MlpModel, x, y) -> np.ndarray:
    """Gradient of the true-class confidence ``f^y`` with respect to the input.

    Rows of a batch are independent, so a batch returns one gradient per row.
    """
    return _true_class_gradient(model, x, y, log=False)


def input_gradient_direction(model: MlpModel, x, y) -> np.ndarray:
    """Gradient of ``log f^y``: the same direction as :func:`input_gradient`.

    ``grad log p = grad p / p`` with ``p > 0``, so the two differ by a positive
    scale per row. The log form does not underflow when ``p`` rounds to 1.
    """
    return _true_class_gradient(model, x, y, log=True)


@dataclass(eq=False)
class Ensemble:
    models: list
    names: list = field(default=None)

    def __post_init__(self):
        self.models = list(self.models)
        if not self.models:
            raise ValueError("an ensemble needs at least one model")
        if self.names is None:
            self.names = [f"m{i}" for i in range(len(self.models))]
        self.names = list(self.names)
        if len(self.names) != len(self.models):
            raise ValueError("one name per model required")
        n, c = self.models[0].n_inputs, self.models[0].n_classes
        for m in self.models[1:]:
            if m.n_inputs != n or m.n_classes != c:
                raise ValueError("ensemble members must share input dimension and class count")

    def __len__(self) -> int:
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    def __getitem__(self, i):
        return self.models[i]

    @property
    def n_inputs(self) -> int:
        return self.models[0].n_inputs

    @property
    def n_classes(self) -> int:
        return self.models[0].n_classes

    def predictions(self, X) -> np.ndarray:
        """Per-member predicted classes, shape ``(k, B)``."""
        return np.stack([np.atleast_1d(predict_class(m, X)) for m in self.models])

    def input_gradients(self, X, y, direction_only: bool = True) -> np.ndarray:
        """True-class input gradients of every member, shape ``(B, k, n)``."""
        fn = input_gradient_direction if direction_only else input_gradient
        X = np.atleast_2d(X)
        return np.stack([fn(m, X, y) for m in self.models], axis=1)

    def subset(self, indices: Sequence[int]) -> "Ensemble":
        return Ensemble([self.models[i] for i in indices], [self.names[i] for i in indices])


# ---------------------------------------------------------------- serialization


def serialize(model: MlpModel) -> bytes:
    """GDEN payload: magic, u16 version, u32 layer count, u32 dims, then per
    layer the row-major float64 little-endian weights followed by the biases."""
    dims = model.layer_dims
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(dims) - 1)]
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize(payload: bytes) -> MlpModel:
    buf = memoryview(bytes(payload))
    if len(buf) < 10:
        raise ModelFormatError("payload truncated in header")
    if bytes(buf[:4]) != MAGIC:
        raise VersionMismatchError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format version {version}")
    (n_layers,) = struct.unpack_from("<I", buf, 6)
    offset = 10
    if n_layers < 1 or len(buf) < offset + 4 * (n_layers + 1):
        raise ModelFormatError("payload truncated in layer dimensions")
    dims = struct.unpack_from(f"<{n_layers + 1}I", buf, offset)
    offset += 4 * (n_layers + 1)
    expected = offset + 8 * sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if len(buf) != expected:
        raise ModelFormatError(f"payload has {len(buf)} bytes, expected {expected}")
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(buf, dtype="<f8", count=a * b, offset=offset).reshape(a, b)
        offset += 8 * a * b
        bias = np.frombuffer(buf, dtype="<f8", count=b, offset=offset)
        offset += 8 * b
        weights.append(w.astype(np.float64))
        biases.append(bias.astype(np.float64))
    try:
        return MlpModel(tuple(dims), tuple(weights), tuple(biases))
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_model(model: MlpModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, serialize(model))
    return path


def load_model(path) -> MlpModel:
    return deserialize(Path(path).read_bytes())


def save_ensemble(ensemble: Ensemble, directory) -> Path:
    """Write ``<index>_<name>.gden`` per member plus an ordered ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    members = []
    for i, (name, model) in enumerate(zip(ensemble.names, ensemble.models)):
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
        fname = f"{i:02d}_{safe}.gden"
        save_model(model, directory / fname)
        members.append({"name": name, "file": fname})
    write_manifest(directory, members)
    return directory


def write_manifest(directory, members: list[dict]) -> Path:
    """Members are ``{"name", "file"}``; files resolve relative to ``directory``,
    so a manifest may reference models from other training runs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"format": "gden-ensemble", "version": FORMAT_VERSION, "members": members}
    path = directory / MANIFEST_NAME
    _atomic_write(path, (json.dumps(doc, indent=2) + "\n").encode())
    return path


def load_ensemble(directory) -> Ensemble:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    doc = json.loads(manifest.read_text())
    if doc.get("format") != "gden-ensemble":
        raise ModelFormatError(f"{manifest} is not an ensemble manifest")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported manifest version {doc.get('version')}")
    members = doc.get("members") or []
    models = [load_model(directory / m["file"]) for m in members]
    return Ensemble(models, [m.get("name", Path(m["file"]).stem) for m in members])
