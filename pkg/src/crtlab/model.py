"""ReLU multilayer perceptron with an addressable final linear layer, and its checkpoint format."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointDimensionError,
    CheckpointVersionError,
    CorruptCheckpointError,
    ShapeError,
)

FORMAT_VERSION = 1
_MAGIC = "# crtlab checkpoint"


class MlpModel:
    """Logits ``h(x) = g(x) @ W + b`` where ``g`` is the post-ReLU penultimate output.

    Weights are stored as ``[fan_in, fan_out]`` so the forward pass is
    ``x @ W``; :meth:`final_layer_matrix` returns the ``[k, r]`` view used in
    the usual ``h = W g`` notation.
    """

    def __init__(self, layer_dims, weights, biases, metadata=None):
        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = weights
        self.biases = biases
        self.metadata = dict(metadata or {})

    @classmethod
    def init(cls, layer_dims, rng):
        if len(layer_dims) < 2:
            raise ValueError(f"need at least input and output dims, got {layer_dims}")
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(T.Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=f"W{i}"))
            biases.append(T.Tensor(rng.uniform(-bound, bound, size=(fan_out,)), requires_grad=True, name=f"b{i}"))
        return cls(layer_dims, weights, biases)

    @classmethod
    def from_arrays(cls, weights, biases, metadata=None):
        dims = [weights[0].shape[0]] + [w.shape[1] for w in weights]
        ws = [T.Tensor(np.array(w, dtype=np.float64), requires_grad=True, name=f"W{i}") for i, w in enumerate(weights)]
        bs = [T.Tensor(np.array(b, dtype=np.float64), requires_grad=True, name=f"b{i}") for i, b in enumerate(biases)]
        return cls(dims, ws, bs, metadata)

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def num_classes(self):
        return self.layer_dims[-1]

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def frozen(self):
        """Same parameter arrays, but not recorded for gradients (for attacks)."""
        return MlpModel(
            self.layer_dims,
            [T.Tensor(w.data) for w in self.weights],
            [T.Tensor(b.data) for b in self.biases],
            self.metadata,
        )

    def copy(self):
        return MlpModel.from_arrays(
            [w.data.copy() for w in self.weights], [b.data.copy() for b in self.biases], self.metadata
        )

    def final_layer_matrix(self):
        return self.weights[-1].data.T

    def __call__(self, x, return_rep=False):
        return forward_logits(self, x, return_rep=return_rep)


def forward_logits(model, x, return_rep=False):
    """Logits for a batch ``x`` of shape ``[n, d]``; optionally also ``g(x)``."""
    x = T.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"forward_logits: input shape {x.shape} does not match model input dim {model.input_dim}")
    act = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        if i == last:
            break
        act = T.relu(T.matmul(act, w) + b)
    logits = T.matmul(act, model.weights[last]) + model.biases[last]
    if return_rep:
        return logits, act
    return logits


def final_layer_spectral_norm(model, iters=5000, tol=1e-12):
    """Largest singular value of the final weight matrix by power iteration on ``W^T W``.

    Stops once the eigen-residual ``||A v - lam v||`` falls below ``tol * lam``;
    successive estimates can stall long before that when the top two singular
    values are close.
    """
    W = model.final_layer_matrix()
    if not np.any(W):
        return 0.0
    A = W.T @ W
    # deterministic start with no zero component
    v = np.linspace(1.0, 2.0, A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        u = A @ v
        lam = float(v @ u)
        if np.linalg.norm(u - lam * v) <= tol * lam:
            break
        norm = np.linalg.norm(u)
        if norm == 0:
            return 0.0
        v = u / norm
    return math.sqrt(max(lam, 0.0))


def _fmt(arr):
    return " ".join(repr(float(v)) for v in np.asarray(arr).ravel())


def save_checkpoint(model, path):
    lines = [_MAGIC, f"format_version = {FORMAT_VERSION}", "layer_dims = " + " ".join(str(d) for d in model.layer_dims)]
    for key in sorted(model.metadata):
        lines.append(f"meta.{key} = {model.metadata[key]}")
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        lines.append(f"[layer {i} weight {w.shape[0]} {w.shape[1]}]")
        lines.append(_fmt(w.data))
        lines.append(f"[layer {i} bias {b.shape[0]}]")
        lines.append(_fmt(b.data))
    lines.append("[end]")
    Path(path).write_text("\n".join(lines) + "\n")


def _meta_value(text):
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def _parse_array(line, shape, path):
    try:
        values = np.array([float(tok) for tok in line.split()], dtype=np.float64)
    except ValueError as exc:
        raise CorruptCheckpointError(f"{path}: malformed number in array") from exc
    if values.size != int(np.prod(shape)):
        raise CorruptCheckpointError(f"{path}: expected {int(np.prod(shape))} values, found {values.size}")
    return values.reshape(shape)


def load_checkpoint(path):
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: not a text checkpoint") from exc
    lines = text.split("\n")
    if not lines or lines[0] != _MAGIC:
        raise CorruptCheckpointError(f"{path}: missing checkpoint header")
    if not text.endswith("[end]\n"):
        raise CorruptCheckpointError(f"{path}: truncated (no end marker)")
    header = {}
    pos = 1
    while pos < len(lines) and not lines[pos].startswith("["):
        key, sep, value = lines[pos].partition(" = ")
        if not sep:
            raise CorruptCheckpointError(f"{path}: bad header line {lines[pos]!r}")
        header[key] = value
        pos += 1
    try:
        version = int(header["format_version"])
        dims = [int(d) for d in header["layer_dims"].split()]
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: header lacks format_version/layer_dims") from exc
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version {version} unsupported (expected {FORMAT_VERSION})")
    weights, biases = [], []
    while pos < len(lines) and lines[pos] != "[end]":
        tag = lines[pos].strip("[]").split()
        if pos + 1 >= len(lines):
            raise CorruptCheckpointError(f"{path}: section {lines[pos]} has no data")
        try:
            shape = tuple(int(s) for s in tag[3:])
        except ValueError as exc:
            raise CorruptCheckpointError(f"{path}: bad section tag {lines[pos]!r}") from exc
        arr = _parse_array(lines[pos + 1], shape, path)
        if tag[:1] != ["layer"] or tag[2:3] not in (["weight"], ["bias"]):
            raise CorruptCheckpointError(f"{path}: bad section tag {lines[pos]!r}")
        (weights if tag[2] == "weight" else biases).append(arr)
        pos += 2
    if len(weights) != len(dims) - 1 or len(biases) != len(weights):
        raise CheckpointDimensionError(f"{path}: {len(weights)} layers stored but layer_dims has {len(dims) - 1}")
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
            raise CheckpointDimensionError(
                f"{path}: layer {i} has weight {w.shape}, bias {b.shape}; layer_dims imply ({dims[i]}, {dims[i + 1]})"
            )
    meta = {k[5:]: _meta_value(v) for k, v in header.items() if k.startswith("meta.")}
    return MlpModel.from_arrays(weights, biases, meta)
