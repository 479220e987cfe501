"""Minimal differentiable feedforward networks.

Dense multi-layer perceptrons over flat float64 parameter vectors, with
forward evaluation, Jacobian-vector products (jvp), vector-Jacobian
products (vjp) and explicit per-datum Jacobians for small problems.
Everything is pure given ``(spec, w, x)`` and safe for concurrent reads.

Parameter flattening order is fixed: layer by layer, weight matrix first
(row-major, shape ``(fan_out, fan_in)``) then bias. The checkpoint file
format depends on this order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceededError, ShapeMismatchError

CHECKPOINT_MAGIC = b"GLAPv001"

DEFAULT_DENSE_JACOBIAN_BUDGET = 10**7


def _relu(a):
    return np.maximum(a, 0.0)


def _drelu(a):
    # subgradient at 0 is 0
    return (a > 0.0).astype(np.float64)


def _identity(a):
    return a


def _done(a):
    return np.ones_like(a)


def _dtanh(a):
    return 1.0 - np.tanh(a) ** 2


ACTIVATIONS = {
    "relu": (_relu, _drelu),
    "tanh": (np.tanh, _dtanh),
    "identity": (_identity, _done),
}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a dense feedforward network f: R^D x R^I -> R^O.

    The activation applies to every hidden layer; the output layer is
    always linear.
    """

    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = ()
    activation: str = "relu"
    bias_per_layer: tuple[bool, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ShapeMismatchError("input_dim and output_dim must be positive")
        if any(h < 1 for h in self.hidden):
            raise ShapeMismatchError("hidden widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        n_layers = len(self.hidden) + 1
        if self.bias_per_layer is None:
            object.__setattr__(self, "bias_per_layer", (True,) * n_layers)
        else:
            object.__setattr__(self, "bias_per_layer", tuple(bool(b) for b in self.bias_per_layer))
        if len(self.bias_per_layer) != n_layers:
            raise ShapeMismatchError(
                f"bias_per_layer has {len(self.bias_per_layer)} entries, expected {n_layers}"
            )

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def layer_shapes(self) -> list[tuple[int, int, bool]]:
        """Per-layer ``(fan_in, fan_out, has_bias)``."""
        w = self.widths
        return [(w[l], w[l + 1], self.bias_per_layer[l]) for l in range(self.n_layers)]

    @property
    def num_params(self) -> int:
        return sum(fi * fo + (fo if b else 0) for fi, fo, b in self.layer_shapes())


@dataclass(frozen=True)
class Dataset:
    """Training or evaluation data.

    ``targets`` is an ``(N, O)`` float array for regression or an ``(N,)``
    integer label array for classification.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ShapeMismatchError("inputs must be a nonempty N x I matrix")
        if not np.all(np.isfinite(inputs)):
            raise ValueError("inputs contain non-finite entries")
        targets = np.asarray(self.targets)
        if np.issubdtype(targets.dtype, np.integer):
            if targets.ndim != 1:
                raise ShapeMismatchError("classification labels must be a flat integer array")
        else:
            targets = targets.astype(np.float64)
            if targets.ndim != 2:
                raise ShapeMismatchError("regression targets must be an N x O matrix")
            if not np.all(np.isfinite(targets)):
                raise ValueError("targets contain non-finite entries")
        if targets.shape[0] != inputs.shape[0]:
            raise ShapeMismatchError(
                f"{inputs.shape[0]} inputs but {targets.shape[0]} targets"
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(self.targets.dtype, np.integer)


def check_params(spec: NetworkSpec, w: np.ndarray, name: str = "w") -> np.ndarray:
    """Validate a flat parameter vector against ``spec`` and return it as float64."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != spec.num_params:
        raise ShapeMismatchError(
            f"{name} has shape {w.shape}, expected ({spec.num_params},)"
        )
    return w


def split_params(spec: NetworkSpec, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Split a flat vector into per-layer ``(W, b)`` views (b is None without bias)."""
    w = np.asarray(w, dtype=np.float64)
    layers = []
    offset = 0
    for fi, fo, has_bias in spec.layer_shapes():
        W = w[offset:offset + fi * fo].reshape(fo, fi)
        offset += fi * fo
        b = None
        if has_bias:
            b = w[offset:offset + fo]
            offset += fo
        layers.append((W, b))
    if offset != w.shape[0]:
        raise ShapeMismatchError(
            f"parameter vector has length {w.shape[0]}, expected {spec.num_params}"
        )
    return layers


def join_params(spec: NetworkSpec, layers) -> np.ndarray:
    """Flatten per-layer ``(W, b)`` pairs back into a single vector."""
    parts = []
    for l, (W, b) in enumerate(layers):
        fi, fo, has_bias = spec.layer_shapes()[l]
        W = np.asarray(W, dtype=np.float64)
        if W.shape != (fo, fi):
            raise ShapeMismatchError(f"layer {l}: weight shape {W.shape}, expected {(fo, fi)}")
        parts.append(W.reshape(-1))
        if has_bias:
            b = np.asarray(b, dtype=np.float64)
            if b.shape != (fo,):
                raise ShapeMismatchError(f"layer {l}: bias shape {b.shape}, expected {(fo,)}")
            parts.append(b)
        elif b is not None:
            raise ShapeMismatchError(f"layer {l} takes no bias")
    return np.concatenate(parts) if parts else np.zeros(0)


def init_params(spec: NetworkSpec, seed: int, scale: float = 1.0) -> np.ndarray:
    """Fan-in scaled Gaussian initialization; deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for fi, fo, has_bias in spec.layer_shapes():
        W = rng.standard_normal((fo, fi)) * (scale / np.sqrt(fi))
        b = np.zeros(fo) if has_bias else None
        layers.append((W, b))
    return join_params(spec, layers)


def _as_batch(spec: NetworkSpec, x: np.ndarray, name: str = "x") -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeMismatchError(
            f"{name} has shape {np.asarray(x).shape}, expected input length {spec.input_dim}"
        )
    return x, single


def _forward_trace(spec: NetworkSpec, w: np.ndarray, X: np.ndarray):
    """Forward pass keeping post-activation values and activation derivatives.

    Returns ``(hs, dacts)`` with ``hs[l]`` the input of layer l and
    ``hs[-1]`` the network output; ``dacts[l]`` is the derivative of the
    activation applied after layer l (hidden layers only).
    """
    act, dact = ACTIVATIONS[spec.activation]
    layers = split_params(spec, w)
    hs = [X]
    dacts = []
    h = X
    for l, (W, b) in enumerate(layers):
        a = h @ W.T
        if b is not None:
            a = a + b
        if l < spec.n_layers - 1:
            h = act(a)
            dacts.append(dact(a))
        else:
            h = a
        hs.append(h)
    return hs, dacts


def forward_batch(spec: NetworkSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Evaluate the network on an ``(N, I)`` batch; returns ``(N, O)``."""
    X, _ = _as_batch(spec, X, "X")
    w = check_params(spec, w)
    hs, _ = _forward_trace(spec, w, X)
    return hs[-1]


def forward(spec: NetworkSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network at a single input; returns a length-O vector."""
    x = np.asarray(x, dtype=np.float64)
    return forward_batch(spec, w, x[None, :] if x.ndim == 1 else x)[0]


def jvp_batch(spec: NetworkSpec, w: np.ndarray, X: np.ndarray,
              tangent: np.ndarray) -> np.ndarray:
    """J_w(x_n) . tangent for every row of X; returns ``(N, O)``."""
    X, _ = _as_batch(spec, X, "X")
    w = check_params(spec, w)
    tangent = check_params(spec, tangent, "tangent")
    layers = split_params(spec, w)
    tlayers = split_params(spec, tangent)
    act, dact = ACTIVATIONS[spec.activation]
    h = X
    dh = np.zeros_like(X)
    for l, ((W, b), (dW, db)) in enumerate(zip(layers, tlayers)):
        a = h @ W.T
        if b is not None:
            a = a + b
        da = h @ dW.T + dh @ W.T
        if db is not None:
            da = da + db
        if l < spec.n_layers - 1:
            dh = dact(a) * da
            h = act(a)
        else:
            h, dh = a, da
    return dh


def jvp(spec: NetworkSpec, w: np.ndarray, x: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """Jacobian-vector product at a single input; returns a length-O vector."""
    x = np.asarray(x, dtype=np.float64)
    return jvp_batch(spec, w, x[None, :] if x.ndim == 1 else x, tangent)[0]


def vjp_batch(spec: NetworkSpec, w: np.ndarray, X: np.ndarray,
              cotangents: np.ndarray) -> np.ndarray:
    """Sum over the batch of J_w(x_n)^T . cotangent_n; returns ``(D,)``.

    This is the reverse-mode pass used for loss gradients and Gauss-Newton
    products: the per-datum contributions are accumulated, not stacked.
    """
    X, _ = _as_batch(spec, X, "X")
    w = check_params(spec, w)
    cotangents = np.asarray(cotangents, dtype=np.float64)
    if cotangents.shape != (X.shape[0], spec.output_dim):
        raise ShapeMismatchError(
            f"cotangents have shape {cotangents.shape}, expected {(X.shape[0], spec.output_dim)}"
        )
    layers = split_params(spec, w)
    hs, dacts = _forward_trace(spec, w, X)
    grads = [None] * spec.n_layers
    G = cotangents
    for l in range(spec.n_layers - 1, -1, -1):
        W, b = layers[l]
        gW = G.T @ hs[l]
        gb = G.sum(axis=0) if b is not None else None
        grads[l] = (gW, gb)
        if l > 0:
            G = (G @ W) * dacts[l - 1]
    return join_params(spec, grads)


def vjp(spec: NetworkSpec, w: np.ndarray, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Transposed Jacobian product at a single input; returns ``(D,)``."""
    x = np.asarray(x, dtype=np.float64)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != (spec.output_dim,):
        raise ShapeMismatchError(
            f"cotangent has shape {cotangent.shape}, expected ({spec.output_dim},)"
        )
    return vjp_batch(spec, w, x[None, :] if x.ndim == 1 else x, cotangent[None, :])


def dense_jacobian(spec: NetworkSpec, w: np.ndarray, dataset: Dataset,
                   budget: int = DEFAULT_DENSE_JACOBIAN_BUDGET) -> np.ndarray:
    """Stacked per-datum Jacobian, shape ``(N*O, D)``.

    Row block n holds J_w(x_n). Refuses to materialize more than ``budget``
    entries; large problems must use the matrix-free products instead.
    """
    w = check_params(spec, w)
    X = np.asarray(dataset.inputs, dtype=np.float64)
    N = X.shape[0]
    O, D = spec.output_dim, spec.num_params
    if N * O * D > budget:
        raise BudgetExceededError(
            f"dense Jacobian needs {N * O * D} entries, budget is {budget}"
        )
    layers = split_params(spec, w)
    hs, dacts = _forward_trace(spec, w, X)
    J = np.empty((N, O, D))
    for o in range(O):
        G = np.zeros((N, O))
        G[:, o] = 1.0
        # per-datum reverse pass for one output component, batched over N
        offsets = []
        pos = 0
        for fi, fo, has_bias in spec.layer_shapes():
            offsets.append(pos)
            pos += fi * fo + (fo if has_bias else 0)
        for l in range(spec.n_layers - 1, -1, -1):
            W, b = layers[l]
            fi, fo, has_bias = spec.layer_shapes()[l]
            gW = np.einsum("no,ni->noi", G, hs[l]).reshape(N, fo * fi)
            start = offsets[l]
            J[:, o, start:start + fo * fi] = gW
            if has_bias:
                J[:, o, start + fo * fi:start + fo * fi + fo] = G
            if l > 0:
                G = (G @ W) * dacts[l - 1]
    return J.reshape(N * O, D)


def save_checkpoint(path, w: np.ndarray) -> None:
    """Write a flat parameter vector in the binary checkpoint format.

    Layout: 8-byte magic, D as unsigned 64-bit little-endian, then D
    IEEE-754 little-endian doubles in flattening order.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ShapeMismatchError("checkpoint expects a flat parameter vector")
    if not np.all(np.isfinite(w)):
        raise ValueError("refusing to checkpoint non-finite parameters")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", w.shape[0]))
        fh.write(w.astype("<f8").tobytes())


def load_checkpoint(path, expected_dim: int | None = None) -> np.ndarray:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16 or header[:8] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
        (dim,) = struct.unpack("<Q", header[8:])
        payload = fh.read()
    if len(payload) != 8 * dim:
        raise ValueError(f"{path}: truncated checkpoint ({len(payload)} payload bytes for D={dim})")
    w = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if expected_dim is not None and dim != expected_dim:
        raise ShapeMismatchError(f"{path}: checkpoint has D={dim}, expected {expected_dim}")
    return w
