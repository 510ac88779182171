"""Frozen MLPs with trainable low-rank adapters, manual backprop and optimizers.

Weights follow the ``h = W x`` convention: a layer mapping ``k`` inputs to
``d`` outputs stores ``W`` as ``d x k`` and its adapter as ``A (d x r)``,
``B (r x k)``. Batches are row-major ``(n, features)`` arrays.
"""

from dataclasses import dataclass, field

import numpy as np

from .linalg import LowRankFactors, ShapeError, as_matrix
from .regularizer import PastAccumulator, penalty, penalty_grad_factors

ACTIVATIONS = ("identity", "tanh", "relu")
ADAPTER_INIT_STD = 0.02


class TrainingDivergence(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


def _act(name, z):
    if name == "identity":
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, h):
    if name == "identity":
        return np.ones_like(z)
    if name == "tanh":
        return 1.0 - h * h
    return (z > 0).astype(np.float64)


@dataclass(frozen=True)
class Layer:
    W: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        W = as_matrix(self.W, "W").copy()
        bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != W.shape[0]:
            raise ShapeError(f"bias length {bias.shape[0]} != W rows {W.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        W.flags.writeable = False
        bias.flags.writeable = False
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "bias", bias)

    @property
    def shape(self):
        return self.W.shape


class FrozenModel:
    """Stack of frozen dense layers; only adapters on top of it ever train."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("model needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].W.shape[1] != layers[i - 1].W.shape[0]:
                raise ShapeError(
                    f"layer {i} expects {layers[i].W.shape[1]} inputs, "
                    f"layer {i - 1} produces {layers[i - 1].W.shape[0]}"
                )
        self.layers = tuple(layers)

    @classmethod
    def random(cls, sizes, activation="tanh", seed=0, weight_scale=1.0):
        """Gaussian ``N(0, scale^2 / fan_in)`` weights and zero biases.

        ``sizes`` lists layer widths from input to ``num_classes``; hidden
        layers use ``activation`` and the output layer is linear.
        """
        rng = np.random.default_rng(seed)
        layers = []
        for i, (k, d) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = rng.normal(0.0, weight_scale / np.sqrt(k), size=(d, k))
            last = i == len(sizes) - 2
            layers.append(Layer(W, np.zeros(d), "identity" if last else activation))
        return cls(layers)

    @property
    def n_features(self):
        return self.layers[0].W.shape[1]

    @property
    def num_classes(self):
        return self.layers[-1].W.shape[0]

    def layer_shapes(self):
        return {i: layer.shape for i, layer in enumerate(self.layers)}

    def merged(self, deltas):
        """New frozen model with ``deltas[layer]`` added onto each ``W``."""
        layers = []
        for i, layer in enumerate(self.layers):
            W = layer.W + deltas[i] if i in deltas else layer.W
            layers.append(Layer(W, layer.bias, layer.activation))
        return FrozenModel(layers)

    def fingerprint(self):
        return b"".join(l.W.tobytes() + l.bias.tobytes() for l in self.layers)


class AdapterSet:
    """Layer index -> :class:`LowRankFactors`, all of the same rank."""

    def __init__(self, entries, rank):
        self.entries = dict(entries)
        self.rank = int(rank)
        for layer, f in self.entries.items():
            if f.rank != self.rank:
                raise ShapeError(f"layer {layer}: adapter rank {f.rank} != {self.rank}")

    @classmethod
    def init(cls, model, rank, rng, layers=None):
        """``A ~ N(0, 0.02^2)`` and ``B = 0`` so every update starts at zero."""
        layers = range(len(model.layers)) if layers is None else layers
        entries = {}
        for i in layers:
            d, k = model.layers[i].shape
            if rank > min(d, k):
                raise ShapeError(f"rank {rank} exceeds min{(d, k)} for layer {i}")
            A = rng.normal(0.0, ADAPTER_INIT_STD, size=(d, rank))
            entries[i] = LowRankFactors(A, np.zeros((rank, k)))
        return cls(entries, rank)

    @classmethod
    def zeros(cls, model, rank, layers=None):
        layers = range(len(model.layers)) if layers is None else layers
        entries = {}
        for i in layers:
            d, k = model.layers[i].shape
            entries[i] = LowRankFactors(np.zeros((d, rank)), np.zeros((rank, k)))
        return cls(entries, rank)

    def deltas(self):
        return {i: f.delta() for i, f in self.entries.items()}

    def check(self, model):
        for i, f in self.entries.items():
            if not 0 <= i < len(model.layers):
                raise ShapeError(f"adapter for unknown layer {i}")
            if f.shape != model.layers[i].shape:
                raise ShapeError(
                    f"layer {i}: adapter product {f.shape} != weight {model.layers[i].shape}"
                )


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ShapeError(f"expected inputs with {model.n_features} features, got {x.shape}")
    return x


def _forward_cache(model, adapters, X):
    hs, zs = [X], []
    h = X
    for i, layer in enumerate(model.layers):
        z = h @ layer.W.T + layer.bias
        f = adapters.entries.get(i) if adapters is not None else None
        if f is not None:
            z = z + (h @ f.B.T) @ f.A.T
        h = _act(layer.activation, z)
        zs.append(z)
        hs.append(h)
    return hs, zs


def adapted_forward(model, adapters, x):
    """Logits of ``model`` with each adapted layer computing ``W h + A (B h) + b``.

    Accepts a single vector (returns a vector) or an ``(n, features)`` batch.
    """
    single = np.ndim(x) == 1
    X = _as_batch(model, x)
    if adapters is not None:
        adapters.check(model)
    logits = _forward_cache(model, adapters, X)[0][-1]
    return logits[0] if single else logits


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(model, X, y):
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"{X.shape[0]} inputs but labels of shape {y.shape}")
    if np.any(y < 0) or np.any(y >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    return y.astype(np.int64)


def task_loss(model, adapters, X, y):
    """Mean negative log-likelihood of ``y`` under the softmax of the logits."""
    X = _as_batch(model, X)
    y = _check_labels(model, X, y)
    logp = log_softmax(adapted_forward(model, adapters, X))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def ella_penalty(adapters, past: PastAccumulator):
    total = 0.0
    for i, f in adapters.entries.items():
        if i in past.per_layer:
            total += penalty(f.delta(), past.per_layer[i])
    return total


def total_loss(model, adapters, X, y, lam=0.0, past=None):
    """Task NLL plus ``lam`` times the summed per-layer alignment penalty."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    loss = task_loss(model, adapters, X, y)
    if past is not None and lam > 0:
        loss += lam * ella_penalty(adapters, past)
    return loss


def backward(model, adapters, X, y, lam=0.0, past=None, extra=None):
    """Exact gradient of :func:`total_loss` for every adapter factor.

    Returns ``{layer: (gradA, gradB)}``. ``extra`` is an optional callable
    ``adapters -> {layer: (gA, gB)}`` whose output is added, used for
    auxiliary penalties such as the orthogonality comparator.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    X = _as_batch(model, X)
    y = _check_labels(model, X, y)
    adapters.check(model)
    hs, zs = _forward_cache(model, adapters, X)
    n = X.shape[0]
    probs = np.exp(log_softmax(hs[-1]))
    dz = probs
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if i < len(model.layers) - 1 or layer.activation != "identity":
            dz = dz * _act_grad(layer.activation, zs[i], hs[i + 1])
        h_in = hs[i]
        f = adapters.entries.get(i)
        if f is not None:
            dW = dz.T @ h_in
            grads[i] = (dW @ f.B.T, f.A.T @ dW)
        if i > 0:
            W_eff = layer.W if f is None else layer.W + f.A @ f.B
            dz = dz @ W_eff
    if past is not None and lam > 0:
        for i, f in adapters.entries.items():
            if i in past.per_layer:
                gA, gB = penalty_grad_factors(f, past.per_layer[i])
                grads[i] = (grads[i][0] + lam * gA, grads[i][1] + lam * gB)
    if extra is not None:
        for i, (gA, gB) in extra(adapters).items():
            grads[i] = (grads[i][0] + gA, grads[i][1] + gB)
    return grads


@dataclass
class Optimizer:
    """SGD (with optional momentum) or bias-corrected Adam over adapter factors.

    Moment buffers are keyed by ``(layer, "A" | "B")`` and live on the
    optimizer, so one instance belongs to one task's adapters.
    """

    kind: str = "sgd"
    learning_rate: float = 0.1
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def _update(self, key, param, grad):
        if self.kind == "sgd":
            if self.momentum:
                v = self.momentum * self.buffers.get(key, 0.0) + grad
                self.buffers[key] = v
                grad = v
            return param - self.learning_rate * grad
        m, v = self.buffers.get(key, (0.0, 0.0))
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.buffers[key] = (m, v)
        m_hat = m / (1.0 - self.beta1**self.step_count)
        v_hat = v / (1.0 - self.beta2**self.step_count)
        return param - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, adapters, grads):
        for i, (gA, gB) in grads.items():
            if not (np.all(np.isfinite(gA)) and np.all(np.isfinite(gB))):
                raise TrainingDivergence(f"non-finite gradient at layer {i}, step {self.step_count}")
        self.step_count += 1
        entries = {}
        for i, f in adapters.entries.items():
            if i not in grads:
                entries[i] = f
                continue
            gA, gB = grads[i]
            A = self._update((i, "A"), f.A, gA)
            B = self._update((i, "B"), f.B, gB)
            if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
                raise TrainingDivergence(f"adapter at layer {i} left the finite range at step {self.step_count}")
            entries[i] = LowRankFactors(A, B)
        return AdapterSet(entries, adapters.rank)


def predict(model, adapters, X):
    """Argmax class per row; ties resolve to the lowest index."""
    return np.argmax(adapted_forward(model, adapters, _as_batch(model, X)), axis=1)


def accuracy(model, adapters, X, y):
    return float(np.mean(predict(model, adapters, X) == np.asarray(y)))
