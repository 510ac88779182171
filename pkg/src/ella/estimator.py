"""Scikit-learn compatible continual learner.

:class:`ELLAClassifier` treats every call to :meth:`~ELLAClassifier.partial_fit`
as one task of a stream: it trains a fresh low-rank adapter set on top of the
merged model, then folds the adapter's update into the per-layer past-update
sum. Only that sum (one matrix per adapted layer) is kept as continual state.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, validate_data

from .linalg import ShapeError
from .model import (
    AdapterSet,
    FrozenModel,
    Optimizer,
    adapted_forward,
    backward,
    log_softmax,
    total_loss,
)
from .regularizer import DEFAULT_EPSILON, PastAccumulator

METHODS = ("ella", "seqlora", "ortho-baseline")


def ortho_penalty(current: AdapterSet, past_A):
    """``sum_layers sum_i ||A_i^T A_t||_F^2`` against stored past ``A`` factors.

    ``past_A`` maps layer index to a list of earlier tasks' ``A`` matrices.
    """
    total = 0.0
    for layer, f in current.entries.items():
        for A_i in past_A.get(layer, ()):
            if A_i.shape != f.A.shape:
                raise ShapeError(f"layer {layer}: past A {A_i.shape} vs current {f.A.shape}")
            gram = A_i.T @ f.A
            total += float(np.sum(gram * gram))
    return total


def ortho_penalty_grad(current: AdapterSet, past_A):
    grads = {}
    for layer, f in current.entries.items():
        gA = np.zeros_like(f.A)
        for A_i in past_A.get(layer, ()):
            gA += 2.0 * A_i @ (A_i.T @ f.A)
        grads[layer] = (gA, np.zeros_like(f.B))
    return grads


class ELLAClassifier(ClassifierMixin, BaseEstimator):
    """Frozen MLP plus per-task low-rank adapters with the ELLA penalty.

    Parameters
    ----------
    base_model : FrozenModel, optional
        Frozen network to adapt. When omitted a random MLP with
        ``hidden_sizes`` and ``activation`` is built on the first call to
        ``partial_fit`` (seeded by ``random_state``).
    rank : int
        Adapter rank, uniform over adapted layers.
    lam : float
        Default penalty strength for tasks after the first; ``partial_fit``
        accepts a per-task override.
    method : {"ella", "seqlora", "ortho-baseline"}
        ``seqlora`` forces ``lam = 0``; ``ortho-baseline`` replaces the ELLA
        penalty with an orthogonality penalty on ``A`` weighted by
        ``ortho_lambda``.
    adapted_layers : sequence of int, optional
        Layer indices that receive adapters (default: all).
    """

    def __init__(
        self,
        base_model=None,
        hidden_sizes=(32,),
        activation="tanh",
        rank=4,
        lam=1.0,
        epsilon=DEFAULT_EPSILON,
        method="ella",
        ortho_lambda=1.0,
        optimizer="adam",
        learning_rate=0.01,
        momentum=0.0,
        beta1=0.9,
        beta2=0.999,
        steps_per_task=300,
        batch_size=64,
        adapted_layers=None,
        weight_scale=1.0,
        random_state=0,
    ):
        self.base_model = base_model
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.rank = rank
        self.lam = lam
        self.epsilon = epsilon
        self.method = method
        self.ortho_lambda = ortho_lambda
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.beta1 = beta1
        self.beta2 = beta2
        self.steps_per_task = steps_per_task
        self.batch_size = batch_size
        self.adapted_layers = adapted_layers
        self.weight_scale = weight_scale
        self.random_state = random_state

    def _init_state(self, n_features, classes):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.base_model is not None:
            model = self.base_model
        else:
            sizes = [n_features, *self.hidden_sizes, len(classes)]
            model = FrozenModel.random(
                sizes, self.activation, seed=self.random_state, weight_scale=self.weight_scale
            )
        if model.n_features != n_features:
            raise ShapeError(f"base model expects {model.n_features} features, got {n_features}")
        if len(classes) > model.num_classes:
            raise ValueError(f"{len(classes)} classes but model has {model.num_classes} outputs")
        self.base_model_ = model
        self.classes_ = np.arange(model.num_classes)
        self.n_features_in_ = n_features
        self.past_ = PastAccumulator()
        self.past_A_ = {}
        self.last_deltas_ = None
        self.n_tasks_ = 0

    def _layers(self):
        if self.adapted_layers is None:
            return list(range(len(self.base_model_.layers)))
        return list(self.adapted_layers)

    def _task_lambda(self, lam):
        if self.method != "ella":
            return 0.0
        lam = self.lam if lam is None else lam
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        return float(lam)

    def fit(self, X, y):
        """Reset all continual state and train a single task."""
        for attr in ("base_model_", "past_"):
            if hasattr(self, attr):
                delattr(self, attr)
        return self.partial_fit(X, y)

    def partial_fit(self, X, y, lam=None, classes=None):
        """Train one new task on ``(X, y)`` and merge its update into the past sum.

        ``lam`` overrides the default penalty strength for this task only.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if not hasattr(self, "past_"):
            classes = np.unique(y) if classes is None else np.asarray(classes)
            n_classes = max(int(np.max(classes)), int(y.max())) + 1
            self._init_state(X.shape[1], np.arange(n_classes))
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        lam = self._task_lambda(lam)
        task = self.n_tasks_
        rng = np.random.default_rng([self.random_state, task])
        model = self.merged_model_
        adapters = AdapterSet.init(model, self.rank, rng, self._layers())
        opt = Optimizer(
            self.optimizer, self.learning_rate, self.momentum, self.beta1, self.beta2
        )
        extra = None
        if self.method == "ortho-baseline" and self.past_A_ and self.ortho_lambda > 0:
            coef = self.ortho_lambda

            def extra(ad):
                return {
                    i: (coef * gA, gB) for i, (gA, gB) in ortho_penalty_grad(ad, self.past_A_).items()
                }

        n = len(y)
        batch = min(self.batch_size, n)
        for _ in range(self.steps_per_task):
            idx = rng.choice(n, batch, replace=False) if batch < n else np.arange(n)
            grads = backward(model, adapters, X[idx], y[idx], lam, self.past_, extra)
            adapters = opt.step(adapters, grads)
        final = total_loss(model, adapters, X, y, lam, self.past_)
        if not np.isfinite(final):
            raise FloatingPointError(f"task {task}: non-finite training loss")

        deltas = adapters.deltas()
        past = self.past_
        for i in sorted(deltas):
            past = past.accumulate(i, deltas[i])
        self.past_ = past.finish_task()
        if self.method == "ortho-baseline":
            for i, f in adapters.entries.items():
                self.past_A_.setdefault(i, []).append(f.A)
        self.last_deltas_ = deltas
        self.last_adapters_ = adapters
        self.n_tasks_ = task + 1
        return self

    @property
    def merged_model_(self):
        """Frozen model with every past update folded in."""
        return self.base_model_.merged(self.past_.per_layer)

    def decision_function(self, X):
        check_is_fitted(self, "past_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return adapted_forward(self.merged_model_, None, X)

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def save_state(self, path):
        """Persist the continual state (past-update sum) to ``path``."""
        check_is_fitted(self, "past_")
        with open(path, "wb") as fh:
            fh.write(self.past_.to_bytes())

    def load_state(self, path):
        check_is_fitted(self, "past_")
        with open(path, "rb") as fh:
            self.past_ = PastAccumulator.from_bytes(fh.read())
        self.n_tasks_ = self.past_.task_count
        return self
