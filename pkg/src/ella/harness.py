"""Sequential continual-learning runs, metrics and forgetting diagnostics."""

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .estimator import METHODS, ELLAClassifier
from .linalg import ShapeError
from .model import ACTIVATIONS, FrozenModel, adapted_forward, task_loss
from .regularizer import DEFAULT_EPSILON
from .tasks import StreamOrder, generate_task, interference_stream

# bump when a reported formula changes so emitted results stay self-describing
FORMULA_VERSIONS = {
    "OA": "mean_t a[T,t] / v1",
    "FWT": "mean_t (a[t,t] - a0[t]) / v1",
    "BWT": "mean_{t<T} (a[T,t] - a[t,t]) / v1",
    "GA": "mean unseen-task accuracy of merged model / v1",
    "DeltaGA": "GA(merged) - GA(frozen base) / v1",
    "opposing": "sum |dW_t| over coords with dW_t * dW_{t-1} < 0 / v1",
    "loss_delta": "batch mean NLL after task t minus before task t / v1",
}


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to replay one continual-learning run."""

    stream: StreamOrder = field(default_factory=lambda: interference_stream(2, mean_scale=3.0))
    lambda_schedule: tuple = (0.0, 1.0)
    rank: int = 4
    hidden_sizes: tuple = (32,)
    activation: str = "tanh"
    weight_scale: float = 1.0
    adapted_layers: tuple | None = None
    optimizer: str = "adam"
    learning_rate: float = 0.01
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    steps_per_task: int = 300
    batch_size: int = 64
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0
    method: str = "ella"
    ortho_lambda: float = 1.0
    unseen_tasks: tuple = ()
    diag_batches: int = 32
    bin_width: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "lambda_schedule", tuple(float(v) for v in self.lambda_schedule))
        object.__setattr__(self, "hidden_sizes", tuple(int(v) for v in self.hidden_sizes))
        object.__setattr__(self, "unseen_tasks", tuple(self.unseen_tasks))
        if self.adapted_layers is not None:
            object.__setattr__(self, "adapted_layers", tuple(int(v) for v in self.adapted_layers))
        if len(self.lambda_schedule) != len(self.stream):
            raise ValueError(
                f"lambda_schedule has {len(self.lambda_schedule)} entries "
                f"but the stream has {len(self.stream)} tasks"
            )
        if any(v < 0 for v in self.lambda_schedule):
            raise ValueError("lambda_schedule entries must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.rank < 1 or self.steps_per_task < 0 or self.batch_size < 1:
            raise ValueError("rank and batch_size must be >= 1, steps_per_task >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.diag_batches < 1 or self.bin_width <= 0:
            raise ValueError("diag_batches must be >= 1 and bin_width > 0")

    @property
    def n_tasks(self):
        return len(self.stream)

    def effective_schedule(self):
        if self.method == "ella":
            return self.lambda_schedule
        return tuple(0.0 for _ in self.lambda_schedule)

    def build_model(self, n_features, n_classes):
        sizes = [n_features, *self.hidden_sizes, n_classes]
        return FrozenModel.random(sizes, self.activation, self.seed, self.weight_scale)

    def estimator(self, base_model):
        return ELLAClassifier(
            base_model=base_model,
            rank=self.rank,
            lam=0.0,
            epsilon=self.epsilon,
            method=self.method,
            ortho_lambda=self.ortho_lambda,
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            beta1=self.beta1,
            beta2=self.beta2,
            steps_per_task=self.steps_per_task,
            batch_size=self.batch_size,
            adapted_layers=self.adapted_layers,
            random_state=self.seed,
        )

    def to_dict(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "stream":
                value = {"name": value.name, "tasks": [t.to_dict() for t in value.tasks]}
            elif f.name == "unseen_tasks":
                value = [t.to_dict() for t in value]
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out


@dataclass
class AccMatrix:
    """``a[i, j]``: test accuracy on task ``j`` after training through task ``i``."""

    a: np.ndarray
    baseline: np.ndarray | None = None

    @property
    def n_tasks(self):
        return self.a.shape[0]


@dataclass
class DiagnosticsRecord:
    # (transition t, past task j) -> per-batch loss_after - loss_before
    loss_deltas: dict = field(default_factory=dict)
    # transition t (>= 1) -> opposing-direction update magnitude
    opposing_magnitudes: dict = field(default_factory=dict)
    wall_times: list = field(default_factory=list)


@dataclass
class RunResult:
    acc: AccMatrix
    diagnostics: DiagnosticsRecord
    model: FrozenModel
    estimator: ELLAClassifier
    config: RunConfig
    stream_digest: str
    task_deltas: list = field(default_factory=list)
    general: dict | None = None

    @property
    def metrics(self):
        out = compute_metrics(self.acc)
        out.update(self.general or {"GA": None, "DeltaGA": None})
        return out


class RunAborted(RuntimeError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


def _diag_batches(test, n_batches):
    idx = np.array_split(np.arange(len(test)), min(n_batches, len(test)))
    return [(test.features[i], test.labels[i]) for i in idx]


def _batch_losses(model, batches):
    return np.array([task_loss(model, None, X, y) for X, y in batches])


def opposing_update_magnitude(delta_t, delta_prev):
    """Total ``|dW_t|`` on coordinates whose sign opposes the previous task's update."""
    if delta_t.keys() != delta_prev.keys():
        raise ShapeError(f"layer sets differ: {sorted(delta_t)} vs {sorted(delta_prev)}")
    total = 0.0
    for layer in sorted(delta_t):
        cur = np.asarray(delta_t[layer], dtype=np.float64)
        prev = np.asarray(delta_prev[layer], dtype=np.float64)
        if cur.shape != prev.shape:
            raise ShapeError(f"layer {layer}: {cur.shape} vs {prev.shape}")
        total += float(np.sum(np.abs(cur) * (cur * prev < 0)))
    return total


def _stream_digest(pairs):
    h = hashlib.sha256()
    for train, test in pairs:
        h.update(train.digest().encode())
        h.update(test.digest().encode())
    return h.hexdigest()


def run_sequence(config: RunConfig, with_baseline=False):
    """Train the stream task by task and evaluate after each task.

    Returns a :class:`RunResult`. A non-finite loss aborts the run with
    :class:`RunAborted`, whose ``partial`` attribute holds the rows done so far.
    """
    pairs = [generate_task(spec) for spec in config.stream.tasks]
    T = len(pairs)
    n_features, n_classes = pairs[0][0].n_features, pairs[0][0].num_classes
    for i, (train, _) in enumerate(pairs):
        if (train.n_features, train.num_classes) != (n_features, n_classes):
            raise ValueError(f"task {i} does not match the stream's feature/class counts")
    base = config.build_model(n_features, n_classes)
    est = config.estimator(base)
    schedule = config.effective_schedule()
    diag_sets = [_diag_batches(test, config.diag_batches) for _, test in pairs]
    acc = np.zeros((T, T))
    rec = DiagnosticsRecord()
    deltas = []
    for t, (train, _) in enumerate(pairs):
        model_before = est.merged_model_ if t else base
        before = {j: _batch_losses(model_before, diag_sets[j]) for j in range(t)}
        start = time.perf_counter()
        try:
            est.partial_fit(train.features, train.labels, lam=schedule[t])
        except FloatingPointError as exc:
            partial = AccMatrix(acc[:t].copy())
            raise RunAborted(f"training diverged on task {t}: {exc}", partial) from exc
        rec.wall_times.append(time.perf_counter() - start)
        merged = est.merged_model_
        for j in range(t):
            rec.loss_deltas[(t, j)] = _batch_losses(merged, diag_sets[j]) - before[j]
        if deltas:
            rec.opposing_magnitudes[t] = opposing_update_magnitude(est.last_deltas_, deltas[-1])
        deltas.append(est.last_deltas_)
        for j, (_, test) in enumerate(pairs):
            acc[t, j] = est.score(test.features, test.labels)
    baseline = None
    if with_baseline:
        baseline = np.array([single_task_baseline(config, t) for t in range(T)])
    general = None
    if config.unseen_tasks:
        general = general_ability(est.merged_model_, config.unseen_tasks, base)
    return RunResult(
        AccMatrix(acc, baseline), rec, est.merged_model_, est, config,
        _stream_digest(pairs), deltas, general,
    )


def single_task_baseline(config: RunConfig, t):
    """Accuracy of task ``t`` trained alone from the frozen base with the same budget."""
    if not 0 <= t < config.n_tasks:
        raise IndexError(f"task index {t} outside stream of length {config.n_tasks}")
    train, test = generate_task(config.stream.tasks[t])
    base = config.build_model(train.n_features, train.num_classes)
    est = config.estimator(base)
    est.partial_fit(train.features, train.labels, lam=0.0)
    return est.score(test.features, test.labels)


def compute_metrics(m: AccMatrix):
    """OA, FWT and BWT; FWT is ``None`` without a baseline, BWT ``None`` when T = 1."""
    a = m.a
    T = a.shape[0]
    oa = float(np.mean(a[T - 1, :]))
    bwt = None
    if T >= 2:
        bwt = float(np.sum(a[T - 1, : T - 1] - np.diag(a)[: T - 1]) / (T - 1))
    fwt = None
    if m.baseline is not None:
        fwt = float(np.mean(np.diag(a) - np.asarray(m.baseline)))
    return {"OA": oa, "FWT": fwt, "BWT": bwt}


def _mean_accuracy(model, tasks):
    scores = []
    for spec in tasks:
        _, test = generate_task(spec)
        pred = np.argmax(adapted_forward(model, None, test.features), axis=1)
        scores.append(float(np.mean(pred == test.labels)))
    return float(np.mean(scores))


def general_ability(model, unseen, base=None):
    """Mean accuracy over unseen tasks and its change relative to ``base``.

    Returns ``None`` for an empty task list. ``DeltaGA`` is ``None`` when no
    base model is given.
    """
    unseen = list(unseen)
    if not unseen:
        return None
    ga = _mean_accuracy(model, unseen)
    delta = None if base is None else ga - _mean_accuracy(base, unseen)
    return {"GA": ga, "DeltaGA": delta}


@dataclass
class Histogram:
    """Counts over bins ``[(k - 1/2) w, (k + 1/2) w)`` keyed by integer ``k``."""

    bin_width: float
    counts: dict

    @property
    def total(self):
        return sum(self.counts.values())

    def centers(self):
        return [k * self.bin_width for k in sorted(self.counts)]


def histogram(values, bin_width):
    idx = np.floor(np.asarray(values, dtype=np.float64) / bin_width + 0.5).astype(np.int64)
    keys, counts = np.unique(idx, return_counts=True)
    return Histogram(bin_width, {int(k): int(c) for k, c in zip(keys, counts)})


def loss_change_histogram(rec: DiagnosticsRecord, bin_width=0.1):
    """One fixed-width histogram of loss changes per ``(transition, past task)``."""
    return {key: histogram(v, bin_width) for key, v in sorted(rec.loss_deltas.items())}


def positive_tail_mass(values, threshold=0.5):
    """Fraction of loss changes strictly above ``threshold``."""
    values = np.asarray(values, dtype=np.float64)
    return float(np.mean(values > threshold)) if values.size else 0.0


def _sweep_point(args):
    config, lam = args
    schedule = (0.0,) + (lam,) * (config.n_tasks - 1)
    cfg = replace(config, lambda_schedule=schedule, method="ella")
    m = run_sequence(cfg).metrics
    return {"lambda": lam, "OA": m["OA"], "BWT": m["BWT"]}


def lambda_sweep(config: RunConfig, lambdas, workers=1):
    """One run per lambda (first task always at 0); rows sorted by lambda."""
    jobs = [(config, float(lam)) for lam in sorted(lambdas)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_sweep_point, jobs))
    return [_sweep_point(job) for job in jobs]


# -- file emission -----------------------------------------------------------

def _fmt(x):
    return "" if x is None else format(float(x), ".17g")


def write_acc_matrix(path, acc: AccMatrix):
    T = acc.n_tasks
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [f"task_{j + 1}" for j in range(T)])
        for i in range(T):
            w.writerow([f"after_task_{i + 1}"] + [_fmt(v) for v in acc.a[i]])
        if acc.baseline is not None:
            w.writerow(["baseline"] + [_fmt(v) for v in acc.baseline])


def write_diagnostics(path, rec: DiagnosticsRecord):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "transition", "past_task", "batch", "value"])
        for (t, j), values in sorted(rec.loss_deltas.items()):
            for b, v in enumerate(values):
                w.writerow(["loss_delta", t + 1, j + 1, b, _fmt(v)])
        for t, v in sorted(rec.opposing_magnitudes.items()):
            w.writerow(["opposing_magnitude", t + 1, t, "", _fmt(v)])


def write_sweep(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "OA", "BWT"])
        for r in rows:
            w.writerow([_fmt(r["lambda"]), _fmt(r["OA"]), _fmt(r["BWT"])])


def metrics_document(result: RunResult):
    hist = loss_change_histogram(result.diagnostics, result.config.bin_width)
    return {
        "metrics": result.metrics,
        "acc_matrix": result.acc.a.tolist(),
        "baseline": None if result.acc.baseline is None else result.acc.baseline.tolist(),
        "opposing_magnitudes": {
            str(t + 1): v for t, v in sorted(result.diagnostics.opposing_magnitudes.items())
        },
        "loss_change_histograms": {
            f"{t + 1}->{j + 1}": {str(k): c for k, c in sorted(h.counts.items())}
            for (t, j), h in hist.items()
        },
        "config": result.config.to_dict(),
        "stream_digest": result.stream_digest,
        "formula_versions": FORMULA_VERSIONS,
        "timestamp": {
            "created": datetime.now(timezone.utc).isoformat(),
            "task_wall_seconds": list(result.diagnostics.wall_times),
        },
    }


def write_run(out_dir, result: RunResult):
    """Emit ``acc_matrix.csv``, ``metrics.json``, ``diagnostics.csv`` and ``state.npz``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_acc_matrix(out / "acc_matrix.csv", result.acc)
    write_diagnostics(out / "diagnostics.csv", result.diagnostics)
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics_document(result), fh, indent=2, sort_keys=True)
        fh.write("\n")
    result.estimator.save_state(out / "state.npz")
    return out
