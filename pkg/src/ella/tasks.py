"""Deterministic synthetic task streams and a small CSV loader.

Every generator is a pure function of its :class:`TaskSpec`: train and test
splits come from separate random streams seeded by ``(seed, split)``, so
they never share samples and regenerate bit for bit.
"""

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("rotated-gaussians", "permuted-features", "label-remap", "csv")

DEFAULT_GEOMETRY = {
    "n_features": 16,
    "n_classes": 4,
    "variance": 0.5,
    "mean_scale": 2.0,
    "mean_seed": 0,
}


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self):
        return self.features.shape[1]

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "rotated-gaussians"
    params: dict = field(default_factory=dict)
    seed: int = 0
    samples_per_class: int = 200
    test_samples_per_class: int = 100

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "csv" and "path" not in self.params:
            raise ValueError("csv task needs params.path")

    def param(self, key):
        return self.params.get(key, DEFAULT_GEOMETRY.get(key))

    def to_dict(self):
        return {
            "kind": self.kind,
            "params": dict(self.params),
            "seed": self.seed,
            "samples_per_class": self.samples_per_class,
            "test_samples_per_class": self.test_samples_per_class,
        }


@dataclass(frozen=True)
class StreamOrder:
    tasks: tuple
    name: str = "order-A"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ValueError("stream needs at least one task")

    def __len__(self):
        return len(self.tasks)


def rotation_matrix(n_features, angle):
    """Block-diagonal rotation by ``angle`` in each plane ``(2i, 2i+1)``.

    An odd trailing coordinate is left unchanged.
    """
    R = np.eye(n_features)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, n_features - 1, 2):
        R[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return R


def base_means(spec):
    """Class means before rotation: explicit ``params.means`` or seeded draws."""
    if "means" in spec.params:
        return np.array(spec.params["means"], dtype=np.float64)
    rng = np.random.default_rng(spec.param("mean_seed"))
    n_classes, n_features = spec.param("n_classes"), spec.param("n_features")
    raw = rng.normal(size=(n_classes, n_features))
    return spec.param("mean_scale") * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def task_means(spec):
    means = base_means(spec)
    angle = float(spec.params.get("angle", 0.0))
    return means @ rotation_matrix(means.shape[1], angle).T


def _gaussian_split(spec, means, split, per_class):
    rng = np.random.default_rng([spec.seed, 0 if split == "train" else 1])
    n_classes, n_features = means.shape
    std = np.sqrt(spec.param("variance"))
    labels = np.repeat(np.arange(n_classes), per_class)
    features = means[labels] + std * rng.normal(size=(len(labels), n_features))
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order], split, n_classes)


def _permutation(seed, n):
    return np.random.default_rng(seed).permutation(n)


def load_csv(path, num_classes=None, split="train"):
    """Read ``header, numeric features..., integer label`` rows."""
    path = Path(path)
    rows, labels = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise DatasetFormatError(f"{path}: missing header or too few columns")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}"
                )
            feats = []
            for col, cell in enumerate(row[:-1], start=1):
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise DatasetFormatError(
                        f"{path}:{lineno}: column {col} ({header[col - 1]!r}) is not numeric: {cell!r}"
                    ) from None
            try:
                label = int(row[-1])
            except ValueError:
                raise DatasetFormatError(
                    f"{path}:{lineno}: label column {header[-1]!r} is not an integer: {row[-1]!r}"
                ) from None
            if label < 0:
                raise DatasetFormatError(f"{path}:{lineno}: negative label {label}")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    labels = np.array(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    if labels.max() >= k:
        raise DatasetFormatError(f"{path}: label {labels.max()} >= num_classes {k}")
    return Dataset(np.array(rows, dtype=np.float64), labels, split, k)


def _csv_task(spec):
    k = spec.params.get("num_classes")
    if "test_path" in spec.params:
        return (
            load_csv(spec.params["path"], k, "train"),
            load_csv(spec.params["test_path"], k, "test"),
        )
    full = load_csv(spec.params["path"], k)
    order = np.random.default_rng(spec.seed).permutation(len(full))
    n_test = int(round(len(full) * float(spec.params.get("test_fraction", 1 / 3))))
    test_idx, train_idx = order[:n_test], order[n_test:]
    return (
        Dataset(full.features[train_idx], full.labels[train_idx], "train", full.num_classes),
        Dataset(full.features[test_idx], full.labels[test_idx], "test", full.num_classes),
    )


def generate_task(spec: TaskSpec):
    """Return ``(train, test)`` datasets for one task."""
    if spec.kind == "csv":
        return _csv_task(spec)
    means = task_means(spec) if spec.kind == "rotated-gaussians" else base_means(spec)
    train = _gaussian_split(spec, means, "train", spec.samples_per_class)
    test = _gaussian_split(spec, means, "test", spec.test_samples_per_class)
    if spec.kind == "permuted-features":
        perm = _permutation(spec.params.get("permutation_seed", spec.seed), means.shape[1])
        train, test = (
            Dataset(d.features[:, perm], d.labels, d.split, d.num_classes) for d in (train, test)
        )
    elif spec.kind == "label-remap":
        mapping = spec.params.get("mapping")
        if mapping is None:
            mapping = _permutation(spec.params.get("remap_seed", spec.seed), means.shape[0])
        mapping = np.asarray(mapping, dtype=np.int64)
        train, test = (
            Dataset(d.features, mapping[d.labels], d.split, d.num_classes) for d in (train, test)
        )
    return train, test


def iter_stream(order: StreamOrder):
    """Yield ``(train, test)`` per task, generated on demand."""
    shape = None
    for i, spec in enumerate(order.tasks):
        train, test = generate_task(spec)
        if shape is None:
            shape = (train.n_features, train.num_classes)
        elif (train.n_features, train.num_classes) != shape:
            raise ValueError(
                f"task {i} has (features, classes) = {(train.n_features, train.num_classes)}, "
                f"stream expects {shape}"
            )
        yield train, test


def make_stream(order: StreamOrder):
    return list(iter_stream(order))


def interference_stream(n_tasks=2, angle_step=np.pi / 2, seed=0, **params):
    """Rotated-Gaussian tasks whose means turn by ``angle_step`` per task."""
    tasks = [
        TaskSpec(
            "rotated-gaussians",
            {**params, "angle": float(i * angle_step)},
            seed=seed * 1000 + i,
        )
        for i in range(n_tasks)
    ]
    return StreamOrder(tasks, name="interference")
