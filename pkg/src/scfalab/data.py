"""Synthetic data generation and Dirichlet label-skew partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .errors import ConfigError
from .rng import stream

# logistic(1.702 z) approximates the standard normal CDF to within 0.01
PROBIT_TO_LOGIT = 1.702


@dataclass(frozen=True)
class SynthSpec:
    num_samples: int
    feature_dim: int
    positive_rate: float = 0.3
    noise_std: float = 0.5
    ground_truth: tuple | None = None

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigError("must be >= 1", "data.num_samples")
        if not 0.0 < self.positive_rate < 1.0:
            raise ConfigError("must lie in (0, 1)", "data.positive_rate")
        if self.noise_std < 0:
            raise ConfigError("must be >= 0", "data.noise_std")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    true_params: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.true_params)


@dataclass
class ClientDataset:
    client_id: int
    X: np.ndarray
    y: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def n(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("must be >= 1", "partition.num_clients")
        if not self.alpha > 0:
            raise ConfigError("must be > 0", "partition.alpha")


@dataclass
class HeterogeneityReport:
    size_ratio: float
    positive_rates: np.ndarray
    divergence: float


def generate(spec: SynthSpec, seed: int, model: models.ModelSpec | None = None) -> Dataset:
    """Draw features from N(0, I) and labels from a ground-truth model.

    Default ground-truth weights are N(0, 1/p), giving unit score variance
    at any dimension.  Regression labels are the ground-truth prediction
    plus Gaussian noise.  Classification labels mark the top
    ``positive_rate`` fraction of the noisy scores as positive, so the
    realised positive rate is exact up to rounding.  For classifiers the
    returned ``true_params`` are the logistic model matching the implied
    probit ``P(y=1|x) = Phi((score - threshold) / noise_std)``, i.e. the
    thresholded truth scaled by 1.702 / noise_std (unscaled when noiseless).
    """
    if model is None:
        model = models.ModelSpec("logistic-regression", spec.feature_dim)
    if model.input_dim != spec.feature_dim:
        raise ConfigError("feature_dim must equal model.input_dim", "data.feature_dim")
    rng = stream(seed, "generate")
    if spec.ground_truth is not None:
        truth = np.asarray(spec.ground_truth, dtype=float)
        if truth.shape != (model.num_params,):
            raise ConfigError(f"expected {model.num_params} values", "data.ground_truth")
    elif model.kind == "mlp-1-hidden":
        truth = model.init_params(rng) * 3.0
    else:
        truth = np.append(rng.normal(0.0, 1.0 / np.sqrt(spec.feature_dim), spec.feature_dim), 0.0)
    X = rng.standard_normal((spec.num_samples, spec.feature_dim))
    score = models.decision(model, truth, X)
    noise = rng.standard_normal(spec.num_samples)
    if not model.is_classifier:
        return Dataset(X, score + spec.noise_std * noise, truth)

    noisy = score + spec.noise_std * noise
    k = max(1, int(round(spec.positive_rate * spec.num_samples)))
    order = np.argsort(-noisy, kind="stable")
    y = np.zeros(spec.num_samples)
    y[order[:k]] = 1.0
    threshold = noisy[order[k - 1]] if k >= spec.num_samples else 0.5 * (noisy[order[k - 1]] + noisy[order[k]])
    truth = truth.copy()
    truth[-1] -= threshold
    if spec.noise_std > 0 and model.kind != "mlp-1-hidden":
        truth *= PROBIT_TO_LOGIT / spec.noise_std
    return Dataset(X, y, truth)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("must lie in (0, 1)", "data.test_fraction")
    perm = stream(seed, "split").permutation(data.n)
    n_test = max(1, int(round(test_fraction * data.n)))
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def _label_classes(y: np.ndarray) -> np.ndarray:
    # continuous targets are split at the median into two pseudo-classes
    if np.all(y == np.round(y)) and len(np.unique(y)) <= 16:
        return y.astype(int)
    return (y > np.median(y)).astype(int)


def dirichlet_partition(data: Dataset, part: PartitionSpec) -> list[ClientDataset]:
    """Label-skew partition: per class, client shares ~ Dirichlet(alpha * 1_K).

    Within a class, samples are shuffled and cut by the floored shares; the
    leftover samples go round-robin by client id (the pointer carries over
    between classes).  Any client left empty then takes one sample from the
    currently largest client.
    """
    K = part.num_clients
    if data.n < K:
        raise ConfigError(f"{data.n} samples cannot cover {K} clients", "partition.num_clients")
    rng = stream(part.seed, "partition")
    classes = _label_classes(data.y)
    buckets: list[list[np.ndarray]] = [[] for _ in range(K)]
    pointer = 0
    for c in np.unique(classes):
        idx = rng.permutation(np.flatnonzero(classes == c))
        shares = rng.dirichlet(np.full(K, part.alpha))
        counts = np.floor(shares * len(idx)).astype(int)
        for _ in range(len(idx) - counts.sum()):
            counts[pointer % K] += 1
            pointer += 1
        for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[k].append(chunk)

    assigned = [np.sort(np.concatenate(b)) if b else np.empty(0, dtype=int) for b in buckets]
    for k in range(K):
        if len(assigned[k]) == 0:
            donor = int(np.argmax([len(a) for a in assigned]))
            assigned[k] = assigned[donor][-1:]
            assigned[donor] = assigned[donor][:-1]
    return [ClientDataset(k, data.X[ix], data.y[ix], ix) for k, ix in enumerate(assigned)]


def gradient_divergence(spec: models.ModelSpec, params: np.ndarray, partitions) -> float:
    """sqrt of the mean squared distance between local and global gradients."""
    grads = np.array([models.gradient(spec, params, c.X, c.y) for c in partitions])
    sizes = np.array([c.n for c in partitions], dtype=float)
    global_grad = (sizes / sizes.sum()) @ grads
    return float(np.sqrt(np.mean(np.sum((grads - global_grad) ** 2, axis=1))))


def heterogeneity_report(partitions, spec: models.ModelSpec, probe_params) -> HeterogeneityReport:
    partitions = list(partitions)
    if not partitions:
        raise ConfigError("no partitions")
    sizes = np.array([c.n for c in partitions], dtype=float)
    return HeterogeneityReport(
        size_ratio=float(sizes.max() / sizes.min()),
        positive_rates=np.array([float(np.mean(c.y)) for c in partitions]),
        divergence=gradient_divergence(spec, np.asarray(probe_params, float), partitions),
    )


def write_csv(data: Dataset, path) -> None:
    p = data.X.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"feature_{i}" for i in range(p)] + ["label"])
        for row, label in zip(data.X, data.y):
            writer.writerow([f"{v:.17g}" for v in row] + [f"{label:.17g}"])


def read_csv(path) -> Dataset:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ConfigError("last column must be 'label'", str(path))
        rows = np.array([[float(v) for v in r] for r in reader], dtype=float).reshape(-1, len(header))
    return Dataset(rows[:, :-1].copy(), rows[:, -1].copy())
