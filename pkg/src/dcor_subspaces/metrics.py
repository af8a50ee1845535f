"""Disentanglement and image-quality metrics.

* :func:`knn_confusion` fits a k-nearest-neighbour classifier on every
  (subspace, factor) pair and reports accuracy above chance in points.
* :func:`pairwise_dcor_report` gives the K x K distance correlation matrix
  between subspaces.
* :func:`frechet_feature_distance` compares two image sets through the
  Gaussian moments of a pluggable feature extractor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.neighbors import NearestNeighbors
from torch import nn

from . import dependence
from .errors import ConfigError, ShapeError

SCHEMA_VERSION = 1
DCOR_SUBSAMPLE = 4096
KNN_PROTOCOL = "fit on training-split embeddings, score on test split"


def chance_level(labels) -> float:
    """Majority-class frequency of ``labels`` in percent."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigError("chance level of an empty label vector")
    _, counts = np.unique(labels, return_counts=True)
    return 100.0 * counts.max() / labels.size


def knn_predict(train_x, train_y, test_x, k: int = 30) -> np.ndarray:
    """Majority vote of the k Euclidean nearest neighbours; ties go to the smallest class."""
    train_x = np.asarray(train_x, dtype=np.float64).reshape(len(train_x), -1)
    test_x = np.asarray(test_x, dtype=np.float64).reshape(len(test_x), -1)
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_x) < k:
        raise ConfigError(f"kNN with k={k} needs at least {k} training points, got {len(train_x)}")
    if train_y.min() < 0:
        raise ConfigError("labels must be non-negative class indices")
    index = NearestNeighbors(n_neighbors=k).fit(train_x).kneighbors(test_x, return_distance=False)
    votes = train_y[index]
    n_classes = int(train_y.max()) + 1
    counts = np.zeros((len(test_x), n_classes), dtype=np.int64)
    np.add.at(counts, (np.arange(len(test_x))[:, None], votes), 1)
    return counts.argmax(axis=1)


@dataclass
class DisentanglementReport:
    subspaces: list[str]
    factors: list[str]
    confusion: list[list[float]]
    accuracy: list[list[float]]
    chance: list[float]
    pairwise_dcor: list[list[float]] | None = None
    metadata: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def cell(self, subspace: str, factor: str) -> float:
        return self.confusion[self.subspaces.index(subspace)][self.factors.index(factor)]

    def mean_offdiagonal_dcor(self) -> float:
        if self.pairwise_dcor is None:
            raise ConfigError("report has no pairwise dCor matrix")
        m = np.asarray(self.pairwise_dcor)
        return float(m[np.triu_indices(len(m), 1)].mean())

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "DisentanglementReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported report schema {d.get('schema_version')}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "DisentanglementReport":
        return cls.from_dict(json.loads(text))


def knn_confusion(train_embeddings: dict, train_labels: dict, test_embeddings: dict, test_labels: dict,
                  k: int = 30) -> DisentanglementReport:
    """Accuracy above chance (points) of every subspace at predicting every factor.

    Rows follow the order of ``train_embeddings``, columns that of ``train_labels``.
    Chance is the majority-class frequency on the test split.
    """
    subspaces, factors = list(train_embeddings), list(train_labels)
    if set(subspaces) != set(test_embeddings) or set(factors) != set(test_labels):
        raise ConfigError("train and test must name the same subspaces and factors")
    chance = [chance_level(test_labels[f]) for f in factors]
    accuracy, confusion = [], []
    for s in subspaces:
        if len(train_embeddings[s]) != len(train_labels[factors[0]]):
            raise ShapeError(f"subspace {s!r} and labels disagree on the number of training points")
        row_acc, row_conf = [], []
        for f, c in zip(factors, chance):
            pred = knn_predict(train_embeddings[s], train_labels[f], test_embeddings[s], k)
            acc = 100.0 * float(np.mean(pred == np.asarray(test_labels[f])))
            row_acc.append(acc)
            row_conf.append(acc - c)
        accuracy.append(row_acc)
        confusion.append(row_conf)
    return DisentanglementReport(subspaces, factors, confusion, accuracy, chance,
                                 metadata={"k": k, "protocol": KNN_PROTOCOL})


def pairwise_dcor_report(subspaces: dict | list, max_samples: int = DCOR_SUBSAMPLE, seed: int = 0) -> np.ndarray:
    """Symmetric K x K dCor matrix with unit diagonal.

    Above ``max_samples`` rows, a fixed-seed subsample of that size is used
    because the estimator needs n x n distance matrices.
    """
    parts = list(subspaces.values()) if isinstance(subspaces, dict) else list(subspaces)
    n = len(parts[0])
    if any(len(p) != n for p in parts):
        raise ShapeError("all subspaces need the same number of samples")
    if n > max_samples:
        keep = np.sort(np.random.default_rng(seed).choice(n, size=max_samples, replace=False))
        parts = [np.asarray(p)[keep] for p in parts]
    return dependence.pairwise_dcor_matrix(parts)


# Frechet feature distance

class RandomConvExtractor(nn.Module):
    """Fixed random-weight conv net; 64-d features from global average pooling."""

    def __init__(self, seed: int = 0, width: int = 32, out_features: int = 64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, out_features, 3, 2, 1), nn.LeakyReLU(0.2),
        )
        with torch.no_grad():
            for p in self.parameters():
                # He-style gain keeps feature variance of order one through the depth
                p.copy_(torch.randn(p.shape, generator=gen) * ((2.0 / p[0].numel()) ** 0.5 if p.ndim > 1 else 0.1))
        self.seed = seed
        self.requires_grad_(False)
        self.eval()

    def forward(self, images):
        return self.net(images).mean(dim=(2, 3))


class EncoderTrunkExtractor(nn.Module):
    """Features from a trained encoder trunk."""

    def __init__(self, trunk: nn.Module):
        super().__init__()
        self.trunk = trunk

    def forward(self, images):
        return self.trunk(images)


def extractor_fingerprint(extractor: nn.Module) -> str:
    """sha256 over the class name and every parameter and buffer."""
    h = hashlib.sha256(type(extractor).__name__.encode())
    for name, t in sorted(extractor.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def extract_features(extractor: nn.Module, images, batch_size: int = 256) -> np.ndarray:
    was_training = extractor.training
    extractor.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = torch.as_tensor(np.asarray(images[start:start + batch_size]), dtype=torch.float32)
            out.append(extractor(chunk).double().numpy())
    extractor.train(was_training)
    return np.concatenate(out)


@dataclass
class FrechetResult:
    value: float
    jitter: bool
    fingerprint: str
    n_real: int
    n_generated: int

    def to_dict(self) -> dict:
        return asdict(self)


def _sqrt_psd(m):
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_features(fr: np.ndarray, fg: np.ndarray, jitter_eps: float = 1e-6) -> tuple[float, bool]:
    """||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^(1/2)) and whether jitter was added.

    tr (S_r S_g)^(1/2) is computed as tr (S_r^(1/2) S_g S_r^(1/2))^(1/2), whose
    argument is symmetric, with negative eigenvalues clipped to 0.
    """
    fr, fg = np.asarray(fr, dtype=np.float64), np.asarray(fg, dtype=np.float64)
    if len(fr) < 2 or len(fg) < 2:
        raise ConfigError("Frechet distance needs at least 2 samples per side")
    if fr.shape[1] != fg.shape[1]:
        raise ShapeError("feature widths differ")
    mu_r, mu_g = fr.mean(0), fg.mean(0)
    cov_r, cov_g = np.atleast_2d(np.cov(fr, rowvar=False)), np.atleast_2d(np.cov(fg, rowvar=False))
    d = cov_r.shape[0]
    jitter = False
    for cov in (cov_r, cov_g):
        vals = np.linalg.eigvalsh(cov)
        if vals.min() <= 1e-12 * max(vals.max(), 1.0):
            jitter = True
    if jitter:
        cov_r = cov_r + jitter_eps * np.eye(d)
        cov_g = cov_g + jitter_eps * np.eye(d)
    root_r = _sqrt_psd(cov_r)
    middle = root_r @ cov_g @ root_r
    tr_sqrt = float(np.sqrt(np.clip(np.linalg.eigvalsh((middle + middle.T) / 2), 0.0, None)).sum())
    value = float(((mu_r - mu_g) ** 2).sum() + np.trace(cov_r) + np.trace(cov_g) - 2.0 * tr_sqrt)
    return max(value, 0.0), jitter


def frechet_feature_distance(real_images, generated_images, extractor: nn.Module | None = None) -> FrechetResult:
    extractor = extractor if extractor is not None else RandomConvExtractor()
    fr = extract_features(extractor, real_images)
    fg = extract_features(extractor, generated_images)
    value, jitter = frechet_from_features(fr, fg)
    return FrechetResult(value, jitter, extractor_fingerprint(extractor), len(fr), len(fg))


# reports

@dataclass
class SwapEvalReport:
    standard: float
    swapped_new_labels: float
    swapped_original_labels: float
    chance: float
    factor: str
    metadata: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in ("standard", "swapped_new_labels", "swapped_original_labels"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ConfigError(f"{name} accuracy {v} outside [0, 100]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SwapEvalReport":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported report schema {d.get('schema_version')}")
        return cls(**d)


def save_confusion_heatmap(report: DisentanglementReport, path) -> Path:
    """Annotated heatmap of the confusion matrix as a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = np.asarray(report.confusion)
    fig, ax = plt.subplots(figsize=(1.4 * len(report.factors) + 1.5, 1.1 * len(report.subspaces) + 1.0))
    im = ax.imshow(m, cmap="viridis", vmin=min(0.0, m.min()), vmax=max(1.0, m.max()))
    ax.set_xticks(range(len(report.factors)), report.factors)
    ax.set_yticks(range(len(report.subspaces)), report.subspaces)
    ax.set_xlabel("label")
    ax.set_ylabel("subspace")
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            ax.text(j, i, f"{m[i, j]:.1f}", ha="center", va="center", color="w" if m[i, j] < m.max() / 2 else "k")
    fig.colorbar(im, ax=ax, label="accuracy above chance (points)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


# swap-classifier protocol

@dataclass
class SwapClassifierConfig:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    widths: tuple[int, int] = (16, 32)
    noise_seed: int = 0
    seed: int = 0


class SmallClassifier(nn.Module):
    def __init__(self, n_classes: int, widths=(16, 32), in_channels: int = 3):
        super().__init__()
        a, b = widths
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, a, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(a, b, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(b, b, 3, padding=1), nn.ReLU(), nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(b, n_classes),
        )

    def forward(self, x):
        return self.net(x)


def train_classifier(images, labels, n_classes: int, config: SwapClassifierConfig) -> SmallClassifier:
    torch.manual_seed(config.seed)
    model = SmallClassifier(n_classes, config.widths, images.shape[1])
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    x = torch.as_tensor(images, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    gen = torch.Generator().manual_seed(config.seed)
    model.train()
    for _ in range(config.epochs):
        order = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), config.batch_size):
            idx = order[i:i + config.batch_size]
            loss = nn.functional.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.eval()


def classifier_accuracy(model: nn.Module, images, labels, batch_size: int = 512) -> float:
    x = torch.as_tensor(images, dtype=torch.float32)
    with torch.no_grad():
        pred = torch.cat([model(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])
    return 100.0 * float((pred.numpy() == np.asarray(labels)).mean())


def swap_classifier_eval(bundle, train_set, test_set, factor: str,
                         config: SwapClassifierConfig | None = None) -> SwapEvalReport:
    """Classifier trained on reconstructions, scored on three test scenarios.

    1. reconstructions of the test split against their labels;
    2. rotate-swap reconstructions (the ``factor`` subspace shifted by one
       over the whole test split) against the reassigned labels;
    3. the same swapped images against the original labels.
    """
    from .errors import ProtocolError
    from .gan import reconstruct, rotate_swap_protocol

    config = config or SwapClassifierConfig()
    if not getattr(bundle, "trained", False):
        raise ProtocolError("swap evaluation needs a trained GAN bundle")
    if factor not in bundle.layout.names or factor not in test_set.labels:
        raise ConfigError(f"factor {factor!r} must be both a subspace and a labelled factor")
    n_classes = bundle.layout.classes.get(factor) or int(max(train_set.labels[factor].max(),
                                                             test_set.labels[factor].max())) + 1
    rec_train = reconstruct(bundle, train_set.images, config.noise_seed)
    model = train_classifier(rec_train, train_set.labels[factor], n_classes, config)
    original = np.asarray(test_set.labels[factor])
    rec_test = reconstruct(bundle, test_set.images, config.noise_seed + 1)
    swapped, new_labels, _ = rotate_swap_protocol(bundle, test_set.images, test_set.labels, factor,
                                                  config.noise_seed + 1)
    return SwapEvalReport(
        standard=classifier_accuracy(model, rec_test, original),
        swapped_new_labels=classifier_accuracy(model, swapped, new_labels[factor]),
        swapped_original_labels=classifier_accuracy(model, swapped, original),
        chance=chance_level(original),
        factor=factor,
        metadata={"classifier": {**asdict(config), "widths": list(config.widths)}, "n_train": len(train_set), "n_test": len(test_set),
                  "rotation": "shift by one over the test split"},
    )
