"""Image encoder with per-subspace linear heads and a dCor penalty.

The encoder maps an image to a latent vector ``w`` that is split into named
subspaces.  Each supervised subspace feeds its own linear classifier, and
the subspaces are pushed apart by the mean pairwise distance correlation::

    loss = mean_k CE(head_k(w_k), y_k) + lambda_dc * mean_{i<j} dCor(w_i, w_j)
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dependence
from .errors import ConfigError, DataError, NumericalAbort, ShapeError
from .layout import SubspaceLayout

logger = logging.getLogger(__name__)


@dataclass
class EncoderTrainConfig:
    lambda_dc: float = 0.5
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 8e-3
    epochs: int = 20
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    widths: tuple[int, ...] = (16, 32, 64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.lambda_dc < 0:
            raise ConfigError("lambda_dc must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for the dCor term")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        self.betas = tuple(self.betas)
        self.widths = tuple(self.widths)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.skip(x))


class ResNetTrunk(nn.Module):
    """Small residual network: one block per stage, stride 2 after the first stage."""

    def __init__(self, widths=(16, 32, 64, 64), in_channels=3):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(widths[0]), nn.ReLU())
        blocks, c_in = [], widths[0]
        for i, c_out in enumerate(widths):
            blocks.append(BasicBlock(c_in, c_out, 1 if i == 0 else 2))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.out_features = c_in

    def forward(self, x):
        return self.blocks(self.stem(x)).mean(dim=(2, 3))


class SubspaceEncoder(nn.Module):
    """Feature encoder f_theta plus linear heads C_psi_k."""

    def __init__(self, layout: SubspaceLayout, resolution: int, widths=(16, 32, 64, 64), in_channels=3):
        super().__init__()
        self.layout = layout
        self.resolution = resolution
        self.trunk = ResNetTrunk(widths, in_channels)
        self.project = nn.Linear(self.trunk.out_features, layout.total)
        self.heads = nn.ModuleDict({
            name: nn.Linear(layout.dims[layout.index(name)], n_classes)
            for name, n_classes in layout.classes.items()
        })

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[-1] != self.resolution or images.shape[-2] != self.resolution:
            raise ShapeError(f"expected (n, c, {self.resolution}, {self.resolution}) images, "
                             f"got {tuple(images.shape)}")
        return self.project(F.relu(self.trunk(images)))

    def forward(self, images):
        return self.encode(images)

    def logits(self, w: torch.Tensor) -> dict[str, torch.Tensor]:
        parts = self.layout.as_dict(w)
        return {name: head(parts[name]) for name, head in self.heads.items()}


def encode(model: SubspaceEncoder, images, batch_size: int = 512) -> np.ndarray:
    """Evaluation-mode latents for a stack of images, as a float64 array."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = torch.as_tensor(np.asarray(images[start:start + batch_size]), dtype=torch.float32)
            out.append(model.encode(chunk).double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.layout.total))


def classification_loss(logits: dict[str, torch.Tensor], labels: dict) -> torch.Tensor:
    """Mean over supervised subspaces of the softmax cross-entropy."""
    if not logits:
        raise ConfigError("no supervised subspaces")
    losses = []
    for name, logit in logits.items():
        if name not in labels:
            raise DataError(f"missing labels for subspace {name!r}")
        y = torch.as_tensor(labels[name], dtype=torch.long)
        if y.numel() and (y.min() < 0 or y.max() >= logit.shape[-1]):
            raise DataError(f"labels for {name!r} outside [0, {logit.shape[-1]})")
        losses.append(F.cross_entropy(logit, y))
    return torch.stack(losses).mean()


def total_encoder_loss(model: SubspaceEncoder, images, labels, lambda_dc: float):
    """L_CE + lambda_dc * L_DC, with the components in a dict of floats.

    Heads only see the latent values, so the dCor term never reaches them.
    """
    w = model.encode(images)
    ce = classification_loss(model.logits(w), labels)
    if model.layout.k >= 2:
        dc = dependence.disentanglement_loss(model.layout.split(w))
    else:
        dc = torch.zeros((), dtype=torch.float64)
    total = ce + lambda_dc * dc.to(ce.dtype)
    parts = {"ce": ce.item(), "dc": dc.item(), "total": total.item()}
    return total, parts, w


@dataclass
class EncoderEpochLog:
    epoch: int
    train: dict
    val: dict


@dataclass
class TrainedEncoder:
    model: SubspaceEncoder
    config: EncoderTrainConfig
    log: list[EncoderEpochLog] = field(default_factory=list)
    best_epoch: int = -1

    def log_dicts(self) -> list[dict]:
        return [asdict(e) for e in self.log]


def _labels_tensor(batch, index):
    return {k: torch.as_tensor(v[index], dtype=torch.long) for k, v in batch.labels.items()}


def evaluate_encoder_loss(model, batch, config: EncoderTrainConfig) -> dict:
    """Validation losses and per-subspace accuracies over a whole split."""
    model.eval()
    n = len(batch)
    sums = {"ce": 0.0, "dc": 0.0, "total": 0.0}
    correct = {name: 0 for name in model.layout.supervised}
    count = 0
    with torch.no_grad():
        for start in range(0, n, config.batch_size):
            index = np.arange(start, min(n, start + config.batch_size))
            if len(index) < 2:
                continue
            images = torch.as_tensor(batch.images[index])
            labels = _labels_tensor(batch, index)
            _, parts, w = total_encoder_loss(model, images, labels, config.lambda_dc)
            for k in sums:
                sums[k] += parts[k] * len(index)
            for name, logit in model.logits(w).items():
                correct[name] += int((logit.argmax(1) == labels[name]).sum())
            count += len(index)
    out = {k: v / max(count, 1) for k, v in sums.items()}
    out.update({f"acc_{k}": v / max(count, 1) for k, v in correct.items()})
    return out


def train_encoder(splits: dict, layout: SubspaceLayout, config: EncoderTrainConfig,
                  progress=None, checkpoint=None, resume: dict | None = None) -> TrainedEncoder:
    """Train with Adam; keep the epoch with the lowest total validation loss.

    ``checkpoint(state)`` receives the full training state after every epoch;
    passing that state back as ``resume`` continues the run where it stopped.
    """
    train, val = splits["train"], splits["val"]
    torch.manual_seed(config.seed)
    model = SubspaceEncoder(layout, train.resolution, config.widths, train.images.shape[1])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas,
                                 eps=config.eps, weight_decay=config.weight_decay)
    shuffler = torch.Generator().manual_seed(config.seed)
    result = TrainedEncoder(model, config)
    best_loss, best_state = math.inf, None
    first_epoch = 0
    if resume is not None:
        model.load_state_dict(resume["model"])
        optimizer.load_state_dict(resume["optimizer"])
        shuffler.set_state(resume["shuffler"])
        best_loss, best_state = resume["best_loss"], resume["best_state"]
        result.best_epoch = resume["best_epoch"]
        result.log = [EncoderEpochLog(**e) for e in resume["log"]]
        first_epoch = resume["epoch"] + 1
    n = len(train)
    for epoch in range(first_epoch, config.epochs):
        model.train()
        order = torch.randperm(n, generator=shuffler).numpy()
        sums = {"ce": 0.0, "dc": 0.0, "total": 0.0}
        correct = {name: 0 for name in layout.supervised}
        seen = 0
        for batch_id, start in enumerate(range(0, n, config.batch_size)):
            index = order[start:start + config.batch_size]
            if len(index) < 2:
                continue
            images = torch.as_tensor(train.images[index])
            labels = _labels_tensor(train, index)
            loss, parts, w = total_encoder_loss(model, images, labels, config.lambda_dc)
            if not math.isfinite(parts["total"]):
                raise NumericalAbort("non-finite encoder loss", {
                    "epoch": epoch, "batch": batch_id, "lambda_dc": config.lambda_dc, **parts})
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for k in sums:
                sums[k] += parts[k] * len(index)
            with torch.no_grad():
                for name, logit in model.logits(w).items():
                    correct[name] += int((logit.argmax(1) == labels[name]).sum())
            seen += len(index)
        train_log = {k: v / seen for k, v in sums.items()}
        train_log.update({f"acc_{k}": v / seen for k, v in correct.items()})
        val_log = evaluate_encoder_loss(model, val, config)
        result.log.append(EncoderEpochLog(epoch, train_log, val_log))
        logger.info("epoch %d train %s val %s", epoch, train_log, val_log)
        if progress:
            progress(epoch, train_log, val_log)
        if val_log["total"] < best_loss:
            best_loss, best_state = val_log["total"], copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
        if checkpoint:
            checkpoint({"epoch": epoch, "model": model.state_dict(), "optimizer": optimizer.state_dict(),
                        "shuffler": shuffler.get_state(), "best_loss": best_loss, "best_state": best_state,
                        "best_epoch": result.best_epoch, "log": result.log_dicts()})
    model.load_state_dict(best_state)
    model.eval()
    return result


def save_encoder(trained: TrainedEncoder, path) -> None:
    """Layout, resolution, config, weights and epoch log in one torch archive."""
    model = trained.model
    torch.save({
        "kind": "encoder",
        "layout": model.layout.to_dict(),
        "resolution": model.resolution,
        "in_channels": model.trunk.stem[0].in_channels,
        "config": asdict(trained.config),
        "state_dict": model.state_dict(),
        "log": trained.log_dicts(),
        "best_epoch": trained.best_epoch,
    }, path)


def load_encoder(path) -> TrainedEncoder:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "encoder":
        raise ConfigError(f"{path} is not an encoder checkpoint")
    config = EncoderTrainConfig(**blob["config"])
    model = SubspaceEncoder(SubspaceLayout.from_dict(blob["layout"]), blob["resolution"],
                            config.widths, blob["in_channels"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    log = [EncoderEpochLog(**e) for e in blob["log"]]
    return TrainedEncoder(model, config, log, blob["best_epoch"])
