"""Architectures, the train/validate loop and inference."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .imaging import IMAGE_SIZE
from .nn import AdamState, LayerSpec, Network, adam_step, cross_entropy, loss_and_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    conv_layers: int
    fc_neurons: int
    kernels: int = 32
    kernel_size: int = 3
    dropout: float = 0.7
    l2: float = 0.01

    @property
    def name(self) -> str:
        for name, spec in ARCHITECTURES.items():
            if (spec.conv_layers, spec.fc_neurons) == (self.conv_layers, self.fc_neurons):
                return name
        return f"conv{self.conv_layers}_fc{self.fc_neurons}"

    def layers(self) -> list[LayerSpec]:
        out: list[LayerSpec] = []
        k = self.kernel_size
        for _ in range(self.conv_layers):
            out += [
                LayerSpec("conv2d", kernels=self.kernels, kernel_size=(k, k), padding="same"),
                LayerSpec("relu"),
                LayerSpec("maxpool2d", window=2),
            ]
        out += [
            LayerSpec("flatten"),
            LayerSpec("dropout", rate=self.dropout),
            LayerSpec("dense", units=self.fc_neurons, l2=self.l2, init="glorot_uniform"),
            LayerSpec("relu"),
            LayerSpec("dense", units=2, init="glorot_uniform"),
            LayerSpec("softmax"),
        ]
        return out


ARCHITECTURES: dict[str, ArchitectureSpec] = {
    "Arch1": ArchitectureSpec(4, 64),
    "Arch2": ArchitectureSpec(4, 128),
    "Arch3": ArchitectureSpec(4, 256),
    "Arch4": ArchitectureSpec(3, 64),
    "Arch5": ArchitectureSpec(3, 128),
    "Arch6": ArchitectureSpec(3, 256),
}


def get_architecture(name: str) -> ArchitectureSpec:
    try:
        return ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {', '.join(ARCHITECTURES)}") from None


def build_model(spec: ArchitectureSpec, seed: int, image_size: int = IMAGE_SIZE) -> Network:
    return Network(spec.layers(), (image_size, image_size, 1), seed=seed)


@dataclass
class TrainingConfig:
    max_epochs: int = 150
    patience: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-4
    seed: int = 0
    image_size: int = IMAGE_SIZE

    def __post_init__(self) -> None:
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for e, row in enumerate(zip(self.train_loss, self.val_loss, self.val_acc)):
                w.writerow([e, *(repr(float(v)) for v in row)])


def predict(model: Network, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Class probabilities ``(b, 2)`` with dropout disabled."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return model.predict_proba(images, chunk=chunk)


def evaluate(model: Network, images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Validation loss (cross-entropy + L2) and accuracy at 0.5 on class 1."""
    probs = predict(model, images).astype(np.float64)
    loss = cross_entropy(probs, labels) + model.l2_penalty()
    acc = float(np.mean((probs[:, 1] >= 0.5) == (labels[:, 1] == 1)))
    return loss, acc


def train(
    model: Network,
    train_iter,
    val_set: tuple[np.ndarray, np.ndarray],
    cfg: TrainingConfig,
) -> tuple[Network, TrainingHistory]:
    """Adam training with early stopping on validation loss.

    ``train_iter`` must provide ``epoch(e)`` yielding ``(images, one_hot)``
    batches. The returned network is a copy of the best-validation-loss
    weights; ``model`` itself holds the final weights.
    """
    val_x, val_y = val_set
    state = AdamState(lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 0x64726F70])  # dropout stream
    history = TrainingHistory()
    best = model.copy()
    best_loss = np.inf
    stale = 0
    for epoch in range(cfg.max_epochs):
        losses, sizes = [], []
        for b, (x, y) in enumerate(train_iter.epoch(epoch)):
            loss, grads = loss_and_grad(model, x, y, rng=rng, training=True)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_step(model.params, grads, state)
            losses.append(loss)
            sizes.append(len(x))
        train_loss = float(np.average(losses, weights=sizes))
        val_loss, val_acc = evaluate(model, val_x, val_y)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.3f", epoch, train_loss, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss = val_loss
            best = model.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history
