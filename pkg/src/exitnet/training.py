"""Joint training of all exits with SGD plus momentum.

The loss is a weighted sum of per-exit cross-entropies; weights default
to i/N so deeper exits dominate. Batch order is drawn from the config
seed, making runs bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, train_validation_split
from .models import MultiExitModel


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    decay_factor: float = 0.5
    decay_every: int = 10  # epochs between learning-rate steps
    exit_loss_weights: tuple[float, ...] | None = None  # default w_i = i/N
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be > 0 and momentum in [0, 1)")
        if not 0 < self.decay_factor <= 1 or self.decay_every < 1:
            raise ValueError("decay_factor in (0, 1] and decay_every >= 1")
        if self.exit_loss_weights is not None:
            w = self.exit_loss_weights
            if any(v < 0 for v in w):
                raise ValueError("exit loss weights must be nonnegative")
            if w[-1] <= 0:
                raise ValueError("final-exit loss weight must be positive")

    def weights_for(self, exit_count: int) -> tuple[float, ...]:
        if self.exit_loss_weights is None:
            return tuple((i + 1) / exit_count for i in range(exit_count))
        if len(self.exit_loss_weights) != exit_count:
            raise ValueError(f"expected {exit_count} exit loss weights")
        return self.exit_loss_weights


@dataclass
class TrainingReport:
    epoch_losses: list[float] = field(default_factory=list)
    per_exit_accuracy: list[float] = field(default_factory=list)  # held-out, one per exit
    val_count: int = 0


def evaluate_per_exit(model: MultiExitModel, images: np.ndarray, labels: np.ndarray,
                      batch_size: int = 256) -> list[float]:
    """Accuracy of each exit head over the given samples."""
    n = images.shape[0]
    correct = np.zeros(model.exit_count, dtype=np.int64)
    for start in range(0, n, batch_size):
        xb = Tensor(images[start : start + batch_size])
        yb = labels[start : start + batch_size]
        for i, logits in enumerate(model.forward_all(xb)):
            correct[i] += int((logits.data.argmax(axis=1) == yb).sum())
    return [c / n for c in correct]


def train(model: MultiExitModel, dataset: Dataset, config: TrainingConfig) -> tuple[MultiExitModel, TrainingReport]:
    """Optimize in place and report held-out per-exit accuracy."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if int(dataset.labels.max()) >= model.spec.class_count:
        raise ValueError("dataset label outside the model's class range")
    weights = config.weights_for(model.exit_count)
    report = TrainingReport()
    train_set, val_set = train_validation_split(dataset, config.val_fraction, config.seed)

    if config.epochs > 0:
        params = model.trainables()
        velocity = [np.zeros_like(p.data) for p in params]
        rng = np.random.default_rng(config.seed)
        lr = config.learning_rate
        for epoch in range(config.epochs):
            if epoch > 0 and epoch % config.decay_every == 0:
                lr *= config.decay_factor
            order = rng.permutation(len(train_set))
            epoch_loss = 0.0
            batches = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                xb = Tensor(train_set.images[idx])
                yb = train_set.labels[idx]
                try:
                    logits = model.forward_all(xb, training=True)
                    loss = None
                    for w, exit_logits in zip(weights, logits):
                        if w == 0.0:
                            continue
                        term = ad.cross_entropy(exit_logits, yb) * w
                        loss = term if loss is None else loss + term
                    loss.backward()
                except FloatingPointError as exc:
                    raise TrainingDiverged(epoch, str(exc)) from exc
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(epoch, f"loss={loss.item()}")
                epoch_loss += loss.item()
                batches += 1
                for p, v in zip(params, velocity):
                    if p.grad is None:
                        continue  # parameter not reached by any weighted loss term
                    v *= config.momentum
                    v -= lr * p.grad
                    p.data += v
                    p.zero_grad()
            report.epoch_losses.append(epoch_loss / max(batches, 1))

    report.per_exit_accuracy = evaluate_per_exit(model, val_set.images, val_set.labels)
    report.val_count = len(val_set)
    return model, report
