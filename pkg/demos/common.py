"""Shared setup for the demo scripts.

Every demo works on the same small synthetic image task: 16x16 RGB images
in four classes. The first demo that needs a trained model trains one and
caches the checkpoint under demos/artifacts/, so later demos start fast.
"""

from pathlib import Path

from exitnet import models, training
from exitnet.checkpoint import load_checkpoint, save_checkpoint
from exitnet.data import synthetic_dataset

ARTIFACTS = Path(__file__).resolve().parent / "artifacts"
INPUT_SHAPE = (16, 16, 3)
CLASS_COUNT = 4


def demo_dataset(count=800, seed=3):
    return synthetic_dataset(count, class_count=CLASS_COUNT,
                             input_shape=INPUT_SHAPE, seed=seed)


def demo_spec(family="plain-conv"):
    return models.ArchitectureSpec(family=family,
                                   stages=((8, 2), (16, 2), (32, 2)),
                                   input_shape=INPUT_SHAPE,
                                   class_count=CLASS_COUNT,
                                   exit_positions=(2, 4, 6))


def get_trained_model(family="plain-conv", epochs=8, seed=1):
    """Train (or reload) a three-exit model on the demo task."""
    ARTIFACTS.mkdir(exist_ok=True)
    path = ARTIFACTS / f"{family}.ckpt"
    if path.exists():
        print(f"[common] reusing cached checkpoint {path}")
        return load_checkpoint(path)
    print(f"[common] training a {family} model ({epochs} epochs) ...")
    model = models.build_model(demo_spec(family), seed=seed)
    cfg = training.TrainingConfig(epochs=epochs, batch_size=32,
                                  learning_rate=0.05, seed=0)
    model, report = training.train(model, demo_dataset(), cfg)
    accs = ", ".join(f"exit {i + 1}: {a:.2f}"
                     for i, a in enumerate(report.per_exit_accuracy))
    print(f"[common] held-out accuracy per exit -> {accs}")
    save_checkpoint(model, path)
    print(f"[common] saved {path}")
    return model
