"""Surrogate-based black-box transfer pipeline.

The attacker never touches the target's internals: a label-only oracle
wraps the target, corrupted copies of held-out data are labeled through
it, a surrogate is trained on those hard labels, white-box attacks run
on the surrogate, and the resulting adversarial images are replayed
against the target. S2D means the surrogate is static and the target is
dynamic; D2S is the reverse.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import attacks as atk
from .autodiff import Tensor
from .data import Dataset, save_tensor_file, load_tensor_file
from .inference import ExitPolicy, infer_dynamic, trace_batch
from .models import ArchitectureSpec, MultiExitModel, build_model
from .training import TrainingConfig, train

GAUSSIAN_NOISE = "gaussian-noise"
BRIGHTNESS = "brightness"
CORRUPTION_KINDS = (GAUSSIAN_NOISE, BRIGHTNESS)

GAUSSIAN_SIGMA = (0.02, 0.04, 0.06, 0.08, 0.10)
BRIGHTNESS_SHIFT = (0.05, 0.10, 0.15, 0.20, 0.25)

STATIC = "sdnn"
DYNAMIC = "dynn"

S2D = "S2D"
D2S = "D2S"


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    level: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTION_KINDS}")
        if not 1 <= self.level <= 5:
            raise ValueError(f"corruption level {self.level} outside 1..5")

    @property
    def tag(self) -> str:
        return f"{self.kind}:{self.level}"


def corrupt(x: np.ndarray, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    """Apply one corruption at one intensity level, clipped back to [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("input values must lie in [0, 1]")
    if spec.kind == GAUSSIAN_NOISE:
        sigma = GAUSSIAN_SIGMA[spec.level - 1]
        noisy = x + np.random.default_rng(seed).normal(0.0, sigma, size=x.shape)
        return np.clip(noisy, 0.0, 1.0).astype(np.float32)
    shift = BRIGHTNESS_SHIFT[spec.level - 1]
    return np.clip(x + shift, 0.0, 1.0).astype(np.float32)


class LabelOracle:
    """Label-only view of a target model.

    The only thing callers can get out is hard labels, which is what keeps
    the pipeline honestly black-box: no logits, confidences, or gradients
    cross this boundary. Dynamic targets classify through their exit
    policy; static targets use the final exit.
    """

    def __init__(self, model: MultiExitModel, policy: ExitPolicy | None = None):
        self._model = model
        self._policy = policy
        self.query_count = 0

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self._model.spec.input_shape

    @property
    def class_count(self) -> int:
        return self._model.spec.class_count

    def labels(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise ValueError("expected a batch of images")
        self.query_count += int(images.shape[0])
        if self._policy is None:
            logits = self._model.static_forward(Tensor(images))
            return logits.data.argmax(axis=1).astype(np.int64)
        out = np.empty(images.shape[0], dtype=np.int64)
        for i in range(images.shape[0]):
            out[i] = infer_dynamic(self._model, images[i], self._policy).label
        return out


@dataclass(frozen=True)
class SurrogateDataset:
    """Harvested inputs, oracle labels, and a provenance tag per input."""

    images: np.ndarray  # (count, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (count,) int64, harvested hard labels
    provenance: tuple[str, ...]  # "original" or corruption tag per input
    class_count: int

    def __post_init__(self):
        n = self.images.shape[0]
        if self.labels.shape != (n,) or len(self.provenance) != n:
            raise ValueError("images, labels, provenance must align")

    def __len__(self) -> int:
        return self.images.shape[0]

    def as_dataset(self) -> Dataset:
        return Dataset(images=self.images, labels=self.labels, class_count=self.class_count)

    def save(self, tensor_path, provenance_path) -> None:
        save_tensor_file(tensor_path, self.as_dataset())
        with open(provenance_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["index", "provenance"])
            for i, tag in enumerate(self.provenance):
                writer.writerow([i, tag])

    @classmethod
    def load(cls, tensor_path, provenance_path) -> "SurrogateDataset":
        ds = load_tensor_file(tensor_path)
        with open(provenance_path, newline="") as f:
            rows = list(csv.reader(f))
        tags = tuple(row[1] for row in rows[1:])
        if len(tags) != len(ds):
            raise ValueError("provenance row count does not match tensor file")
        return cls(images=ds.images, labels=ds.labels, provenance=tags, class_count=ds.class_count)


def harvest_labels(oracle: LabelOracle, originals: np.ndarray,
                   kinds: Sequence[str] = CORRUPTION_KINDS, seed: int = 0) -> SurrogateDataset:
    """Label originals plus five corruption levels per kind through the oracle.

    Yields exactly originals x (1 + 5 x kinds) samples; only hard labels
    are stored.
    """
    originals = np.asarray(originals, dtype=np.float32)
    h, w, c = oracle.input_shape
    if originals.ndim != 4 or originals.shape[1:] != (c, h, w):
        raise ValueError(f"expected originals shaped (n, {c}, {h}, {w})")
    for kind in kinds:
        if kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {kind!r}")
    chunks = [originals]
    tags: list[str] = ["original"] * originals.shape[0]
    for kind_idx, kind in enumerate(kinds):
        for level in range(1, 6):
            spec = CorruptionSpec(kind=kind, level=level)
            batch = corrupt(originals, spec, seed=seed * 1000 + kind_idx * 10 + level)
            chunks.append(batch)
            tags.extend([spec.tag] * originals.shape[0])
    images = np.concatenate(chunks, axis=0)
    labels = oracle.labels(images)
    return SurrogateDataset(images=images, labels=labels, provenance=tuple(tags),
                            class_count=oracle.class_count)


@dataclass
class SurrogateReport:
    training_report: object
    probe_agreement: float  # fraction of held-out probe samples matching the oracle


def train_surrogate(spec: ArchitectureSpec, dataset: SurrogateDataset, config: TrainingConfig,
                    oracle: LabelOracle, probe_fraction: float = 0.1,
                    build: Callable[..., MultiExitModel] | None = None
                    ) -> tuple[MultiExitModel, SurrogateReport]:
    """Fit a fresh model to the harvested labels; report oracle agreement
    on a held-out probe slice never used for training."""
    if len(dataset) == 0:
        raise ValueError("empty surrogate dataset")
    builder = build or build_model
    model = builder(spec, seed=config.seed)
    n = len(dataset)
    order = np.random.default_rng(config.seed).permutation(n)
    n_probe = max(1, int(round(n * probe_fraction)))
    probe_idx, fit_idx = order[:n_probe], order[n_probe:]
    fit_set = Dataset(images=dataset.images[fit_idx], labels=dataset.labels[fit_idx],
                      class_count=dataset.class_count)
    model, report = train(model, fit_set, config)
    probe_images = dataset.images[probe_idx]
    surrogate_labels = model.static_forward(Tensor(probe_images)).data.argmax(axis=1)
    oracle_labels = oracle.labels(probe_images)
    agreement = float((surrogate_labels == oracle_labels).mean())
    return model, SurrogateReport(training_report=report, probe_agreement=agreement)


@dataclass(frozen=True)
class TransferPair:
    """Surrogate/target roles for one transfer experiment."""

    surrogate: MultiExitModel
    surrogate_type: str  # STATIC or DYNAMIC
    target: MultiExitModel
    target_type: str
    surrogate_policy: ExitPolicy | None = None  # required for dynamic surrogates
    target_policy: ExitPolicy | None = None  # required for dynamic targets

    def __post_init__(self):
        for t in (self.surrogate_type, self.target_type):
            if t not in (STATIC, DYNAMIC):
                raise ValueError(f"model type must be {STATIC!r} or {DYNAMIC!r}")
        if self.surrogate.spec.family == self.target.spec.family:
            raise ValueError("surrogate and target must come from different families")
        if self.surrogate.spec.input_shape != self.target.spec.input_shape:
            raise ValueError("surrogate and target input shapes differ")
        if self.surrogate_type == DYNAMIC and self.surrogate_policy is None:
            raise ValueError("dynamic surrogate needs an exit policy")
        if self.target_type == DYNAMIC and self.target_policy is None:
            raise ValueError("dynamic target needs an exit policy")

    @property
    def direction(self) -> str:
        return D2S if self.surrogate_type == DYNAMIC else S2D


@dataclass
class TransferRecord:
    sample_id: int
    benign_label: int
    adv_label: int
    flipped: bool
    generation_exit: int  # exit attacked on the surrogate
    target_benign_exit: int | None = None  # dynamic targets only
    target_adv_exit: int | None = None

    @property
    def exit_delta(self) -> int | None:
        if self.target_benign_exit is None or self.target_adv_exit is None:
            return None
        return self.target_adv_exit - self.target_benign_exit


@dataclass
class TransferReport:
    direction: str
    attack: str
    success_rate: float  # percent over benign-correct samples
    evaluated: int  # samples surviving the benign-correctness filter
    total: int
    records: list[TransferRecord] = field(default_factory=list)
    generation_exit_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 100.0:
            raise ValueError("success rate must lie in [0, 100]")


def _target_label(pair: TransferPair, image: np.ndarray) -> tuple[int, int | None]:
    if pair.target_type == DYNAMIC:
        pred = infer_dynamic(pair.target, image, pair.target_policy)
        return pred.label, pred.exit_index
    logits = pair.target.static_forward(Tensor(image[None]))
    return int(logits.data[0].argmax()), None


def run_transfer(pair: TransferPair, attack: str, eval_images: np.ndarray,
                 eval_labels: np.ndarray, config: atk.BudgetedAttackConfig | None = None,
                 ) -> TransferReport:
    """Craft white-box attacks on the surrogate, replay them on the target.

    Success counts label flips on the target over samples it classified
    correctly before the attack. Dynamic surrogates are attacked at the
    exit their policy picks per sample, and those generation exits are
    tallied for the efficiency histogram.
    """
    if attack not in ("fgsm", "pgd", "mifgsm"):
        raise ValueError(f"unknown attack {attack!r}")
    config = config or atk.BudgetedAttackConfig()
    eval_images = np.asarray(eval_images, dtype=np.float32)
    records: list[TransferRecord] = []
    gen_counts: dict[int, int] = {}
    flipped_count = 0
    evaluated = 0
    for i in range(eval_images.shape[0]):
        x = eval_images[i]
        true_label = int(eval_labels[i])
        benign_label, benign_exit = _target_label(pair, x)
        if benign_label != true_label:
            continue  # benign-correctness filter
        evaluated += 1
        if pair.surrogate_type == DYNAMIC:
            gen_exit = infer_dynamic(pair.surrogate, x, pair.surrogate_policy).exit_index
        else:
            gen_exit = pair.surrogate.exit_count
        gen_counts[gen_exit] = gen_counts.get(gen_exit, 0) + 1
        per_sample = atk.BudgetedAttackConfig(
            epsilon=config.epsilon, steps=config.steps, step_size=config.step_size,
            momentum_decay=config.momentum_decay, random_init=config.random_init,
            seed=config.seed * 100003 + i)
        surrogate_label = true_label
        if attack == "fgsm":
            x_adv = atk.fgsm(pair.surrogate, x, surrogate_label, gen_exit, config.epsilon)
        elif attack == "pgd":
            x_adv = atk.pgd(pair.surrogate, x, surrogate_label, gen_exit, per_sample)
        else:
            x_adv = atk.mifgsm(pair.surrogate, x, surrogate_label, gen_exit, per_sample)
        adv_label, adv_exit = _target_label(pair, x_adv[0])
        flipped = adv_label != benign_label
        flipped_count += int(flipped)
        records.append(TransferRecord(sample_id=i, benign_label=benign_label,
                                      adv_label=adv_label, flipped=flipped,
                                      generation_exit=gen_exit,
                                      target_benign_exit=benign_exit,
                                      target_adv_exit=adv_exit))
    rate = 100.0 * flipped_count / evaluated if evaluated else 0.0
    return TransferReport(direction=pair.direction, attack=attack, success_rate=rate,
                          evaluated=evaluated, total=int(eval_images.shape[0]),
                          records=records, generation_exit_counts=gen_counts)


def write_transfer_summary_csv(path, reports: Sequence[TransferReport],
                               pair_ids: Sequence | None = None) -> None:
    if pair_ids is None:
        pair_ids = range(len(reports))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair_id", "direction", "attack", "success_rate", "evaluated", "total"])
        for pid, rep in zip(pair_ids, reports):
            writer.writerow([pid, rep.direction, rep.attack, f"{rep.success_rate:.9g}",
                             rep.evaluated, rep.total])


def write_transfer_records_csv(path, report: TransferReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "benign_label", "adv_label", "flipped",
                         "generation_exit", "exit_delta"])
        for r in report.records:
            delta = "" if r.exit_delta is None else r.exit_delta
            writer.writerow([r.sample_id, r.benign_label, r.adv_label, int(r.flipped),
                             r.generation_exit, delta])
