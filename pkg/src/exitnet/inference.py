"""Dynamic early-exit inference.

An input leaves the network at the first exit whose confidence (the
maximum softmax probability) clears that exit's threshold; the final
exit always accepts. Thresholds above 1 can never be cleared, so the
value 1.01 serves as a "never exit early" sentinel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import MultiExitModel

SENTINEL_THRESHOLD = 1.01
CONFIDENCE_MAX_SOFTMAX = "max-softmax"


@dataclass(frozen=True)
class ExitPolicy:
    """Per-early-exit thresholds; the final exit has none."""

    thresholds: tuple[float, ...]
    confidence: str = CONFIDENCE_MAX_SOFTMAX

    def __post_init__(self):
        if self.confidence != CONFIDENCE_MAX_SOFTMAX:
            raise ValueError(f"unknown confidence definition {self.confidence!r}")
        for t in self.thresholds:
            if not (0.0 <= t <= SENTINEL_THRESHOLD):
                raise ValueError(f"threshold {t} outside [0, {SENTINEL_THRESHOLD}]")

    @classmethod
    def uniform(cls, exit_count: int, threshold: float) -> "ExitPolicy":
        return cls(thresholds=(threshold,) * (exit_count - 1))

    def exit_count(self) -> int:
        return len(self.thresholds) + 1

    def chooses(self, confidences: Sequence[float]) -> int:
        """Smallest exit index whose confidence clears its threshold (1-based)."""
        n = len(confidences)
        if n != self.exit_count():
            raise ValueError(f"expected {self.exit_count()} confidences, got {n}")
        for i, tau in enumerate(self.thresholds):
            if confidences[i] >= tau:
                return i + 1
        return n


@dataclass(frozen=True)
class PredictionTrace:
    """Per-exit view of one input: softmax rows, labels, confidences,
    and the exit the policy would choose."""

    probs: np.ndarray  # (exits, classes)
    labels: np.ndarray  # (exits,) argmax per exit
    confidences: np.ndarray  # (exits,) max softmax per exit
    chosen_exit: int  # 1-based
    chosen_label: int

    @property
    def exit_count(self) -> int:
        return self.probs.shape[0]

    @property
    def final_label(self) -> int:
        return int(self.labels[-1])


class DynamicPrediction(NamedTuple):
    label: int
    exit_index: int
    confidence: float
    segments_evaluated: int


def _as_batch(model: MultiExitModel, x: np.ndarray) -> np.ndarray:
    h, w, c = model.spec.input_shape
    x = np.asarray(x, dtype=np.float32)
    if x.shape == (c, h, w):
        return x[None]
    if x.ndim == 4 and x.shape[1:] == (c, h, w):
        return x
    raise ValueError(f"expected input shaped ({c}, {h}, {w}) or a batch of them, got {x.shape}")


def _trace_from_rows(probs: np.ndarray, policy: ExitPolicy | None) -> PredictionTrace:
    labels = probs.argmax(axis=1)
    confidences = probs.max(axis=1)
    if policy is None:
        chosen = probs.shape[0]
    else:
        chosen = policy.chooses(confidences)
    return PredictionTrace(probs=probs, labels=labels, confidences=confidences,
                           chosen_exit=chosen, chosen_label=int(labels[chosen - 1]))


def infer_all_exits(model: MultiExitModel, x, policy: ExitPolicy | None = None) -> PredictionTrace:
    """All N softmax vectors for one input in a single backbone pass.

    No early termination happens; the trace records which exit the policy
    would choose (the final exit when no policy is given).
    """
    batch = _as_batch(model, x)
    if batch.shape[0] != 1:
        raise ValueError("infer_all_exits takes a single input; use trace_batch for many")
    return trace_batch(model, batch, policy)[0]


def trace_batch(model: MultiExitModel, xs, policy: ExitPolicy | None = None) -> list[PredictionTrace]:
    batch = _as_batch(model, xs)
    logits = model.forward_all(Tensor(batch))
    probs = np.stack([ad.softmax_values(lg.data) for lg in logits], axis=1)  # (n, exits, classes)
    return [_trace_from_rows(rows, policy) for rows in probs]


def infer_dynamic(model: MultiExitModel, x, policy: ExitPolicy) -> DynamicPrediction:
    """Early-exit forward: stops at the first confident exit.

    Only the backbone segments up to the chosen exit run, which the
    returned ``segments_evaluated`` counter makes observable.
    """
    batch = _as_batch(model, x)
    if batch.shape[0] != 1:
        raise ValueError("infer_dynamic takes a single input")
    if policy.exit_count() != model.exit_count:
        raise ValueError(f"policy has {policy.exit_count()} exits, model has {model.exit_count}")
    positions = model.spec.exit_positions
    h = Tensor(batch)
    segments_evaluated = 0
    head_idx = 0
    for seg_idx, segment in enumerate(model.segments, start=1):
        h = segment(h)
        segments_evaluated += 1
        if seg_idx in positions:
            head_idx += 1
            is_final = head_idx == model.exit_count
            probs = ad.softmax_values(model.heads[head_idx - 1](h).data[0])
            confidence = float(probs.max())
            if is_final or confidence >= policy.thresholds[head_idx - 1]:
                return DynamicPrediction(label=int(probs.argmax()), exit_index=head_idx,
                                         confidence=confidence,
                                         segments_evaluated=segments_evaluated)
    raise AssertionError("final exit must accept")


def calibrate_thresholds(model: MultiExitModel, images: np.ndarray,
                         target_exit_fractions: Sequence[float] | float) -> ExitPolicy:
    """Thresholds routing roughly the requested fraction of still-present
    samples out at each early exit.

    A fraction of 0 pins that exit's threshold to the never-exit sentinel;
    a fraction of 1 routes every remaining sample out.
    """
    batch = _as_batch(model, images)
    if batch.shape[0] == 0:
        raise ValueError("empty calibration set")
    n_early = len(model.spec.exit_positions) - 1
    if isinstance(target_exit_fractions, (int, float)):
        fractions = [float(target_exit_fractions)] * n_early
    else:
        fractions = [float(f) for f in target_exit_fractions]
    if len(fractions) != n_early:
        raise ValueError(f"expected {n_early} fractions, got {len(fractions)}")
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in [0, 1]")

    logits = model.forward_all(Tensor(batch))
    conf = np.stack([ad.softmax_values(lg.data).max(axis=1) for lg in logits], axis=1)
    remaining = np.ones(batch.shape[0], dtype=bool)
    thresholds = []
    for i, frac in enumerate(fractions):
        if frac == 0.0 or not remaining.any():
            thresholds.append(SENTINEL_THRESHOLD)
            continue
        here = conf[remaining, i]
        tau = float(here.min()) if frac == 1.0 else float(np.quantile(here, 1.0 - frac))
        tau = min(max(tau, 0.0), 1.0)
        thresholds.append(tau)
        remaining &= ~(conf[:, i] >= tau)
    return ExitPolicy(thresholds=tuple(thresholds))


def write_traces_csv(path, traces: Sequence[PredictionTrace], ids: Sequence | None = None) -> None:
    """One row per input: id, per-exit labels, per-exit confidences,
    chosen exit, chosen label."""
    if not traces:
        raise ValueError("no traces to write")
    n_exits = traces[0].exit_count
    if ids is None:
        ids = range(len(traces))
    header = ["input_id"]
    header += [f"label_exit_{i + 1}" for i in range(n_exits)]
    header += [f"conf_exit_{i + 1}" for i in range(n_exits)]
    header += ["chosen_exit", "chosen_label"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for sample_id, trace in zip(ids, traces):
            row = [sample_id]
            row += [int(v) for v in trace.labels]
            row += [f"{v:.9g}" for v in trace.confidences]
            row += [trace.chosen_exit, trace.chosen_label]
            writer.writerow(row)
