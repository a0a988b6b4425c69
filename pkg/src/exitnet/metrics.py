"""Evaluation metrics over benign/adversarial prediction traces.

All metrics reduce plain per-sample records with sums and counts, so
they are order-independent and easy to recount by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .inference import PredictionTrace

PSNR_IDENTICAL = math.inf  # sentinel for a zero-MSE comparison


@dataclass(frozen=True)
class SampleRecord:
    """One attacked sample: its benign and adversarial traces."""

    sample_id: int
    benign: PredictionTrace
    adversarial: PredictionTrace
    ground_truth: int
    attack: str = ""

    def __post_init__(self):
        if self.benign.exit_count != self.adversarial.exit_count:
            raise ValueError("benign and adversarial traces have different exit counts")

    @property
    def flipped(self) -> bool:
        return self.adversarial.chosen_label != self.benign.chosen_label


def success_rate(records: Sequence[SampleRecord]) -> float:
    """Percent of records whose adversarial chosen label differs from benign."""
    if not records:
        raise ValueError("no records")
    flipped = sum(1 for r in records if r.flipped)
    return 100.0 * flipped / len(records)


def exit_delta(benign: PredictionTrace, adversarial: PredictionTrace) -> int:
    """Adversarial chosen exit minus benign chosen exit (positive = slower)."""
    if benign.exit_count != adversarial.exit_count:
        raise ValueError("traces have different exit counts")
    return adversarial.chosen_exit - benign.chosen_exit


def first_flipped_exit(adv_exit_labels: Sequence[int], p: int) -> int:
    """Earliest exit whose label departs from the benign final label p.

    With exits 1..K still predicting p and exit K+1 not, returns K+1.
    Raises when every exit still predicts p.
    """
    for i, label in enumerate(adv_exit_labels, start=1):
        if label != p:
            return i
    raise ValueError("no exit flipped; caller must select samples with a flipped final exit")


def t1_t2(records: Sequence[SampleRecord]) -> tuple[float, float | None]:
    """Early-attack transfer metrics.

    T1: percent of samples whose adversarial final-exit label still equals
    the benign final label p. T2: over those samples, the mean number of
    early exits whose label differs from p; None when T1 selects nothing.
    """
    if not records:
        raise ValueError("no records")
    kept = 0
    flips_total = 0
    for r in records:
        p = r.benign.final_label
        if r.adversarial.final_label == p:
            kept += 1
            flips_total += sum(1 for lbl in r.adversarial.labels[:-1] if int(lbl) != p)
    t1 = 100.0 * kept / len(records)
    t2 = (flips_total / kept) if kept else None
    return t1, t2


def psnr(x: np.ndarray, x_adv: np.ndarray) -> float:
    """10 * log10(1 / MSE) for unit-range images; inf when identical."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    for arr in (x, x_adv):
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("images must lie in [0, 1]")
    mse = float(np.mean((x - x_adv) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


@dataclass(frozen=True)
class Histogram:
    """Normalized masses over equal-width bins anchored at multiples of
    the bin width; unit width makes integer values their own bins."""

    bin_width: float
    centers: tuple[float, ...]
    masses: tuple[float, ...]

    def mass_at(self, value: float) -> float:
        for c, m in zip(self.centers, self.masses):
            if abs(c - value) < self.bin_width * 1e-9 + 1e-12:
                return m
        return 0.0

    def total_mass(self) -> float:
        return float(sum(self.masses))


def density_histogram(values: Sequence[float], bin_width: float = 1.0) -> Histogram:
    """Probability masses per bin; bins span min..max of the data with no
    gaps, so neighboring empty bins show up as zero mass."""
    if len(values) == 0:
        raise ValueError("no values")
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    arr = np.asarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("values must be finite")
    idx = np.floor(arr / bin_width + 0.5).astype(np.int64)  # nearest multiple
    lo, hi = int(idx.min()), int(idx.max())
    counts = np.bincount(idx - lo, minlength=hi - lo + 1)
    masses = counts / arr.size
    centers = tuple(float(i * bin_width) for i in range(lo, hi + 1))
    return Histogram(bin_width=float(bin_width), centers=centers, masses=tuple(float(m) for m in masses))


@dataclass
class StudyReport:
    """Everything a study run produces, before file emission."""

    study: str
    seed: int
    config_snapshot: str
    tables: dict[str, list[dict]] = field(default_factory=dict)  # name -> rows
    histograms: dict[str, Histogram] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def validate(self) -> None:
        for name, hist in self.histograms.items():
            if abs(hist.total_mass() - 1.0) > 1e-9:
                raise ValueError(f"histogram {name!r} masses sum to {hist.total_mass()}, not 1")
