"""Multi-exit convolutional classifiers.

A model is a chain of backbone segments with an exit head attached at
each position listed in the architecture spec. The final exit sits at
the last segment, so ignoring all early exits recovers an ordinary
static network. Exit indices are 1-based throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

FAMILIES = ("plain-conv", "residual", "depthwise-separable")

MAX_CHANNELS = 64
MAX_SEGMENTS = 12


@dataclass(frozen=True)
class ArchitectureSpec:
    """Family, stage layout, input geometry, and exit placement.

    ``stages`` is a tuple of (channels, blocks) pairs; every stage after
    the first starts with a spatially downsampling block. Each block is
    one backbone segment. ``exit_positions`` are 1-based segment indices,
    strictly increasing, ending at the last segment.
    """

    family: str
    stages: tuple[tuple[int, int], ...]
    input_shape: tuple[int, int, int] = (32, 32, 3)  # H, W, C
    class_count: int = 10
    exit_positions: tuple[int, ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not self.stages or any(c < 1 or b < 1 for c, b in self.stages):
            raise ValueError("stages must be nonempty (channels, blocks) pairs with positive entries")
        if any(c > MAX_CHANNELS for c, _ in self.stages):
            raise ValueError(f"channel width above desk-scale limit {MAX_CHANNELS}")
        depth = self.segment_count
        if depth > MAX_SEGMENTS:
            raise ValueError(f"backbone depth {depth} above desk-scale limit {MAX_SEGMENTS}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError("input_shape must be (H, W, C) with positive dims")
        exits = self.exit_positions
        if len(exits) < 2:
            raise ValueError("need at least one early exit plus the final exit")
        if any(e < 1 or e > depth for e in exits):
            raise ValueError(f"exit position out of range 1..{depth}")
        if list(exits) != sorted(set(exits)):
            raise ValueError("exit positions must be strictly increasing")
        if exits[-1] != depth:
            raise ValueError("last exit must sit at the backbone output")
        downs = sum(1 for s in range(1, len(self.stages)))
        h, w = self.input_shape[0], self.input_shape[1]
        if h % (2 ** downs) or w % (2 ** downs):
            raise ValueError("input spatial dims must divide by 2 per downsampling stage")

    @property
    def segment_count(self) -> int:
        return sum(b for _, b in self.stages)

    @property
    def exit_count(self) -> int:
        return len(self.exit_positions)

    def to_json(self) -> str:
        return json.dumps(
            {
                "family": self.family,
                "stages": [list(s) for s in self.stages],
                "input_shape": list(self.input_shape),
                "class_count": self.class_count,
                "exit_positions": list(self.exit_positions),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        raw = json.loads(text)
        return cls(
            family=raw["family"],
            stages=tuple(tuple(s) for s in raw["stages"]),
            input_shape=tuple(raw["input_shape"]),
            class_count=int(raw["class_count"]),
            exit_positions=tuple(raw["exit_positions"]),
        )


class ExitHead(nn.Layer):
    """Global average pool then a single dense layer to class logits."""

    def __init__(self, rng: np.random.Generator, channels: int, class_count: int):
        self.dense = nn.Dense(rng, channels, class_count)

    def __call__(self, h: Tensor, training: bool = False) -> Tensor:
        return self.dense(ad.global_avg_pool(h))

    def trainables(self):
        return self.dense.trainables()

    def state_arrays(self):
        return [(f"head.{name}", arr) for name, arr in self.dense.state_arrays()]


def _segment_plan(spec: ArchitectureSpec) -> list[tuple[int, int, bool]]:
    """Per segment: (in_channels, out_channels, downsample)."""
    plan = []
    prev = spec.input_shape[2]
    for stage_idx, (channels, blocks) in enumerate(spec.stages):
        for block_idx in range(blocks):
            down = stage_idx > 0 and block_idx == 0
            plan.append((prev, channels, down))
            prev = channels
    return plan


def _build_segment(rng: np.random.Generator, family: str, in_ch: int, out_ch: int, down: bool) -> nn.Layer:
    stride = 2 if down else 1
    if family == "plain-conv":
        return nn.Sequential([nn.Conv2d(rng, in_ch, out_ch, 3, stride=stride, bias=False),
                              nn.BatchNorm(out_ch), nn.ReLU()])
    if family == "residual":
        return nn.ResidualBlock(rng, in_ch, out_ch, stride=stride)
    # depthwise-separable: depthwise 3x3 then pointwise 1x1, bn-relu after each
    return nn.Sequential([
        nn.DepthwiseConv2d(rng, in_ch, 3, stride=stride),
        nn.BatchNorm(in_ch), nn.ReLU(),
        nn.Conv2d(rng, in_ch, out_ch, 1, padding=0, bias=False),
        nn.BatchNorm(out_ch), nn.ReLU(),
    ])


@dataclass
class MultiExitModel:
    """Backbone segments plus one exit head per exit position."""

    spec: ArchitectureSpec
    segments: list[nn.Layer]
    heads: list[ExitHead]
    segments_evaluated: int = field(default=0, repr=False)

    @property
    def exit_count(self) -> int:
        return self.spec.exit_count

    @property
    def segment_count(self) -> int:
        return len(self.segments)

    def trainables(self) -> list[Tensor]:
        params = [p for seg in self.segments for p in seg.trainables()]
        params += [p for head in self.heads for p in head.trainables()]
        return params

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"segment{i + 1}.{name}", arr)
               for i, seg in enumerate(self.segments)
               for name, arr in seg.state_arrays()]
        out += [(f"exit{i + 1}.{name}", arr)
                for i, head in enumerate(self.heads)
                for name, arr in head.state_arrays()]
        return out

    def set_trainable(self, flag: bool) -> None:
        """Toggle gradient tracking on parameters; attacks freeze the model."""
        for p in self.trainables():
            p.requires_grad = flag

    def _check_input(self, x: Tensor) -> None:
        h, w, c = self.spec.input_shape
        if x.data.ndim != 4 or x.data.shape[1:] != (c, h, w):
            raise ValueError(f"expected input (batch, {c}, {h}, {w}), got {x.data.shape}")

    def forward_all(self, x: Tensor, training: bool = False) -> list[Tensor]:
        """Logits at every exit, one backbone pass, no early termination."""
        self._check_input(x)
        logits: list[Tensor] = []
        positions = set(self.spec.exit_positions)
        h = x
        head_idx = 0
        for seg_idx, segment in enumerate(self.segments, start=1):
            h = segment(h, training=training)
            if seg_idx in positions:
                logits.append(self.heads[head_idx](h, training=training))
                head_idx += 1
        return logits

    def forward_to_exit(self, x: Tensor, exit_index: int, training: bool = False) -> Tensor:
        """Logits at one exit, evaluating only the segments it needs.

        Increments ``segments_evaluated`` once per segment actually run, so
        callers can verify that early exits skip later work.
        """
        if not 1 <= exit_index <= self.exit_count:
            raise ValueError(f"exit index {exit_index} out of range 1..{self.exit_count}")
        self._check_input(x)
        target_segment = self.spec.exit_positions[exit_index - 1]
        h = x
        for segment in self.segments[:target_segment]:
            h = segment(h, training=training)
            self.segments_evaluated += 1
        return self.heads[exit_index - 1](h, training=training)

    def static_forward(self, x: Tensor) -> Tensor:
        """Final-exit logits, ignoring every early head (the SDNN view)."""
        self._check_input(x)
        h = x
        for segment in self.segments:
            h = segment(h)
        return self.heads[-1](h)

    def reset_counter(self) -> None:
        self.segments_evaluated = 0


def build_model(spec: ArchitectureSpec, seed: int) -> MultiExitModel:
    """Deterministic construction: parameters drawn in declaration order."""
    rng = np.random.default_rng(seed)
    plan = _segment_plan(spec)
    segments = [_build_segment(rng, spec.family, ci, co, down) for ci, co, down in plan]
    heads = [ExitHead(rng, plan[pos - 1][1], spec.class_count) for pos in spec.exit_positions]
    return MultiExitModel(spec=spec, segments=segments, heads=heads)


def preset_spec(family: str, exits: int = 3, class_count: int = 10,
                input_shape: tuple[int, int, int] = (32, 32, 3),
                base_width: int = 16) -> ArchitectureSpec:
    """Small ready-made architecture per family with evenly spread exits."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    stages = ((base_width, 2), (base_width * 2, 2), (base_width * 4, 2))
    depth = sum(b for _, b in stages)
    if not 2 <= exits <= depth:
        raise ValueError(f"exits must be in 2..{depth}")
    # even spread ending at the last segment
    positions = tuple(round(depth * (i + 1) / exits) for i in range(exits))
    positions = tuple(sorted(set(max(1, p) for p in positions[:-1])) + [depth])
    return ArchitectureSpec(family=family, stages=stages, input_shape=input_shape,
                            class_count=class_count, exit_positions=positions)
