"""Black-box attacks through a surrogate model.

Without gradients, an attacker can still query the target for hard
labels. The pipeline: corrupt a handful of seed images (gaussian noise
and brightness shifts at five strengths each), label everything through
the target oracle, train a surrogate of a different architecture family
on those labels, craft white-box attacks on the surrogate, and replay
them on the target. Transfer is measured in both directions between a
static (always-final-exit) and a dynamic (early-exit) target.
"""

import numpy as np

from exitnet import attacks as atk
from exitnet.blackbox import (DYNAMIC, STATIC, LabelOracle, TransferPair,
                              harvest_labels, run_transfer, train_surrogate)
from exitnet.inference import calibrate_thresholds
from exitnet.training import TrainingConfig

from common import demo_dataset, demo_spec, get_trained_model

target = get_trained_model("plain-conv")
dataset = demo_dataset(count=200, seed=29)
policy = calibrate_thresholds(target, dataset.images[:80], 0.4)

print()
print("=== harvesting labels through the oracle ===")
oracle = LabelOracle(target, policy)
harvested = harvest_labels(oracle, dataset.images[80:140], seed=1)
kinds = sorted(set(t.split(":")[0] for t in harvested.provenance))
print(f"60 seed images -> {len(harvested)} labeled samples "
      f"(1 original + 5 levels x {len(kinds) - 1} corruption kinds)")
print(f"oracle answered {oracle.query_count} queries, hard labels only")

print()
print("=== training a surrogate from a different family ===")
surrogate, report = train_surrogate(demo_spec("residual"), harvested,
                                    TrainingConfig(epochs=6, batch_size=32, seed=0),
                                    oracle)
print(f"surrogate agrees with the oracle on {100 * report.probe_agreement:.0f}% "
      f"of held-out probes")

print()
print("=== transferring attacks, both directions ===")
eval_images = dataset.images[170:]
eval_labels = dataset.labels[170:]
cfg = atk.BudgetedAttackConfig(epsilon=8 / 255, steps=5)
s2d = run_transfer(TransferPair(surrogate=surrogate, surrogate_type=STATIC,
                                target=target, target_type=DYNAMIC,
                                target_policy=policy),
                   "pgd", eval_images, eval_labels, cfg)
d2s = run_transfer(TransferPair(surrogate=target, surrogate_type=DYNAMIC,
                                target=surrogate, target_type=STATIC,
                                surrogate_policy=policy),
                   "pgd", eval_images, eval_labels, cfg)
for rep in (s2d, d2s):
    print(f"{rep.direction}: {rep.success_rate:5.1f}% of {rep.evaluated} "
          f"benign-correct samples flipped")
verdict = "holds" if d2s.success_rate >= s2d.success_rate else "does not hold here"
print(f"expectation that dynamic-to-static transfers at least as well: {verdict}")
