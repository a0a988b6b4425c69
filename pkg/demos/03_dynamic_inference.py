"""Dynamic early-exit inference and threshold calibration.

At inference time the model evaluates backbone segments in order and
stops at the first exit whose confidence (max softmax) clears that
exit's threshold. Thresholds are calibrated on held-out data to hit a
target fraction of early exits. A threshold above 1.0 can never fire,
so a policy of 1.01 sentinels reproduces the static network exactly.
"""

from collections import Counter

import numpy as np

from exitnet.inference import (SENTINEL_THRESHOLD, ExitPolicy,
                               calibrate_thresholds, infer_dynamic,
                               trace_batch)

from common import demo_dataset, get_trained_model

model = get_trained_model("plain-conv")
dataset = demo_dataset(count=400, seed=11)
calib, evalset = dataset.images[:200], dataset.images[200:]

print()
print("=== per-exit confidences for three samples ===")
for trace in trace_batch(model, evalset[:3]):
    confs = ", ".join(f"{c:.3f}" for c in trace.confidences)
    print(f"labels per exit {[int(v) for v in trace.labels]}  confidences [{confs}]")

print()
print("=== calibrating thresholds for a target early-exit fraction ===")
policy = calibrate_thresholds(model, calib, 0.4)
print(f"thresholds targeting ~40% of remaining traffic per exit: "
      f"{[f'{t:.3f}' for t in policy.thresholds]}")

traces = trace_batch(model, evalset, policy)
dist = Counter(t.chosen_exit for t in traces)
print(f"exit distribution over {len(traces)} samples: "
      f"{dict(sorted(dist.items()))}")

segments = [infer_dynamic(model, x, policy).segments_evaluated for x in evalset[:50]]
print(f"mean backbone segments evaluated: {np.mean(segments):.2f} "
      f"of {model.segment_count} (the static model always runs all "
      f"{model.segment_count})")

print()
print("=== edge policies ===")
eager = trace_batch(model, evalset[:100], ExitPolicy.uniform(3, 0.0))
print(f"all thresholds 0.0  -> every sample exits at 1: "
      f"{all(t.chosen_exit == 1 for t in eager)}")
patient = trace_batch(model, evalset[:100], ExitPolicy.uniform(3, SENTINEL_THRESHOLD))
print(f"all thresholds 1.01 -> every sample exits at 3: "
      f"{all(t.chosen_exit == 3 for t in patient)}")
