"""The early-exit attack: force the slow path without changing the answer.

Budgeted attacks flip labels. This attack instead targets the control
flow of a dynamic network: it perturbs the input so that every early
exit disagrees with the benign prediction p while the final exit still
says p. A confidence-based policy then distrusts every early exit and
pays for the full backbone, yet the visible prediction is unchanged.

The perturbation is optimized in tanh space, x' = (tanh(w) + 1) / 2, so
the image box [0, 1] holds by construction, and the objective trades
off perturbation size against the per-exit goals. The loss weight alpha
is swept from small to large until the per-sample criterion is met.
"""

import numpy as np

from exitnet import attacks as atk
from exitnet.autodiff import Tensor
from exitnet.inference import trace_batch
from exitnet.metrics import psnr

from common import demo_dataset, get_trained_model

model = get_trained_model("plain-conv")
dataset = demo_dataset(count=60, seed=23)

print()
print("=== one sample, end to end ===")
x = dataset.images[0]
benign = trace_batch(model, x[None])[0]
print(f"benign per-exit labels:      {[int(v) for v in benign.labels]} "
      f"(p = {benign.final_label})")
outcome, alpha = atk.alpha_sweep(model, x, seed=0)
adv = trace_batch(model, outcome.x_adv)[0]
print(f"adversarial per-exit labels: {[int(v) for v in adv.labels]}")
print(f"success = {outcome.success} at alpha = {alpha} "
      f"after {outcome.iterations} iterations")
print(f"perturbation: L2 = {outcome.l2:.4f}, PSNR = {psnr(x, outcome.x_adv):.1f} dB")

print()
print("=== success rate over 20 samples, versus budgeted baselines ===")
rng = np.random.default_rng(7)
ea_wins = fgsm_wins = pgd_wins = 0
for i in range(20):
    xi, yi = dataset.images[i], int(dataset.labels[i])
    out, _ = atk.alpha_sweep(model, xi, iterations=300, seed=i)
    ea_wins += int(out.success)
    p = int(model.static_forward(Tensor(xi[None])).data.argmax())
    exit_index = int(rng.integers(1, model.exit_count))
    fgsm_wins += int(atk.early_attack_success(
        model, atk.fgsm(model, xi, yi, exit_index), p))
    pgd_wins += int(atk.early_attack_success(
        model, atk.pgd(model, xi, yi, exit_index, atk.BudgetedAttackConfig(seed=i)), p))
print(f"early-exit attack: {5 * ea_wins}%   fgsm baseline: {5 * fgsm_wins}%   "
      f"pgd baseline: {5 * pgd_wins}%")
print("budgeted attacks flip labels outright, so they essentially never "
      "satisfy the keep-the-final-exit criterion.")
