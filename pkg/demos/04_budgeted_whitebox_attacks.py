"""Budgeted white-box attacks: FGSM, PGD, and momentum-iterative FGSM.

All three craft an additive perturbation bounded in L-infinity norm that
pushes a chosen exit's prediction away from the true label. They need
full gradient access to the model (white-box) and respect both the
budget and the [0, 1] image box by construction.
"""

import numpy as np

from exitnet import attacks as atk
from exitnet.autodiff import Tensor
from exitnet.metrics import psnr

from common import demo_dataset, get_trained_model

model = get_trained_model("plain-conv")
dataset = demo_dataset(count=120, seed=19)
# the synthetic task is easy and the model very confident, so a budget a
# bit above the usual 8/255 shows the attacks actually working
eps = 16 / 255
cfg = atk.BudgetedAttackConfig(epsilon=eps, step_size=eps / 4)

print()
print(f"=== attacking the final exit of 30 samples (eps = {eps:.4f}) ===")
runs = {
    "fgsm": lambda x, y: atk.fgsm(model, x, y, 3, epsilon=eps),
    "pgd": lambda x, y: atk.pgd(model, x, y, 3, cfg),
    "mifgsm": lambda x, y: atk.mifgsm(model, x, y, 3, cfg),
}
for name, run in runs.items():
    flipped = 0
    worst_linf = 0.0
    quality = []
    for i in range(30):
        x, y = dataset.images[i], int(dataset.labels[i])
        benign = int(model.static_forward(Tensor(x[None])).data.argmax())
        adv = run(x, y)
        adv_label = int(model.static_forward(Tensor(adv)).data.argmax())
        flipped += int(adv_label != benign)
        worst_linf = max(worst_linf, float(np.abs(adv[0].astype(np.float64) - x).max()))
        quality.append(psnr(x, adv[0]))
    print(f"{name:7s} flip rate {100 * flipped / 30:5.1f}%   "
          f"worst L-inf {worst_linf:.4f} (budget {eps:.4f})   "
          f"mean PSNR {np.mean(quality):.1f} dB")

print()
print("=== the iterated attacks generalize the one-step one ===")
x, y = dataset.images[0], int(dataset.labels[0])
one_step = atk.pgd(model, x, y, 3, atk.BudgetedAttackConfig(
    epsilon=eps, steps=1, step_size=eps, random_init=False))
print(f"single-step PGD without random init is exactly FGSM: "
      f"{np.array_equal(one_step, atk.fgsm(model, x, y, 3, epsilon=eps))}")
