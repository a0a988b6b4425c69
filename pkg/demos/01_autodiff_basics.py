"""Reverse-mode automatic differentiation from scratch.

The whole library rests on a small tape-based autodiff engine: every
operation on a Tensor records its parents and a backward closure, and
calling .backward() on a scalar walks the tape in reverse. This demo
builds a few expressions, reads off gradients, and cross-checks them
against central finite differences.
"""

import warnings

import numpy as np

from exitnet import autodiff as ad
from exitnet.autodiff import Tensor

print("=== a scalar expression ===")
a = Tensor([2.0], requires_grad=True)
b = Tensor([3.0], requires_grad=True)
loss = ad.tensor_sum(a * b + ad.tanh(a))
loss.backward()
# d/da (a*b + tanh(a)) = b + 1 - tanh(a)^2,  d/db = a
print(f"loss = {loss.data.item():.6f}")
print(f"grad a = {a.grad.item():.6f}  (expect b + 1 - tanh(a)^2 = {3 + 1 - np.tanh(2.0) ** 2:.6f})")
print(f"grad b = {b.grad.item():.6f}  (expect a = 2.0)")

print()
print("=== gradients through a convolution, checked numerically ===")
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True, dtype=np.float64)
w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True, dtype=np.float64)


def forward():
    return ad.tensor_mean(ad.relu(ad.conv2d(x, w, None, stride=1, padding=1)))


forward().backward()
analytic = w.grad.ravel()

base = w.data.copy()


def loss_at(flat):
    w.data = flat.reshape(base.shape)
    try:
        return float(forward().data)
    finally:
        w.data = base


numeric = ad.finite_diff_grad(loss_at, base.ravel(), h=1e-4)
worst = np.abs(analytic - numeric).max()
print(f"conv weight gradient vs finite differences: worst abs diff = {worst:.2e}")

print()
print("=== the tape guards against numerical blow-ups ===")
huge = Tensor(np.array([3.0e38], dtype=np.float32), requires_grad=True)
with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)
    try:
        (huge * 2.0).backward()
    except FloatingPointError as err:
        print(f"non-finite values abort the op immediately: {err}")
