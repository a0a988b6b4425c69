"""White-box attacks on multi-exit models.

Budgeted attacks (FGSM, PGD, MI-FGSM) maximize cross-entropy at a chosen
exit under an L-infinity budget. The early attack instead optimizes a
perturbation that keeps the final exit's label fixed at the benign label
p while flipping every early exit away from p; the adversarial image is
parameterized as x' = (tanh(w) + 1) / 2, so it lies in [0, 1] by
construction, and the objective is ||x' - x||_2 + c * (alpha * L1 + L2).
"""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import MultiExitModel

DEFAULT_EPSILON = 8.0 / 255.0
DEFAULT_STEPS = 10
DEFAULT_STEP_SIZE = 2.0 / 255.0
DEFAULT_ALPHA_SWEEP = (0.001, 0.01, 0.1, 1.0, 20.0, 40.0)

GRAD_NORM_FLOOR = 1e-12  # MI-FGSM stops when the gradient L1 norm falls below this

W_INIT_BENIGN = "benign"
W_INIT_RANDOM = "random"


class AttackDiverged(RuntimeError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"attack loss became non-finite at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class BudgetedAttackConfig:
    epsilon: float = DEFAULT_EPSILON
    steps: int = DEFAULT_STEPS
    step_size: float = DEFAULT_STEP_SIZE
    momentum_decay: float = 1.0  # MI-FGSM only
    random_init: bool = True  # PGD starts from a random point in the ball
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.momentum_decay < 0:
            raise ValueError("momentum_decay must be >= 0")


@dataclass(frozen=True)
class EarlyAttackConfig:
    alpha: float = 1.0
    c: float = 50.0
    iterations: int = 1000
    step_size: float = 0.01
    w_init: str = W_INIT_BENIGN
    seed: int = 0

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("c must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.w_init not in (W_INIT_BENIGN, W_INIT_RANDOM):
            raise ValueError(f"w_init must be {W_INIT_BENIGN!r} or {W_INIT_RANDOM!r}")


@dataclass(frozen=True)
class AttackOutcome:
    attack: str
    x: np.ndarray
    x_adv: np.ndarray
    success: bool
    iterations: int
    loss_trajectory: tuple[float, ...] = ()
    benign_exit_labels: tuple[int, ...] = ()
    adv_exit_labels: tuple[int, ...] = ()
    alpha: float | None = None

    def __post_init__(self):
        if self.x_adv.min() < 0.0 or self.x_adv.max() > 1.0:
            raise ValueError("adversarial image left [0, 1]")
        delta = self.x_adv.astype(np.float64) - self.x.astype(np.float64)
        if not np.isfinite(delta).all():
            raise ValueError("non-finite perturbation")

    @property
    def delta(self) -> np.ndarray:
        return self.x_adv - self.x

    @property
    def l2(self) -> float:
        return float(np.linalg.norm(self.delta.astype(np.float64)))

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta.astype(np.float64)).max()) if self.delta.size else 0.0


@contextmanager
def frozen(model: MultiExitModel):
    """Disable parameter gradients for the duration of an attack."""
    params = model.trainables()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def _single(model: MultiExitModel, x) -> np.ndarray:
    h, w, c = model.spec.input_shape
    x = np.asarray(x, dtype=np.float32)
    if x.shape == (c, h, w):
        x = x[None]
    if x.shape != (1, c, h, w):
        raise ValueError(f"attacks operate on one input of shape ({c}, {h}, {w})")
    return x


def _exit_grad(model: MultiExitModel, x: np.ndarray, label: int, exit_index: int) -> np.ndarray:
    """Gradient of the exit's cross-entropy with respect to the input."""
    xt = Tensor(x, requires_grad=True)
    logits = model.forward_to_exit(xt, exit_index)
    loss = ad.cross_entropy(logits, np.array([label]))
    loss.backward()
    return xt.grad


def fgsm(model: MultiExitModel, x, label: int, exit_index: int,
         epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """One signed-gradient step: clip(x + eps * sign(grad), 0, 1)."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = _single(model, x)
    with frozen(model):
        g = _exit_grad(model, x, label, exit_index)
    return np.clip(x + np.float32(epsilon) * np.sign(g), 0.0, 1.0).astype(np.float32)


def _project(adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    adv = np.clip(adv, x - np.float32(epsilon), x + np.float32(epsilon))
    return np.clip(adv, 0.0, 1.0).astype(np.float32)


def pgd(model: MultiExitModel, x, label: int, exit_index: int,
        config: BudgetedAttackConfig = BudgetedAttackConfig()) -> np.ndarray:
    """Iterated signed-gradient ascent projected onto the budget ball."""
    x = _single(model, x)
    adv = x
    if config.random_init and config.epsilon > 0:
        rng = np.random.default_rng(config.seed)
        noise = rng.uniform(-config.epsilon, config.epsilon, size=x.shape).astype(np.float32)
        adv = _project(x + noise, x, config.epsilon)
    with frozen(model):
        for _ in range(config.steps):
            g = _exit_grad(model, adv, label, exit_index)
            adv = _project(adv + np.float32(config.step_size) * np.sign(g), x, config.epsilon)
    return adv


def mifgsm(model: MultiExitModel, x, label: int, exit_index: int,
           config: BudgetedAttackConfig = BudgetedAttackConfig()) -> np.ndarray:
    """PGD with an accumulated velocity: v <- mu * v + grad / ||grad||_1."""
    x = _single(model, x)
    adv = x
    velocity = np.zeros(x.shape, dtype=np.float64)
    with frozen(model):
        for _ in range(config.steps):
            g = _exit_grad(model, adv, label, exit_index).astype(np.float64)
            norm = np.abs(g).sum()
            if norm < GRAD_NORM_FLOOR:
                break
            velocity = config.momentum_decay * velocity + g / norm
            adv = _project(adv + np.float32(config.step_size) * np.sign(velocity).astype(np.float32),
                           x, config.epsilon)
    return adv


def early_attack_loss(exit_probs: Sequence[Tensor], p: int, alpha: float) -> Tensor:
    """L = alpha * L1 + L2 over differentiable per-exit softmax rows.

    L1 = -sum_{j != p} max(yN_p - yN_j, 0) rewards a final exit that keeps
    p dominant; L2 = sum over early exits of y_i_p punishes early-exit
    mass on p. Each entry of ``exit_probs`` is a (1, classes) tensor.
    """
    if not exit_probs:
        raise ValueError("need at least one exit")
    classes = exit_probs[-1].shape[-1]
    if not 0 <= p < classes:
        raise ValueError(f"label {p} outside class range 0..{classes - 1}")
    final_row = exit_probs[-1].reshape(classes)
    margin = ad.relu(final_row[p] - final_row)  # j = p contributes relu(0) = 0
    l1 = -ad.tensor_sum(margin)
    l2 = None
    for probs in exit_probs[:-1]:
        term = probs.reshape(classes)[p]
        l2 = term if l2 is None else l2 + term
    if l2 is None:
        return l1 * alpha
    return l1 * alpha + l2


def _exit_labels(model: MultiExitModel, x: np.ndarray) -> tuple[int, ...]:
    logits = model.forward_all(Tensor(x))
    return tuple(int(lg.data[0].argmax()) for lg in logits)


def early_attack_success(model: MultiExitModel, x_adv, p: int) -> bool:
    """True iff the final exit still says p while every early exit disagrees."""
    labels = _exit_labels(model, _single(model, x_adv))
    return _labels_successful(labels, p)


def _labels_successful(labels: Sequence[int], p: int) -> bool:
    return labels[-1] == p and all(lbl != p for lbl in labels[:-1])


def early_attack(model: MultiExitModel, x,
                 config: EarlyAttackConfig = EarlyAttackConfig()) -> AttackOutcome:
    """Optimize w so that x' = (tanh(w)+1)/2 triggers every early exit to
    leave the benign final label p while the final exit keeps it.

    Success is checked every iteration and returns immediately; otherwise
    the final iterate is returned with success=False.
    """
    x = _single(model, x)
    rng = np.random.default_rng(config.seed)
    with frozen(model):
        benign_labels = _exit_labels(model, x)
        p = benign_labels[-1]

        if config.w_init == W_INIT_BENIGN:
            safe = np.clip(x.astype(np.float64), 1e-6, 1.0 - 1e-6)
            w = np.arctanh(2.0 * safe - 1.0)
            w += rng.uniform(-0.01, 0.01, size=w.shape)
        else:
            w = rng.standard_normal(x.shape)
        w = w.astype(np.float32)

        # adaptive per-coordinate steps (Adam)
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        beta1, beta2, adam_eps = 0.9, 0.999, 1e-8

        trajectory: list[float] = []
        x_tensor = Tensor(x)
        last_adv = x
        adv_labels = benign_labels
        for t in range(1, config.iterations + 1):
            wt = Tensor(w, requires_grad=True)
            x_adv = (ad.tanh(wt) + 1.0) * 0.5
            logits = model.forward_all(x_adv)
            probs = [ad.softmax(lg) for lg in logits]
            labels = tuple(int(pr.data[0].argmax()) for pr in probs)
            last_adv = x_adv.data.copy()
            adv_labels = labels
            if _labels_successful(labels, p):
                return AttackOutcome(attack="early-attack", x=x[0], x_adv=last_adv[0],
                                     success=True, iterations=t - 1,
                                     loss_trajectory=tuple(trajectory),
                                     benign_exit_labels=benign_labels,
                                     adv_exit_labels=labels, alpha=config.alpha)
            try:
                objective = ad.l2_norm(x_adv - x_tensor) + early_attack_loss(probs, p, config.alpha) * config.c
                objective.backward()
            except FloatingPointError as exc:
                raise AttackDiverged(t, str(exc)) from exc
            trajectory.append(objective.item())
            grad = wt.grad
            m = beta1 * m + (1.0 - beta1) * grad
            v = beta2 * v + (1.0 - beta2) * grad * grad
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            w = w - config.step_size * m_hat / (np.sqrt(v_hat) + adam_eps)

        final_adv = ((np.tanh(w) + 1.0) * 0.5).astype(np.float32)
        final_labels = _exit_labels(model, final_adv)
        return AttackOutcome(attack="early-attack", x=x[0], x_adv=final_adv[0],
                             success=_labels_successful(final_labels, p),
                             iterations=config.iterations,
                             loss_trajectory=tuple(trajectory),
                             benign_exit_labels=benign_labels,
                             adv_exit_labels=final_labels, alpha=config.alpha)


def alpha_sweep(model: MultiExitModel, x, sweep: Sequence[float] = DEFAULT_ALPHA_SWEEP,
                c: float = 50.0, iterations: int = 1000, step_size: float = 0.01,
                w_init: str = W_INIT_BENIGN, seed: int = 0) -> tuple[AttackOutcome, float]:
    """Run the early attack per alpha in order; stop at the first success.

    Without any success, the outcome with the lowest final objective wins.
    """
    if not sweep:
        raise ValueError("empty alpha sweep")
    best: tuple[AttackOutcome, float] | None = None
    best_loss = np.inf
    for alpha in sweep:
        cfg = EarlyAttackConfig(alpha=alpha, c=c, iterations=iterations,
                                step_size=step_size, w_init=w_init, seed=seed)
        outcome = early_attack(model, x, cfg)
        if outcome.success:
            return outcome, alpha
        final_loss = outcome.loss_trajectory[-1] if outcome.loss_trajectory else np.inf
        if best is None or final_loss < best_loss:
            best = (outcome, alpha)
            best_loss = final_loss
    return best


def write_outcomes_csv(path, outcomes: Sequence[AttackOutcome], ids: Sequence | None = None) -> None:
    """CSV rows: sample id, attack, alpha, success, iterations, delta norms."""
    if ids is None:
        ids = range(len(outcomes))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "attack", "alpha", "success", "iterations",
                         "delta_l2", "delta_linf"])
        for sample_id, o in zip(ids, outcomes):
            alpha = "" if o.alpha is None else f"{o.alpha:.9g}"
            writer.writerow([sample_id, o.attack, alpha, int(o.success), o.iterations,
                             f"{o.l2:.9g}", f"{o.linf:.9g}"])
