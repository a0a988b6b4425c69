"""White-box attacks: budgeted gradient attacks and the early attack."""

import csv

import numpy as np
import pytest

from exitnet import attacks, models
from exitnet.autodiff import Tensor, cross_entropy, finite_diff_grad
from exitnet.attacks import (
    DEFAULT_ALPHA_SWEEP,
    AttackOutcome,
    BudgetedAttackConfig,
    EarlyAttackConfig,
    alpha_sweep,
    early_attack,
    early_attack_loss,
    early_attack_success,
    fgsm,
    mifgsm,
    pgd,
    write_outcomes_csv,
)

EPS = 8.0 / 255.0


def tiny_model(seed=0):
    """Two-exit model small enough for trustworthy finite differences."""
    spec = models.ArchitectureSpec(
        family="plain-conv",
        stages=((4, 1), (2, 1)),
        input_shape=(8, 8, 1),
        class_count=2,
        exit_positions=(1, 2),
    )
    return models.build_model(spec, seed=seed)


def constant_logit_model(labels=(1, 0), classes=4, seed=0):
    """Heads ignore the input: logits equal a fixed bias vector, and the
    input gradient of any exit loss is exactly zero."""
    spec = models.ArchitectureSpec(
        family="plain-conv",
        stages=((4, 1), (4, 1)),
        input_shape=(8, 8, 3),
        class_count=classes,
        exit_positions=(1, 2),
    )
    model = models.build_model(spec, seed=seed)
    for head, label in zip(model.heads, labels):
        head.dense.weight.data[...] = 0.0
        bias = np.zeros(classes, dtype=np.float32)
        bias[label] = 5.0
        head.dense.bias.data[...] = bias
    return model


def probs_tensor(row):
    return Tensor(np.asarray([row], dtype=np.float32))


class TestFgsm:
    def test_zero_epsilon_is_identity(self, rng):
        model = tiny_model()
        x = rng.random((1, 1, 8, 8), dtype=np.float32)
        adv = fgsm(model, x, label=0, exit_index=2, epsilon=0.0)
        np.testing.assert_array_equal(adv, x)

    def test_steps_along_gradient_sign(self, rng):
        model = tiny_model()
        x = rng.random((1, 1, 8, 8), dtype=np.float32) * 0.6 + 0.2
        xt = Tensor(x, requires_grad=True)
        with attacks.frozen(model):
            loss = cross_entropy(model.forward_to_exit(xt, 2), np.array([0]))
            loss.backward()
        g = xt.grad
        adv = fgsm(model, x, label=0, exit_index=2, epsilon=EPS)
        up = g > 1e-6
        down = g < -1e-6
        np.testing.assert_array_equal(adv[up], np.clip(x[up] + np.float32(EPS), 0, 1))
        np.testing.assert_array_equal(adv[down], np.clip(x[down] - np.float32(EPS), 0, 1))

    def test_matches_finite_difference_signs(self, rng):
        model = tiny_model(seed=3)
        n_params = sum(p.data.size for p in model.trainables())
        assert n_params <= 200
        for trial in range(6):
            x = rng.random((1, 1, 8, 8), dtype=np.float32)
            label = int(trial % 2)

            def loss_at(z):
                with attacks.frozen(model):
                    out = model.forward_to_exit(Tensor(z.reshape(1, 1, 8, 8)), 2)
                    return float(cross_entropy(out, np.array([label])).data)

            g = finite_diff_grad(loss_at, x.astype(np.float64).ravel(), h=1e-3)
            oracle = np.clip(x + np.float32(EPS) * np.sign(g.reshape(x.shape)).astype(np.float32),
                             0.0, 1.0).astype(np.float32)
            adv = fgsm(model, x, label=label, exit_index=2, epsilon=EPS)
            np.testing.assert_array_equal(adv, oracle)

    def test_zero_gradient_leaves_input_unchanged(self, rng):
        model = constant_logit_model()
        x = rng.random((1, 3, 8, 8), dtype=np.float32)
        np.testing.assert_array_equal(fgsm(model, x, 0, 2, EPS), x)

    def test_negative_epsilon_rejected(self, rng):
        with pytest.raises(ValueError):
            fgsm(tiny_model(), rng.random((1, 1, 8, 8), dtype=np.float32), 0, 2, -0.1)


class TestBudgetedAttacks:
    def test_pgd_zero_epsilon_is_identity(self, rng):
        model = tiny_model()
        x = rng.random((1, 1, 8, 8), dtype=np.float32)
        cfg = BudgetedAttackConfig(epsilon=0.0, steps=5)
        np.testing.assert_array_equal(pgd(model, x, 0, 2, cfg), x)

    def test_single_step_pgd_equals_fgsm(self, rng):
        model = tiny_model()
        for _ in range(5):
            x = rng.random((1, 1, 8, 8), dtype=np.float32)
            cfg = BudgetedAttackConfig(epsilon=EPS, steps=1, step_size=EPS, random_init=False)
            np.testing.assert_array_equal(pgd(model, x, 1, 2, cfg),
                                          fgsm(model, x, 1, 2, EPS))

    def test_mifgsm_without_momentum_matches_pgd(self, rng):
        model = tiny_model()
        x = rng.random((1, 1, 8, 8), dtype=np.float32)
        cfg = BudgetedAttackConfig(epsilon=EPS, steps=6, momentum_decay=0.0, random_init=False)
        np.testing.assert_array_equal(mifgsm(model, x, 0, 2, cfg), pgd(model, x, 0, 2, cfg))

    def test_budget_and_box_hold(self, rng):
        model = tiny_model(seed=1)
        for attack_fn in (pgd, mifgsm):
            for seed in range(10):
                x = rng.random((1, 1, 8, 8), dtype=np.float32)
                cfg = BudgetedAttackConfig(epsilon=EPS, steps=8, seed=seed)
                adv = attack_fn(model, x, seed % 2, 2, cfg)
                assert np.abs(adv - x).max() <= EPS + 1e-6
                assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_mifgsm_stops_on_vanished_gradient(self, rng):
        model = constant_logit_model()
        x = rng.random((1, 3, 8, 8), dtype=np.float32)
        cfg = BudgetedAttackConfig(epsilon=EPS, steps=10, random_init=False)
        np.testing.assert_array_equal(mifgsm(model, x, 0, 2, cfg), x)

    def test_pgd_moves_within_ball_under_zero_gradient(self, rng):
        model = constant_logit_model()
        x = (rng.random((1, 3, 8, 8), dtype=np.float32) * 0.5) + 0.25
        adv = pgd(model, x, 0, 2, BudgetedAttackConfig(epsilon=EPS, steps=3, seed=7))
        assert np.abs(adv - x).max() <= EPS + 1e-6

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BudgetedAttackConfig(epsilon=-0.1)
        with pytest.raises(ValueError):
            BudgetedAttackConfig(steps=0)
        with pytest.raises(ValueError):
            BudgetedAttackConfig(step_size=0.0)
        with pytest.raises(ValueError):
            BudgetedAttackConfig(momentum_decay=-1.0)


class TestEarlyAttackLoss:
    def test_single_exit_margin(self):
        # one-hot final row: every other class trails by exactly 1
        probs = [probs_tensor([1.0] + [0.0] * 9)]
        loss = early_attack_loss(probs, p=0, alpha=1.0)
        np.testing.assert_allclose(loss.data, -9.0, atol=1e-6)

    def test_combined_terms(self):
        exit_probs = [probs_tensor([0.25, 0.25, 0.25, 0.25]),
                      probs_tensor([0.25, 0.25, 0.25, 0.25]),
                      probs_tensor([1.0, 0.0, 0.0, 0.0])]
        loss = early_attack_loss(exit_probs, p=0, alpha=2.0)
        np.testing.assert_allclose(loss.data, 2.0 * -3.0 + 0.5, atol=1e-6)

    def test_zero_alpha_keeps_only_early_mass(self):
        exit_probs = [probs_tensor([0.7, 0.3]), probs_tensor([0.1, 0.9])]
        loss = early_attack_loss(exit_probs, p=0, alpha=0.0)
        np.testing.assert_allclose(loss.data, 0.7, atol=1e-6)

    def test_matches_scalar_recount(self, rng):
        for _ in range(10):
            raw = rng.random((4, 6)).astype(np.float32)
            rows = raw / raw.sum(axis=1, keepdims=True)
            p = int(rng.integers(0, 6))
            alpha = float(rng.uniform(0.0, 5.0))
            l1 = -sum(max(rows[-1][p] - rows[-1][j], 0.0) for j in range(6) if j != p)
            l2 = sum(float(rows[i][p]) for i in range(3))
            loss = early_attack_loss([probs_tensor(r) for r in rows], p, alpha)
            np.testing.assert_allclose(float(loss.data), alpha * l1 + l2, atol=1e-6)

    def test_validation(self):
        with pytest.raises(ValueError):
            early_attack_loss([], 0, 1.0)
        with pytest.raises(ValueError):
            early_attack_loss([probs_tensor([0.5, 0.5])], 2, 1.0)


class TestEarlyAttack:
    def test_flips_early_exits_on_trained_model(self, trained_model, small_dataset):
        cfg = EarlyAttackConfig(alpha=1.0, iterations=500, seed=0)
        wins = 0
        tried = 0
        for x, y in zip(small_dataset.images, small_dataset.labels):
            trace_labels = attacks._exit_labels(trained_model, x[None])
            if trace_labels[-1] != y:
                continue
            tried += 1
            outcome = early_attack(trained_model, x, cfg)
            assert outcome.x_adv.min() >= 0.0 and outcome.x_adv.max() <= 1.0
            if outcome.success:
                wins += 1
                assert outcome.adv_exit_labels[-1] == trace_labels[-1]
                assert all(lbl != trace_labels[-1] for lbl in outcome.adv_exit_labels[:-1])
                assert early_attack_success(trained_model, outcome.x_adv, trace_labels[-1])
            if tried == 10:
                break
        assert tried == 10
        assert wins >= 5

    def test_immediate_success_costs_no_iterations(self, rng):
        model = constant_logit_model(labels=(1, 0))
        x = rng.random((3, 8, 8), dtype=np.float32)
        outcome = early_attack(model, x, EarlyAttackConfig(iterations=50))
        assert outcome.success
        assert outcome.iterations == 0
        assert outcome.benign_exit_labels == (1, 0)

    def test_impossible_goal_exhausts_iterations(self, rng):
        model = constant_logit_model(labels=(2, 2))
        x = rng.random((3, 8, 8), dtype=np.float32)
        outcome = early_attack(model, x, EarlyAttackConfig(iterations=5))
        assert not outcome.success
        assert outcome.iterations == 5
        assert len(outcome.loss_trajectory) == 5

    def test_seeded_determinism(self, trained_model, small_dataset):
        x = small_dataset.images[0]
        cfg = EarlyAttackConfig(alpha=1.0, iterations=40, seed=11)
        a = early_attack(trained_model, x, cfg)
        b = early_attack(trained_model, x, cfg)
        np.testing.assert_array_equal(a.x_adv, b.x_adv)
        assert a.loss_trajectory == b.loss_trajectory
        assert a.iterations == b.iterations and a.success == b.success

    def test_objective_tends_downhill(self, rng):
        model = constant_logit_model(labels=(2, 2))
        x = rng.random((3, 8, 8), dtype=np.float32)
        outcome = early_attack(model, x, EarlyAttackConfig(iterations=60))
        traj = outcome.loss_trajectory
        assert traj[-1] <= traj[0]
        # the optimizer wobbles once converged, so require net descent with a
        # tail that keeps most of the progress rather than step monotonicity
        descent = traj[0] - min(traj)
        assert descent > 0
        assert traj[-1] - min(traj) <= 0.25 * descent

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EarlyAttackConfig(c=0.0)
        with pytest.raises(ValueError):
            EarlyAttackConfig(iterations=0)
        with pytest.raises(ValueError):
            EarlyAttackConfig(w_init="fixed")


class TestAlphaSweep:
    def test_short_circuits_on_first_success(self, rng):
        model = constant_logit_model(labels=(1, 0))
        x = rng.random((3, 8, 8), dtype=np.float32)
        outcome, alpha = alpha_sweep(model, x, iterations=5)
        assert outcome.success
        assert alpha == DEFAULT_ALPHA_SWEEP[0]

    def test_exhaustion_returns_lowest_final_loss(self, rng):
        model = constant_logit_model(labels=(2, 2))
        x = rng.random((3, 8, 8), dtype=np.float32)
        outcome, alpha = alpha_sweep(model, x, sweep=(0.01, 1.0), iterations=4)
        assert not outcome.success
        assert alpha in (0.01, 1.0)
        assert outcome.iterations == 4

    def test_empty_sweep_rejected(self, rng):
        with pytest.raises(ValueError):
            alpha_sweep(tiny_model(), rng.random((1, 8, 8), dtype=np.float32), sweep=())


class TestOutcomeRecords:
    def test_outcome_validates_box(self, rng):
        x = rng.random((3, 4, 4), dtype=np.float32)
        with pytest.raises(ValueError):
            AttackOutcome(attack="fgsm", x=x, x_adv=x + 2.0, success=False, iterations=1)

    def test_csv_schema(self, rng, tmp_path):
        x = rng.random((3, 4, 4), dtype=np.float32) * 0.5
        adv = np.clip(x + 0.1, 0.0, 1.0).astype(np.float32)
        outcomes = [
            AttackOutcome(attack="pgd", x=x, x_adv=adv, success=True, iterations=10),
            AttackOutcome(attack="early-attack", x=x, x_adv=x, success=False,
                          iterations=3, alpha=0.1),
        ]
        path = tmp_path / "outcomes.csv"
        write_outcomes_csv(path, outcomes, ids=["a", "b"])
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["sample_id", "attack", "alpha", "success", "iterations",
                           "delta_l2", "delta_linf"]
        assert rows[1][:5] == ["a", "pgd", "", "1", "10"]
        np.testing.assert_allclose(float(rows[1][6]), 0.1, atol=1e-6)
        assert rows[2][:5] == ["b", "early-attack", "0.1", "0", "3"]
        assert float(rows[2][5]) == 0.0
