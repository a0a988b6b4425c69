"""Experiment drivers: the four studies and their file outputs.

Every study is deterministic given its config seed and emits CSV tables,
histogram files, and a config snapshot into the output directory. CSVs
are the ground truth; rendering them is a separate presentation step.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import attacks as atk
from .autodiff import Tensor
from .blackbox import (DYNAMIC, STATIC, TransferPair, run_transfer,
                       write_transfer_records_csv, write_transfer_summary_csv)
from .checkpoint import load_checkpoint
from .config import ModelEntry, StudyConfig
from .data import Dataset, load_tensor_file, synthetic_dataset, train_validation_split
from .inference import ExitPolicy, trace_batch
from .metrics import (Histogram, StudyReport, density_histogram,
                      first_flipped_exit, psnr)
from .models import MultiExitModel

STUDIES = ("rq1-transfer", "rq2-efficiency", "rq3-first-flip", "early-attack-eval")


class MissingArtifact(FileNotFoundError):
    pass


def save_policy_json(policy: ExitPolicy, path) -> None:
    Path(path).write_text(json.dumps(
        {"thresholds": list(policy.thresholds), "confidence": policy.confidence}, indent=0))


def load_policy_json(path) -> ExitPolicy:
    if not Path(path).exists():
        raise MissingArtifact(f"policy file not found: {path}")
    raw = json.loads(Path(path).read_text())
    return ExitPolicy(thresholds=tuple(raw["thresholds"]), confidence=raw["confidence"])


def load_model_entry(entry: ModelEntry) -> tuple[MultiExitModel, ExitPolicy | None]:
    if entry.checkpoint is None:
        raise MissingArtifact(f"model {entry.name!r} has no checkpoint path")
    if not Path(entry.checkpoint).exists():
        raise MissingArtifact(f"checkpoint not found: {entry.checkpoint}")
    model = load_checkpoint(entry.checkpoint)
    policy = None
    if entry.model_type == DYNAMIC:
        if entry.policy_path is None:
            raise MissingArtifact(f"dynamic model {entry.name!r} needs a policy file")
        policy = load_policy_json(entry.policy_path)
    return model, policy


def load_dataset(cfg: StudyConfig) -> Dataset:
    ds = cfg.dataset
    if ds.path is not None:
        if not Path(ds.path).exists():
            raise MissingArtifact(f"dataset file not found: {ds.path}")
        return load_tensor_file(ds.path)
    return synthetic_dataset(ds.synthetic_count, class_count=ds.synthetic_classes,
                             input_shape=ds.synthetic_shape, seed=ds.synthetic_seed,
                             noise=ds.synthetic_noise)


def eval_slice(cfg: StudyConfig, dataset: Dataset) -> Dataset:
    """Held-out samples used for attack evaluation, seeded by the config."""
    _, val = train_validation_split(dataset, 0.2, cfg.seed)
    count = min(cfg.dataset.eval_count, len(val))
    return val.subset(np.arange(count))


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _write_histogram_csv(path, hist: Histogram) -> None:
    rows = [[f"{c:.9g}", f"{m:.9g}"] for c, m in zip(hist.centers, hist.masses)]
    _write_csv(path, ["value", "mass"], rows)


def _emit(report: StudyReport, out_dir: Path) -> None:
    report.validate()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_snapshot.ini").write_text(report.config_snapshot)
    for name, hist in report.histograms.items():
        _write_histogram_csv(out_dir / f"{name}.csv", hist)
    if report.notes:
        (out_dir / "notes.txt").write_text("\n".join(report.notes) + "\n")


def _budget_config(cfg: StudyConfig) -> atk.BudgetedAttackConfig:
    a = cfg.attack
    return atk.BudgetedAttackConfig(epsilon=a.epsilon, steps=a.steps, step_size=a.step_size,
                                    momentum_decay=a.momentum_decay,
                                    random_init=a.random_init, seed=cfg.seed)


def _transfer_pairs(cfg: StudyConfig) -> list[tuple[str, str, TransferPair]]:
    """All ordered cross-family combinations with exactly one dynamic side."""
    loaded = [(entry, *load_model_entry(entry)) for entry in cfg.models]
    pairs = []
    for s_entry, s_model, s_policy in loaded:
        for t_entry, t_model, t_policy in loaded:
            if s_entry.name == t_entry.name:
                continue
            if s_model.spec.family == t_model.spec.family:
                continue
            if (s_entry.model_type == DYNAMIC) == (t_entry.model_type == DYNAMIC):
                continue  # need one static and one dynamic side
            pair = TransferPair(surrogate=s_model, surrogate_type=s_entry.model_type,
                                target=t_model, target_type=t_entry.model_type,
                                surrogate_policy=s_policy, target_policy=t_policy)
            pairs.append((s_entry.name, t_entry.name, pair))
    return pairs


def run_study(study: str, cfg: StudyConfig, out_dir) -> StudyReport:
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; expected one of {STUDIES}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = {
        "rq1-transfer": _run_rq1,
        "rq2-efficiency": _run_rq2,
        "rq3-first-flip": _run_rq3,
        "early-attack-eval": _run_early_attack_eval,
    }[study]
    report = runner(cfg, out_dir)
    _emit(report, out_dir)
    return report


def _run_rq1(cfg: StudyConfig, out_dir: Path) -> StudyReport:
    """Transfer success rates across architecture pairs, both directions."""
    report = StudyReport(study="rq1-transfer", seed=cfg.seed, config_snapshot=cfg.raw_text)
    dataset = load_dataset(cfg)
    eval_set = eval_slice(cfg, dataset)
    pairs = _transfer_pairs(cfg)
    if not pairs:
        raise ValueError("rq1-transfer needs cross-family model pairs with one dynamic side")
    attack = cfg.attack.name if cfg.attack.name != "early-attack" else "pgd"
    summary_rows = []
    reports = []
    by_direction: dict[str, list[float]] = {"S2D": [], "D2S": []}
    for s_name, t_name, pair in pairs:
        result = run_transfer(pair, attack, eval_set.images, eval_set.labels,
                              config=_budget_config(cfg))
        reports.append(result)
        by_direction[result.direction].append(result.success_rate)
        pair_id = f"{s_name}->{t_name}"
        summary_rows.append({"pair": pair_id, "direction": result.direction,
                             "attack": attack, "success_rate": result.success_rate,
                             "evaluated": result.evaluated, "total": result.total})
        write_transfer_records_csv(out_dir / f"records_{s_name}_to_{t_name}.csv", result)
        if pair.surrogate_type == DYNAMIC and result.records:
            gen_exits = [r.generation_exit for r in result.records]
            report.histograms[f"generation_exits_{s_name}_to_{t_name}"] = density_histogram(gen_exits)
    write_transfer_summary_csv(out_dir / "transfer_summary.csv", reports,
                               pair_ids=[r["pair"] for r in summary_rows])
    report.tables["transfer_summary"] = summary_rows

    d2s_mean = float(np.mean(by_direction["D2S"])) if by_direction["D2S"] else None
    s2d_mean = float(np.mean(by_direction["S2D"])) if by_direction["S2D"] else None
    if d2s_mean is not None and s2d_mean is not None:
        holds = d2s_mean >= s2d_mean
        note = (f"direction-means: D2S={d2s_mean:.6g} S2D={s2d_mean:.6g} "
                f"d2s_ge_s2d={'yes' if holds else 'NO (expectation violated)'}")
        report.notes.append(note)
        report.tables["direction_means"] = [
            {"direction": "D2S", "mean_success_rate": d2s_mean},
            {"direction": "S2D", "mean_success_rate": s2d_mean},
            {"direction": "d2s_ge_s2d", "mean_success_rate": float(holds)},
        ]
        _write_csv(out_dir / "direction_means.csv", ["direction", "mean_success_rate"],
                   [[r["direction"], f"{r['mean_success_rate']:.9g}"]
                    for r in report.tables["direction_means"]])
    return report


def _run_rq2(cfg: StudyConfig, out_dir: Path) -> StudyReport:
    """Exit-delta distribution on a dynamic target under transferred attacks."""
    report = StudyReport(study="rq2-efficiency", seed=cfg.seed, config_snapshot=cfg.raw_text)
    dataset = load_dataset(cfg)
    eval_set = eval_slice(cfg, dataset)
    pairs = [(s, t, p) for s, t, p in _transfer_pairs(cfg) if p.target_type == DYNAMIC]
    if not pairs:
        raise ValueError("rq2-efficiency needs a static-surrogate/dynamic-target pair")
    s_name, t_name, pair = pairs[0]
    attack = cfg.attack.name if cfg.attack.name != "early-attack" else "pgd"
    result = run_transfer(pair, attack, eval_set.images, eval_set.labels,
                          config=_budget_config(cfg))
    deltas = [r.exit_delta for r in result.records if r.exit_delta is not None]
    if not deltas:
        raise ValueError("no evaluated samples; dynamic target never classified correctly")
    report.histograms["exit_delta_density"] = density_histogram(deltas)
    rows = [{"sample_id": r.sample_id, "benign_exit": r.target_benign_exit,
             "adv_exit": r.target_adv_exit, "exit_delta": r.exit_delta,
             "flipped": int(r.flipped)} for r in result.records]
    report.tables["exit_deltas"] = rows
    _write_csv(out_dir / "exit_deltas.csv",
               ["sample_id", "benign_exit", "adv_exit", "exit_delta", "flipped"],
               [[r["sample_id"], r["benign_exit"], r["adv_exit"], r["exit_delta"], r["flipped"]]
                for r in rows])
    mean_delta = float(np.mean(deltas))
    positive_pct = 100.0 * float(np.mean([d > 0 for d in deltas]))
    report.tables["summary"] = [{"pair": f"{s_name}->{t_name}", "attack": attack,
                                 "mean_exit_delta": mean_delta,
                                 "positive_delta_pct": positive_pct,
                                 "evaluated": result.evaluated}]
    _write_csv(out_dir / "summary.csv",
               ["pair", "attack", "mean_exit_delta", "positive_delta_pct", "evaluated"],
               [[f"{s_name}->{t_name}", attack, f"{mean_delta:.9g}",
                 f"{positive_pct:.9g}", result.evaluated]])
    return report


def _run_rq3(cfg: StudyConfig, out_dir: Path) -> StudyReport:
    """First-flipped-exit (K+1) distribution for final-exit-flipping attacks."""
    report = StudyReport(study="rq3-first-flip", seed=cfg.seed, config_snapshot=cfg.raw_text)
    if not cfg.models:
        raise ValueError("rq3-first-flip needs a model")
    model, _ = load_model_entry(cfg.models[0])
    dataset = load_dataset(cfg)
    eval_set = eval_slice(cfg, dataset)
    attack = cfg.attack.name if cfg.attack.name != "early-attack" else "pgd"
    budget = _budget_config(cfg)
    final_exit = model.exit_count
    rows = []
    firsts = []
    for i in range(len(eval_set)):
        x = eval_set.images[i]
        label = int(eval_set.labels[i])
        benign = trace_batch(model, x[None])[0]
        p = benign.final_label
        per_sample = atk.BudgetedAttackConfig(
            epsilon=budget.epsilon, steps=budget.steps, step_size=budget.step_size,
            momentum_decay=budget.momentum_decay, random_init=budget.random_init,
            seed=cfg.seed * 100003 + i)
        if attack == "fgsm":
            x_adv = atk.fgsm(model, x, label, final_exit, budget.epsilon)
        elif attack == "pgd":
            x_adv = atk.pgd(model, x, label, final_exit, per_sample)
        else:
            x_adv = atk.mifgsm(model, x, label, final_exit, per_sample)
        adv = trace_batch(model, x_adv)[0]
        if adv.final_label == p:
            continue  # the study only covers samples whose final exit flipped
        first = first_flipped_exit([int(v) for v in adv.labels], p)
        firsts.append(first)
        rows.append({"sample_id": i, "benign_final": p, "adv_final": adv.final_label,
                     "first_flipped_exit": first,
                     "psnr_db": psnr(x, x_adv[0])})
    if not firsts:
        report.notes.append("no sample flipped the final exit; histogram omitted")
    else:
        report.histograms["first_flipped_exit_density"] = density_histogram(firsts)
    report.tables["first_flips"] = rows
    _write_csv(out_dir / "first_flips.csv",
               ["sample_id", "benign_final", "adv_final", "first_flipped_exit", "psnr_db"],
               [[r["sample_id"], r["benign_final"], r["adv_final"], r["first_flipped_exit"],
                 f"{r['psnr_db']:.9g}"] for r in rows])
    return report


def _run_early_attack_eval(cfg: StudyConfig, out_dir: Path) -> StudyReport:
    """Early-attack success vs FGSM/PGD baselines under the strict criterion.

    The sweep short-circuits per sample at the first successful alpha; the
    winning alpha reported per model is the most frequent winner. Baselines
    attack one randomly chosen early exit and are judged by the same
    all-early-exits-flipped-final-kept criterion.
    """
    report = StudyReport(study="early-attack-eval", seed=cfg.seed, config_snapshot=cfg.raw_text)
    if not cfg.models:
        raise ValueError("early-attack-eval needs at least one model")
    dataset = load_dataset(cfg)
    eval_set = eval_slice(cfg, dataset)
    n = min(cfg.attack.samples, len(eval_set))
    budget = _budget_config(cfg)
    table_rows = []
    for entry in cfg.models:
        model, _ = load_model_entry(entry)
        rng = np.random.default_rng(cfg.seed)
        early_wins: dict[float, int] = {}
        ea_success = 0
        fgsm_success = 0
        pgd_success = 0
        psnrs = []
        for i in range(n):
            x = eval_set.images[i]
            label = int(eval_set.labels[i])
            outcome, alpha = atk.alpha_sweep(model, x, sweep=cfg.attack.alpha_sweep,
                                             c=cfg.attack.c, iterations=cfg.attack.iterations,
                                             step_size=cfg.attack.attack_step_size,
                                             w_init=cfg.attack.w_init,
                                             seed=cfg.seed * 100003 + i)
            if outcome.success:
                ea_success += 1
                early_wins[alpha] = early_wins.get(alpha, 0) + 1
                psnrs.append(psnr(outcome.x, outcome.x_adv))
            # baselines: budgeted attacks on one random early exit, scored
            # with the same success criterion
            early_exit = int(rng.integers(1, model.exit_count))
            per_sample = atk.BudgetedAttackConfig(
                epsilon=budget.epsilon, steps=budget.steps, step_size=budget.step_size,
                momentum_decay=budget.momentum_decay, random_init=budget.random_init,
                seed=cfg.seed * 100003 + i)
            p = trace_batch(model, x[None])[0].final_label
            x_f = atk.fgsm(model, x, label, early_exit, budget.epsilon)
            fgsm_success += int(atk.early_attack_success(model, x_f, p))
            x_p = atk.pgd(model, x, label, early_exit, per_sample)
            pgd_success += int(atk.early_attack_success(model, x_p, p))
        best_alpha = None
        if early_wins:
            top = max(early_wins.values())
            best_alpha = min(a for a, k in early_wins.items() if k == top)
        mean_psnr = float(np.mean(psnrs)) if psnrs else None
        table_rows.append({
            "model": entry.name,
            "early_attack_pct": 100.0 * ea_success / n if n else 0.0,
            "best_alpha": best_alpha,
            "pgd_pct": 100.0 * pgd_success / n if n else 0.0,
            "fgsm_pct": 100.0 * fgsm_success / n if n else 0.0,
            "mean_psnr_db": mean_psnr,
            "samples": n,
        })
    report.tables["early_attack_eval"] = table_rows
    _write_csv(out_dir / "early_attack_eval.csv",
               ["model", "early_attack_pct", "best_alpha", "pgd_pct", "fgsm_pct",
                "mean_psnr_db", "samples"],
               [[r["model"], f"{r['early_attack_pct']:.9g}",
                 "" if r["best_alpha"] is None else f"{r['best_alpha']:.9g}",
                 f"{r['pgd_pct']:.9g}", f"{r['fgsm_pct']:.9g}",
                 "" if r["mean_psnr_db"] is None else f"{r['mean_psnr_db']:.9g}",
                 r["samples"]] for r in table_rows])
    return report
