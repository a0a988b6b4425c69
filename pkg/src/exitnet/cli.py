"""Command-line entry points.

Every subcommand reads one INI config, runs deterministically from the
seed, and writes artifacts into --out. Failures exit nonzero after
printing a single machine-readable JSON error line to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import attacks as atk
from .blackbox import (DYNAMIC, LabelOracle, SurrogateDataset, TransferPair,
                       harvest_labels, run_transfer, train_surrogate,
                       write_transfer_records_csv, write_transfer_summary_csv)
from .checkpoint import save_checkpoint
from .config import StudyConfig, load_config
from .data import Dataset, save_tensor_file, train_validation_split
from .inference import calibrate_thresholds, infer_dynamic, trace_batch
from .metrics import psnr
from .models import build_model, preset_spec
from .studies import (STUDIES, eval_slice, load_dataset, load_model_entry,
                      load_policy_json, run_study, save_policy_json)
from .training import TrainingConfig, train


def _training_config(entry, seed: int) -> TrainingConfig:
    return TrainingConfig(epochs=entry.epochs, batch_size=entry.batch_size,
                          learning_rate=entry.learning_rate, seed=seed)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> StudyConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> None:
    """Build and train every model in the config; save checkpoints."""
    cfg = _load(args)
    out = _out_dir(args)
    dataset = load_dataset(cfg)
    rows = []
    for entry in cfg.models:
        spec = preset_spec(entry.family, exits=entry.exits, class_count=entry.classes,
                           input_shape=dataset.input_shape, base_width=entry.base_width)
        model = build_model(spec, seed=cfg.seed)
        model, report = train(model, dataset, _training_config(entry, cfg.seed))
        ckpt = Path(entry.checkpoint) if entry.checkpoint else out / f"{entry.name}.ckpt"
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, ckpt)
        rows.append([entry.name, str(ckpt)] + [f"{a:.9g}" for a in report.per_exit_accuracy])
        print(f"{entry.name}: checkpoint {ckpt}, per-exit accuracy "
              + " ".join(f"{a:.3f}" for a in report.per_exit_accuracy))
    n_exits = max((len(r) - 2 for r in rows), default=0)
    header = ["model", "checkpoint"] + [f"acc_exit_{i + 1}" for i in range(n_exits)]
    with open(out / "training_report.csv", "w", newline="") as f:
        import csv
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_calibrate(args) -> None:
    """Fit exit thresholds on held-out data and save the policy."""
    cfg = _load(args)
    out = _out_dir(args)
    if not cfg.models:
        raise ValueError("calibrate needs a model entry")
    # calibrate the first dynamic entry, or the first model otherwise
    entry = next((m for m in cfg.models if m.model_type == DYNAMIC), cfg.models[0])
    model, _ = load_model_entry(dataclasses.replace(entry, model_type="sdnn"))
    dataset = load_dataset(cfg)
    _, val = train_validation_split(dataset, 0.2, cfg.seed)
    policy = calibrate_thresholds(model, val.images, cfg.policy.target_fractions)
    path = (Path(entry.policy_path) if entry.policy_path
            else Path(cfg.policy.path) if cfg.policy.path
            else out / f"{entry.name}_policy.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_policy_json(policy, path)
    print(f"policy {path}: thresholds {policy.thresholds}")


def cmd_attack(args) -> None:
    """White-box attacks on one model; outcomes CSV plus adversarial tensors."""
    cfg = _load(args)
    out = _out_dir(args)
    if not cfg.models:
        raise ValueError("attack needs a model entry")
    entry = cfg.models[0]
    model, policy = load_model_entry(entry)
    dataset = load_dataset(cfg)
    eval_set = eval_slice(cfg, dataset)
    n = min(cfg.attack.samples, len(eval_set))
    a = cfg.attack
    rng = np.random.default_rng(cfg.seed)
    outcomes = []
    adv_images = []
    for i in range(n):
        x = eval_set.images[i]
        label = int(eval_set.labels[i])
        if a.name == "early-attack":
            outcome, _ = atk.alpha_sweep(model, x, sweep=a.alpha_sweep, c=a.c,
                                         iterations=a.iterations, step_size=a.attack_step_size,
                                         w_init=a.w_init, seed=cfg.seed * 100003 + i)
        else:
            if a.exit_mode == "final":
                exit_index = model.exit_count
            elif a.exit_mode == "dynamic":
                if policy is None:
                    raise ValueError("exit=dynamic needs a dynamic model with a policy")
                exit_index = infer_dynamic(model, x, policy).exit_index
            elif a.exit_mode == "random-early":
                exit_index = int(rng.integers(1, model.exit_count))
            else:
                exit_index = int(a.exit_mode)
            per_sample = atk.BudgetedAttackConfig(
                epsilon=a.epsilon, steps=a.steps, step_size=a.step_size,
                momentum_decay=a.momentum_decay, random_init=a.random_init,
                seed=cfg.seed * 100003 + i)
            if a.name == "fgsm":
                x_adv = atk.fgsm(model, x, label, exit_index, a.epsilon)
            elif a.name == "pgd":
                x_adv = atk.pgd(model, x, label, exit_index, per_sample)
            else:
                x_adv = atk.mifgsm(model, x, label, exit_index, per_sample)
            benign = trace_batch(model, x[None])[0]
            adv = trace_batch(model, x_adv)[0]
            outcome = atk.AttackOutcome(
                attack=a.name, x=x, x_adv=x_adv[0],
                success=adv.final_label != benign.final_label,
                iterations=1 if a.name == "fgsm" else a.steps,
                benign_exit_labels=tuple(int(v) for v in benign.labels),
                adv_exit_labels=tuple(int(v) for v in adv.labels))
        outcomes.append(outcome)
        adv_images.append(outcome.x_adv)
    atk.write_outcomes_csv(out / "attack_outcomes.csv", outcomes)
    adv_set = Dataset(images=np.stack(adv_images), labels=eval_set.labels[:n].copy(),
                      class_count=dataset.class_count)
    save_tensor_file(out / "adversarial.bin", adv_set)
    mean_psnr = float(np.mean([psnr(o.x, o.x_adv) for o in outcomes if o.l2 > 0] or [float("inf")]))
    print(f"{a.name}: {sum(o.success for o in outcomes)}/{n} successes, "
          f"mean PSNR {mean_psnr:.2f} dB, outputs in {out}")


def cmd_harvest(args) -> None:
    """Query the target on held-out originals plus corrupted copies."""
    cfg = _load(args)
    out = _out_dir(args)
    if not cfg.models:
        raise ValueError("harvest needs a target model entry")
    model, policy = load_model_entry(cfg.models[0])
    dataset = load_dataset(cfg)
    _, val = train_validation_split(dataset, 0.2, cfg.seed)
    half = max(1, len(val) // 2)  # originals: half of the held-out split
    originals = val.images[:half]
    oracle = LabelOracle(model, policy)
    harvested = harvest_labels(oracle, originals, seed=cfg.seed)
    tensor_path = out / "harvest.bin"
    harvested.save(tensor_path, out / "harvest_provenance.csv")
    print(f"harvested {len(harvested)} labeled samples "
          f"({half} originals) into {tensor_path}")


def cmd_surrogate(args) -> None:
    """Train a surrogate on a harvested dataset; report oracle agreement."""
    cfg = _load(args)
    out = _out_dir(args)
    if len(cfg.models) < 2:
        raise ValueError("surrogate needs two model entries: the surrogate spec "
                         "and the harvest target")
    surrogate_entry, target_entry = cfg.models[0], cfg.models[1]
    target, target_policy = load_model_entry(target_entry)
    if cfg.dataset.path is None:
        raise ValueError("surrogate needs dataset.path pointing at a harvest tensor file")
    harvested = SurrogateDataset.load(cfg.dataset.path,
                                      str(cfg.dataset.path) + ".provenance.csv"
                                      if Path(str(cfg.dataset.path) + ".provenance.csv").exists()
                                      else Path(cfg.dataset.path).with_name("harvest_provenance.csv"))
    spec = preset_spec(surrogate_entry.family, exits=surrogate_entry.exits,
                       class_count=harvested.class_count,
                       input_shape=target.spec.input_shape,
                       base_width=surrogate_entry.base_width)
    oracle = LabelOracle(target, target_policy)
    model, report = train_surrogate(spec, harvested, _training_config(surrogate_entry, cfg.seed),
                                    oracle)
    ckpt = Path(surrogate_entry.checkpoint) if surrogate_entry.checkpoint else out / "surrogate.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    print(f"surrogate saved to {ckpt}; probe agreement {report.probe_agreement:.3f}")


def cmd_transfer(args) -> None:
    """Attack on the surrogate, evaluate on the target."""
    cfg = _load(args)
    out = _out_dir(args)
    if len(cfg.models) < 2:
        raise ValueError("transfer needs two model entries: surrogate then target")
    s_entry, t_entry = cfg.models[0], cfg.models[1]
    surrogate, s_policy = load_model_entry(s_entry)
    target, t_policy = load_model_entry(t_entry)
    pair = TransferPair(surrogate=surrogate, surrogate_type=s_entry.model_type,
                        target=target, target_type=t_entry.model_type,
                        surrogate_policy=s_policy, target_policy=t_policy)
    dataset = load_dataset(cfg)
    eval_set = eval_slice(cfg, dataset)
    attack = cfg.attack.name if cfg.attack.name != "early-attack" else "pgd"
    report = run_transfer(pair, attack, eval_set.images, eval_set.labels,
                          config=atk.BudgetedAttackConfig(
                              epsilon=cfg.attack.epsilon, steps=cfg.attack.steps,
                              step_size=cfg.attack.step_size,
                              momentum_decay=cfg.attack.momentum_decay,
                              random_init=cfg.attack.random_init, seed=cfg.seed))
    write_transfer_summary_csv(out / "transfer_summary.csv", [report],
                               pair_ids=[f"{s_entry.name}->{t_entry.name}"])
    write_transfer_records_csv(out / "transfer_records.csv", report)
    print(f"{report.direction} {attack}: success rate {report.success_rate:.1f}% "
          f"over {report.evaluated} benign-correct samples")


def cmd_study(args) -> None:
    cfg = _load(args)
    report = run_study(args.name, cfg, args.out)
    print(f"study {args.name} written to {args.out}; "
          f"tables: {sorted(report.tables)} histograms: {sorted(report.histograms)}")


def cmd_report(args) -> None:
    """Render SVG plots for every histogram CSV in the output directory."""
    out = Path(args.out)
    hist_files = sorted(p for p in out.glob("*.csv") if _is_histogram_csv(p))
    if not hist_files:
        print(f"no histogram CSVs found in {out}")
        return
    try:
        import matplotlib
        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("plot rendering needs matplotlib; install the 'plot' extra") from exc
    import csv as csv_mod
    for path in hist_files:
        with open(path, newline="") as f:
            rows = list(csv_mod.reader(f))[1:]
        values = [float(r[0]) for r in rows]
        masses = [float(r[1]) for r in rows]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(values, masses, width=0.8 * (values[1] - values[0] if len(values) > 1 else 1.0))
        ax.set_xlabel("value")
        ax.set_ylabel("density")
        ax.set_title(path.stem)
        fig.tight_layout()
        fig.savefig(path.with_suffix(".svg"))
        plt.close(fig)
        print(f"rendered {path.with_suffix('.svg')}")


def _is_histogram_csv(path: Path) -> bool:
    with open(path, newline="") as f:
        first = f.readline().strip()
    return first == "value,mass"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exitnet",
                                     description="Early-exit networks: training, "
                                                 "dynamic inference, attacks, studies.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("train", help="train models from a config"))
    common(sub.add_parser("calibrate", help="fit exit thresholds"))
    common(sub.add_parser("attack", help="run white-box attacks"))
    common(sub.add_parser("harvest", help="harvest labels through the target oracle"))
    common(sub.add_parser("surrogate", help="train a surrogate on harvested labels"))
    common(sub.add_parser("transfer", help="transfer attacks surrogate -> target"))
    study = sub.add_parser("study", help="run a full study")
    study.add_argument("--name", required=True, choices=STUDIES)
    common(study)
    common(sub.add_parser("report", help="render SVG plots from histogram CSVs"),
           needs_config=False)
    return parser


HANDLERS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "attack": cmd_attack,
    "harvest": cmd_harvest,
    "surrogate": cmd_surrogate,
    "transfer": cmd_transfer,
    "study": cmd_study,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        HANDLERS[args.command](args)
    except Exception as exc:  # single machine-readable error line, nonzero exit
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
