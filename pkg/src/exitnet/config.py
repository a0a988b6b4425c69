"""Study configuration: one INI file per run, strictly validated.

Sections are limited to models, dataset, policy, attack, and seeds.
Unknown sections or keys raise instead of being ignored, so a typo can
never silently change an experiment. Numeric fields accept fractions
like ``8/255``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import DEFAULT_ALPHA_SWEEP, W_INIT_BENIGN, W_INIT_RANDOM
from .blackbox import DYNAMIC, STATIC
from .models import FAMILIES


class ConfigError(ValueError):
    pass


def parse_fraction(text: str) -> float:
    """A float literal or a ratio like 8/255."""
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        try:
            return float(num) / float(den)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad fraction {text!r}: {exc}") from exc
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad number {text!r}") from exc


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"bad integer {text!r}") from exc


@dataclass(frozen=True)
class ModelEntry:
    name: str
    family: str = "plain-conv"
    exits: int = 3
    classes: int = 10
    base_width: int = 16
    checkpoint: str | None = None
    model_type: str = STATIC
    policy_path: str | None = None
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05


@dataclass(frozen=True)
class DatasetEntry:
    path: str | None = None
    synthetic_count: int = 2000
    synthetic_classes: int = 10
    synthetic_shape: tuple[int, int, int] = (32, 32, 3)
    synthetic_noise: float = 0.12
    synthetic_seed: int = 0
    eval_count: int = 50


@dataclass(frozen=True)
class PolicyEntry:
    target_fractions: tuple[float, ...] | float = 0.3
    path: str | None = None


@dataclass(frozen=True)
class AttackEntry:
    name: str = "pgd"
    epsilon: float = 8.0 / 255.0
    steps: int = 10
    step_size: float = 2.0 / 255.0
    momentum_decay: float = 1.0
    random_init: bool = True
    alpha_sweep: tuple[float, ...] = DEFAULT_ALPHA_SWEEP
    c: float = 50.0
    iterations: int = 1000
    attack_step_size: float = 0.01
    w_init: str = W_INIT_BENIGN
    samples: int = 50
    exit_mode: str = "final"  # final | dynamic | random-early | integer


@dataclass(frozen=True)
class StudyConfig:
    models: tuple[ModelEntry, ...] = ()
    dataset: DatasetEntry = DatasetEntry()
    policy: PolicyEntry = PolicyEntry()
    attack: AttackEntry = AttackEntry()
    seed: int = 0
    raw_text: str = ""


_MODEL_KEYS = {"family", "exits", "classes", "base_width", "checkpoint", "type",
               "policy", "epochs", "batch_size", "learning_rate"}
_DATASET_KEYS = {"path", "synthetic.count", "synthetic.classes", "synthetic.shape",
                 "synthetic.noise", "synthetic.seed", "eval_count"}
_POLICY_KEYS = {"target_fractions", "path"}
_ATTACK_KEYS = {"name", "epsilon", "steps", "step_size", "momentum_decay", "random_init",
                "alpha_sweep", "c", "iterations", "attack_step_size", "w_init",
                "samples", "exit"}
_SEED_KEYS = {"seed"}
_SECTIONS = {"models", "dataset", "policy", "attack", "seeds"}


def _parse_models(section) -> tuple[ModelEntry, ...]:
    grouped: dict[str, dict[str, str]] = {}
    for key, value in section.items():
        name, dot, suffix = key.partition(".")
        if not dot or suffix not in _MODEL_KEYS:
            raise ConfigError(f"unknown key {key!r} in [models]; use <name>.<field> "
                              f"with fields {sorted(_MODEL_KEYS)}")
        grouped.setdefault(name, {})[suffix] = value
    entries = []
    for name, fields in grouped.items():
        family = fields.get("family", "plain-conv")
        if family not in FAMILIES:
            raise ConfigError(f"model {name!r}: unknown family {family!r}")
        model_type = fields.get("type", STATIC)
        if model_type not in (STATIC, DYNAMIC):
            raise ConfigError(f"model {name!r}: type must be {STATIC!r} or {DYNAMIC!r}")
        entries.append(ModelEntry(
            name=name,
            family=family,
            exits=_parse_int(fields.get("exits", "3")),
            classes=_parse_int(fields.get("classes", "10")),
            base_width=_parse_int(fields.get("base_width", "16")),
            checkpoint=fields.get("checkpoint"),
            model_type=model_type,
            policy_path=fields.get("policy"),
            epochs=_parse_int(fields.get("epochs", "10")),
            batch_size=_parse_int(fields.get("batch_size", "32")),
            learning_rate=parse_fraction(fields.get("learning_rate", "0.05")),
        ))
    return tuple(entries)


def _parse_dataset(section) -> DatasetEntry:
    for key in section:
        if key not in _DATASET_KEYS:
            raise ConfigError(f"unknown key {key!r} in [dataset]; allowed: {sorted(_DATASET_KEYS)}")
    shape = (32, 32, 3)
    if "synthetic.shape" in section:
        parts = section["synthetic.shape"].lower().split("x")
        if len(parts) != 3:
            raise ConfigError("synthetic.shape must look like 32x32x3 (HxWxC)")
        shape = tuple(_parse_int(p) for p in parts)
    return DatasetEntry(
        path=section.get("path"),
        synthetic_count=_parse_int(section.get("synthetic.count", "2000")),
        synthetic_classes=_parse_int(section.get("synthetic.classes", "10")),
        synthetic_shape=shape,
        synthetic_noise=parse_fraction(section.get("synthetic.noise", "0.12")),
        synthetic_seed=_parse_int(section.get("synthetic.seed", "0")),
        eval_count=_parse_int(section.get("eval_count", "50")),
    )


def _parse_policy(section) -> PolicyEntry:
    for key in section:
        if key not in _POLICY_KEYS:
            raise ConfigError(f"unknown key {key!r} in [policy]; allowed: {sorted(_POLICY_KEYS)}")
    fractions: tuple[float, ...] | float = 0.3
    if "target_fractions" in section:
        parts = [p for p in section["target_fractions"].split(",") if p.strip()]
        values = tuple(parse_fraction(p) for p in parts)
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ConfigError("target fractions must lie in [0, 1]")
        fractions = values[0] if len(values) == 1 else values
    return PolicyEntry(target_fractions=fractions, path=section.get("path"))


def _parse_attack(section) -> AttackEntry:
    for key in section:
        if key not in _ATTACK_KEYS:
            raise ConfigError(f"unknown key {key!r} in [attack]; allowed: {sorted(_ATTACK_KEYS)}")
    name = section.get("name", "pgd")
    if name not in ("fgsm", "pgd", "mifgsm", "early-attack"):
        raise ConfigError(f"unknown attack {name!r}")
    sweep = DEFAULT_ALPHA_SWEEP
    if "alpha_sweep" in section:
        sweep = tuple(parse_fraction(p) for p in section["alpha_sweep"].split(",") if p.strip())
        if not sweep:
            raise ConfigError("alpha_sweep must list at least one value")
    w_init = section.get("w_init", W_INIT_BENIGN)
    if w_init not in (W_INIT_BENIGN, W_INIT_RANDOM):
        raise ConfigError(f"w_init must be {W_INIT_BENIGN!r} or {W_INIT_RANDOM!r}")
    exit_mode = section.get("exit", "final")
    if exit_mode not in ("final", "dynamic", "random-early") :
        try:
            int(exit_mode)
        except ValueError:
            raise ConfigError(f"exit must be final, dynamic, random-early, or an exit index, "
                              f"got {exit_mode!r}") from None
    return AttackEntry(
        name=name,
        epsilon=parse_fraction(section.get("epsilon", "8/255")),
        steps=_parse_int(section.get("steps", "10")),
        step_size=parse_fraction(section.get("step_size", "2/255")),
        momentum_decay=parse_fraction(section.get("momentum_decay", "1.0")),
        random_init=_parse_bool(section.get("random_init", "true")),
        alpha_sweep=sweep,
        c=parse_fraction(section.get("c", "50")),
        iterations=_parse_int(section.get("iterations", "1000")),
        attack_step_size=parse_fraction(section.get("attack_step_size", "0.01")),
        w_init=w_init,
        samples=_parse_int(section.get("samples", "50")),
        exit_mode=exit_mode,
    )


def load_config(path) -> StudyConfig:
    text = Path(path).read_text()
    return parse_config(text)


def parse_config(text: str) -> StudyConfig:
    parser = configparser.ConfigParser(interpolation=None)
    # keys are case-sensitive so model names survive round trips
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]; allowed: {sorted(_SECTIONS)}")
    seed = 0
    if parser.has_section("seeds"):
        for key in parser["seeds"]:
            if key not in _SEED_KEYS:
                raise ConfigError(f"unknown key {key!r} in [seeds]; allowed: {sorted(_SEED_KEYS)}")
        seed = _parse_int(parser["seeds"].get("seed", "0"))
    return StudyConfig(
        models=_parse_models(parser["models"]) if parser.has_section("models") else (),
        dataset=_parse_dataset(parser["dataset"]) if parser.has_section("dataset") else DatasetEntry(),
        policy=_parse_policy(parser["policy"]) if parser.has_section("policy") else PolicyEntry(),
        attack=_parse_attack(parser["attack"]) if parser.has_section("attack") else AttackEntry(),
        seed=seed,
        raw_text=text,
    )
