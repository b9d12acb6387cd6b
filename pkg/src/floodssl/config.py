"""Flat ``key = value`` experiment configuration with task-dependent defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "classification"
    seed: int = 0
    epochs: int = 150
    # alpha ramp
    alpha_i: float = 0.0
    alpha_f: float = 1.0
    e_i: int = 10
    e_f: int = 135
    # optimization
    batch_size: int = 64
    steps_per_epoch: int = 0          # 0: ceil(labeled / batch_size)
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    pseudo_optimizer: str = ""        # "" keeps the supervised-phase optimizer
    pseudo_lr: float = 0.01
    # losses
    w_bce: float = 0.5
    w_dice: float = 0.5
    dice_smooth: float = 1e-6
    positive_class: int = 1
    # data
    data: str = ""                    # manifest path; empty -> synthetic data
    unlabeled_ratio: int = 1
    n_labeled: int = 398
    n_unlabeled: int = 1047
    n_val: int = 450
    n_test: int = 448
    image_size: int = 32
    positive_fraction: float = 51 / 398
    n_classes: int = 2
    width: int = 8
    augment: bool = True
    preprocess: bool = False
    outdir: str = ""

    def validate(self) -> ExperimentConfig:
        def need(ok: bool, key: str, msg: str):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        need(self.task in ("classification", "segmentation"), "task",
             "must be classification or segmentation")
        need(self.epochs > 0, "epochs", "must be > 0")
        need(self.batch_size > 0, "batch_size", "must be > 0")
        need(self.steps_per_epoch >= 0, "steps_per_epoch", "must be >= 0")
        need(0 <= self.alpha_i <= self.alpha_f, "alpha_i", "0 <= alpha_i <= alpha_f violated")
        need(self.e_i < self.e_f, "e_i", "e_i < e_f violated")
        need(self.e_i >= 0, "e_i", "must be >= 0")
        need(self.optimizer in ("sgd", "adam"), "optimizer", "must be sgd or adam")
        need(self.pseudo_optimizer in ("", "sgd", "adam"), "pseudo_optimizer",
             "must be empty, sgd or adam")
        need(self.lr > 0, "lr", "must be > 0")
        need(self.pseudo_lr > 0, "pseudo_lr", "must be > 0")
        need(0 <= self.momentum < 1, "momentum", "must be in [0, 1)")
        need(all(b > a for a, b in zip(self.milestones, self.milestones[1:])), "milestones",
             "must be strictly ascending")
        need(0 < self.gamma <= 1, "gamma", "must be in (0, 1]")
        need(self.w_bce >= 0 and self.w_dice >= 0 and self.w_bce + self.w_dice > 0, "w_bce",
             "loss weights must be nonnegative with positive sum")
        need(self.dice_smooth > 0, "dice_smooth", "must be > 0")
        need(self.unlabeled_ratio >= 1, "unlabeled_ratio", "must be >= 1")
        need(self.image_size >= 4 and self.image_size % 4 == 0, "image_size",
             "must be a positive multiple of 4")
        need(0 < self.positive_fraction < 1, "positive_fraction", "must be in (0, 1)")
        need(self.n_classes >= 2, "n_classes", "must be >= 2")
        if self.task == "classification":
            need(self.n_classes == 2, "n_classes", "classification is binary")
        need(0 <= self.positive_class < self.n_classes, "positive_class", "out of range")
        need(self.width >= 1, "width", "must be >= 1")
        for key in ("n_labeled", "n_unlabeled", "n_val", "n_test"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


SEGMENTATION_DEFAULTS = {
    "batch_size": 24,
    "optimizer": "adam",
    "lr": 0.01,
    "milestones": (10, 30, 50),
    "gamma": 0.1,
    "pseudo_optimizer": "sgd",
    "pseudo_lr": 0.01,
    "unlabeled_ratio": 10,
    "n_classes": 10,
    "preprocess": True,
}


def defaults_for(task: str) -> ExperimentConfig:
    cfg = ExperimentConfig(task=task)
    if task == "segmentation":
        cfg = dataclasses.replace(cfg, **SEGMENTATION_DEFAULTS)
    return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_text(text: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown key")
        values[key] = _coerce(key, raw)
    return values


def parse_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None,
                 task: str | None = None) -> ExperimentConfig:
    """Resolve defaults, then file values, then overrides (strings)."""
    file_values = parse_text(Path(path).read_text(encoding="utf-8")) if path else {}
    override_values = {}
    for key, raw in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown key")
        override_values[key] = _coerce(key, str(raw))
    chosen_task = task or override_values.get("task") or file_values.get("task") or "classification"
    cfg = defaults_for(str(chosen_task))
    merged = {**file_values, **override_values, "task": chosen_task}
    cfg = dataclasses.replace(cfg, **merged)
    return cfg.validate()


def config_keys() -> list[str]:
    return list(_FIELD_TYPES)
