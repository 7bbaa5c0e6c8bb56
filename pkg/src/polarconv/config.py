"""Experiment configuration: flat key = value sections in INI syntax.

Grammar (documented in README): `[section]` headers, one `key = value` per
line, `#` starts a comment, blank lines ignored. Recognized sections are
[experiment], [operator], [optimizer], [attack]; unknown keys are errors so
typos never silently fall back to defaults.
"""

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .network import ArchitectureDescription, ConfigError, RegularizerKind, RegularizerSpec
from .operators import AngularKind, MagnitudeKind, OperatorSpec, WeightingMode
from .optimizers import (GradientMode, OptimizerKind, ProjectionSchedule, UpdateRule)


@dataclass
class AttackConfig:
    method: str = "fgsm"          # fgsm | bim
    epsilon: float = 8.0          # on the 0-255 pixel scale
    tau: float = 2.0              # per-iteration step, same scale
    iterations: int = 20

    def __post_init__(self):
        if self.method not in ("fgsm", "bim"):
            raise ConfigError(f"unknown attack method '{self.method}'")
        if self.iterations < 1:
            raise ConfigError("attack needs iterations >= 1")
        if self.method == "bim" and self.epsilon < self.tau:
            raise ConfigError("bim needs epsilon >= tau")


@dataclass
class ExperimentConfig:
    arch: ArchitectureDescription
    dataset: str = "mnist"        # mnist | cifar10
    data_dir: str = "data/digits"
    subset: int = 0               # 0 = use the full training set
    batch_size: int = 64
    total_steps: int = 2000
    eval_every: int = 200
    seed: int = 0
    precision: str = "float32"    # float32 | float64
    out_dir: str = "runs/default"
    init_checkpoint: str | None = None
    augment: bool = False
    adv_fraction: float = 0.5     # adversarial share of each batch in adv-train
    update_rule: UpdateRule = field(default_factory=UpdateRule)
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"unknown dataset '{self.dataset}'")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision '{self.precision}'")


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: '{v}'")


_KNOWN = {
    "experiment": {"arch", "custom_layers", "dataset", "data_dir", "subset", "batch_size",
                   "total_steps", "eval_every", "seed", "bn", "relu", "precision",
                   "out_dir", "init_checkpoint", "width", "num_classes", "augment",
                   "adv_fraction"},
    "operator": {"magnitude", "angular", "weighting", "alpha", "beta", "sigmoid_k",
                 "rho_learnable"},
    "optimizer": {"kind", "lr", "lr_schedule", "momentum", "gradient_mode",
                  "projection_interval", "projection_s", "regularizer", "reg_lambda"},
    "attack": {"method", "epsilon", "tau", "iterations"},
}


def _parse_schedule(text: str, total_steps: int):
    """`step:lr` pairs, comma separated. Steps may be fractions of the run."""
    entries = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        s, lr = part.split(":")
        step = float(s)
        if 0 < step < 1:
            step = step * total_steps
        entries.append((int(step), float(lr)))
    return sorted(entries)


def parse_config(path) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in cp.sections():
        if section not in _KNOWN:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in _KNOWN[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")

    exp = cp["experiment"] if cp.has_section("experiment") else {}
    op = cp["operator"] if cp.has_section("operator") else {}
    opt = cp["optimizer"] if cp.has_section("optimizer") else {}
    atk = cp["attack"] if cp.has_section("attack") else {}

    dataset = exp.get("dataset", "mnist")
    channels = 3 if dataset == "cifar10" else 1
    side = 32 if dataset == "cifar10" else 28

    magnitude = op.get("magnitude", "tanh")
    if magnitude == "standard":
        operator = None
    else:
        operator = OperatorSpec(
            magnitude=MagnitudeKind(magnitude),
            angular=AngularKind(op.get("angular", "cosine")),
            weighting=WeightingMode(op.get("weighting", "none")),
            alpha=float(op.get("alpha", 1.0)),
            beta=float(op.get("beta", 0.5 if magnitude == "segmented" else 1.0)),
            sigmoid_k=float(op.get("sigmoid_k", 0.3)),
            rho_learnable=_bool(op.get("rho_learnable", "true")),
        )

    arch = ArchitectureDescription(
        preset=exp.get("arch", "mnist-cnn6"),
        input_shape=(channels, side, side),
        num_classes=int(exp.get("num_classes", 10)),
        operator=operator,
        bn=_bool(exp.get("bn", "true")),
        relu=_bool(exp.get("relu", "true")),
        width=float(exp.get("width", 1.0)),
        custom=[t.strip() for t in exp.get("custom_layers", "").split(",") if t.strip()],
    )

    total_steps = int(exp.get("total_steps", 2000))
    lr = float(opt.get("lr", 1e-3))
    sched_text = opt.get("lr_schedule", "")
    if sched_text == "default":
        # drop by 10x at 50% and 75% of the run
        schedule = [(total_steps // 2, lr / 10.0), (total_steps * 3 // 4, lr / 100.0)]
    else:
        schedule = _parse_schedule(sched_text, total_steps)

    interval = int(opt.get("projection_interval", 0))
    rule = UpdateRule(
        kind=OptimizerKind(opt.get("kind", "adam")),
        lr=lr,
        lr_schedule=schedule,
        momentum=float(opt.get("momentum", 0.9)),
        gradient_mode=GradientMode(opt.get("gradient_mode", "standard")),
        projection=ProjectionSchedule(interval, float(opt.get("projection_s", 1.0)))
        if interval > 0 else None,
    )

    regularizer = RegularizerSpec(
        kind=RegularizerKind(opt.get("regularizer", "none")),
        lam=float(opt.get("reg_lambda", 0.0)),
    )

    attack = AttackConfig(
        method=atk.get("method", "fgsm"),
        epsilon=float(atk.get("epsilon", 8.0)),
        tau=float(atk.get("tau", 2.0)),
        iterations=int(atk.get("iterations", 20)),
    )

    init_ckpt = exp.get("init_checkpoint", "") or None
    return ExperimentConfig(
        arch=arch,
        dataset=dataset,
        data_dir=exp.get("data_dir", "data/digits"),
        subset=int(exp.get("subset", 0)),
        batch_size=int(exp.get("batch_size", 64)),
        total_steps=total_steps,
        eval_every=int(exp.get("eval_every", 200)),
        seed=int(exp.get("seed", 0)),
        precision=exp.get("precision", "float32"),
        out_dir=exp.get("out_dir", "runs/default"),
        init_checkpoint=init_ckpt,
        augment=_bool(exp.get("augment", "false")),
        adv_fraction=float(exp.get("adv_fraction", 0.5)),
        update_rule=rule,
        regularizer=regularizer,
        attack=attack,
    )
