"""Experiment configuration: JSON/YAML in, validated dataclasses out."""

from __future__ import annotations

import dataclasses
import inspect
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..objectives import MODES, ObjectiveConfig
from ..synthgen import gen_multiclass, gen_multilabel, gen_sequences

TASKS = {
    "multiclass-toy": ("multiclass", gen_multiclass),
    "multilabel-toy": ("multilabel", gen_multilabel),
    "sequence-toy": ("sequence", gen_sequences),
    "dataset": (None, None),
}
LOSS_FOR_KIND = {"multiclass": "softmax-ce", "multilabel": "sigmoid-bce", "sequence": "sequence-nll"}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [64])
    embed: int = 16
    state: int = 32
    attention: int = 0


@dataclass
class ProjectionConfig:
    hidden: list[int] = field(default_factory=lambda: [512, 512])
    output: int = 64


@dataclass
class ObjectiveSection:
    lam: float = 0.5
    mu: float = 1.0
    mode: str = "ours"
    l2_weight: float = 1e-4
    negative_ratio: float = 1.0
    use_attention: bool = True


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    projection_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class NeighborhoodConfig:
    n: int = 5
    refresh_period: int = 100
    strict: bool = False


@dataclass
class EvalConfig:
    k_values: list[int] = field(default_factory=lambda: [1, 5, 10])
    m: int = 5
    beam_size: int = 20
    ngram: int = 4
    recall_k: int = 100
    pool_others: int = 199
    max_length: int = 8
    max_examples: int = 0  # 0 -> every example of the split
    val_max_examples: int = 0


@dataclass
class ExperimentConfig:
    task: str
    seed: int = 0
    dataset: str | None = None
    generator: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 64
    neighborhood: NeighborhoodConfig = field(default_factory=NeighborhoodConfig)
    max_steps: int = 20000
    eval_every: int = 200
    patience: int = 10
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: dict = field(default_factory=dict)
    modes: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    @property
    def kind(self) -> str | None:
        return TASKS[self.task][0]

    def objective_config(self, kind: str) -> ObjectiveConfig:
        o = self.objective
        mle = o.mode in ("mle", "ce-l2")
        return ObjectiveConfig(
            lam=0.0 if mle else o.lam,
            mu=0.0 if mle else o.mu,
            mode=o.mode,
            l2_weight=o.l2_weight,
            loss_kind=LOSS_FOR_KIND[kind],
            negative_ratio=o.negative_ratio,
            use_attention=o.use_attention,
        )

    @property
    def projection_lr(self) -> float:
        lr = self.optimizer.projection_lr
        return self.optimizer.lr / 10.0 if lr is None else lr

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objective"]["lambda"] = d["objective"].pop("lam")
        d["optimizer"]["projection_lr"] = self.projection_lr
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"objective.mode": "mle"})``."""
        d = self.to_dict()
        if self.optimizer.projection_lr is None:
            d["optimizer"]["projection_lr"] = None
        for key, value in changes.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return from_dict(d)


_ALIASES = {ObjectiveSection: {"lambda": "lam"}}
_SECTIONS = {
    "model": ModelConfig, "projection": ProjectionConfig, "objective": ObjectiveSection,
    "optimizer": OptimizerConfig, "neighborhood": NeighborhoodConfig, "eval": EvalConfig,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    aliases = _ALIASES.get(cls, {})
    kwargs = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        if name not in names:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key}")
        if cls is ExperimentConfig and name in _SECTIONS:
            value = _build(_SECTIONS[name], value, name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"{where or 'config'}: {err}") from None


def _require(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    _require(cfg.task in TASKS, "task", f"must be one of {sorted(TASKS)}")
    if cfg.task == "dataset":
        _require(bool(cfg.dataset), "dataset", "required when task is 'dataset'")
    else:
        gen = TASKS[cfg.task][1]
        allowed = set(inspect.signature(gen).parameters) - {"seed"}
        for key in cfg.generator:
            _require(key in allowed, f"generator.{key}", "unknown generator parameter")
    o = cfg.objective
    _require(o.mode in MODES, "objective.mode", f"must be one of {MODES}")
    _require(o.lam >= 0, "objective.lambda", "must be >= 0")
    _require(o.mu >= 0, "objective.mu", "must be >= 0")
    _require(o.l2_weight >= 0, "objective.l2_weight", "must be >= 0")
    _require(o.negative_ratio >= 0, "objective.negative_ratio", "must be >= 0")
    opt = cfg.optimizer
    _require(opt.lr > 0, "optimizer.lr", "must be > 0")
    _require(opt.projection_lr is None or opt.projection_lr > 0, "optimizer.projection_lr", "must be > 0")
    _require(0 <= opt.beta1 < 1 and 0 <= opt.beta2 < 1, "optimizer.beta1", "betas must be in [0, 1)")
    _require(opt.eps > 0, "optimizer.eps", "must be > 0")
    _require(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    _require(cfg.neighborhood.n >= 1, "neighborhood.n", "must be >= 1")
    _require(cfg.neighborhood.refresh_period >= 1, "neighborhood.refresh_period", "must be >= 1")
    _require(cfg.max_steps >= 1, "max_steps", "must be >= 1")
    _require(cfg.eval_every >= 1, "eval_every", "must be >= 1")
    _require(cfg.patience >= 1, "patience", "must be >= 1")
    _require(all(w > 0 for w in cfg.model.hidden), "model.hidden", "widths must be positive")
    _require(all(w > 0 for w in cfg.projection.hidden), "projection.hidden", "widths must be positive")
    _require(cfg.projection.output > 0, "projection.output", "must be positive")
    e = cfg.eval
    _require(e.beam_size >= 1, "eval.beam_size", "must be >= 1")
    _require(e.ngram >= 1, "eval.ngram", "must be >= 1")
    _require(all(k >= 1 for k in e.k_values), "eval.k_values", "must be >= 1")
    for key in cfg.sweep:
        _require(key in ("lambda", "mu"), f"sweep.{key}", "only 'lambda' and 'mu' can be swept")
    for m in cfg.modes:
        _require(m in MODES, "modes", f"unknown mode {m!r}")
    return cfg


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    _require("task" in data, "task", "missing required field")
    return validate(_build(ExperimentConfig, data, ""))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    return from_dict(data)
