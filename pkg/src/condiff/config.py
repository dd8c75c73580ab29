"""Experiment configuration: strict schema, YAML loading, world construction.

The config file is a key-value tree validated before any compute runs;
unknown keys are rejected so typos fail fast instead of silently using
defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np
import yaml

from .sde import ConfigurationError, TimeGrid
from .worlds import DiffusionWorld, LabelOracle, MixtureLaw, make_world_w1, make_world_w2


@dataclass
class ComponentConfig:
    weight: float
    mean: list
    std: float


@dataclass
class OracleConfig:
    boundaries: list
    sharpness: float = 4.0
    feature_axis: int = 0


@dataclass
class WorldConfig:
    preset: str = ""  # "w1" | "w2" | "" for inline
    horizon: float = 5.0
    steps: int = 256
    sharpness: float = 4.0
    contexts: list = field(default_factory=list)  # list of lists of ComponentConfig
    oracles: list = field(default_factory=list)  # list of OracleConfig


@dataclass
class DatasetConfig:
    size: int = 20000
    train_fraction: float = 0.8


@dataclass
class ClassifierConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    embed_dim: int = 4
    epochs: int = 30
    batch: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.1
    calibrate: bool = True
    use_context: bool = False  # conditional-independence mode when False


@dataclass
class FinetuneSection:
    gamma: float = 10.0
    batch: int = 128
    updates: int = 1500
    lr_net: float = 1e-3
    lr_embed: float = 1e-2
    lr_schedule: str = "constant"
    lr_floor_frac: float = 0.05
    ema: float = 0.998
    weight_decay: float = 0.0
    embed_dim: int = 4
    hidden: list = field(default_factory=lambda: [64, 64, 64])
    truncation: str = "uniform"  # "uniform" | "full" | fixed int as string
    reward: str = "classifier"
    checkpoint_every: int = 0


@dataclass
class BaselinesConfig:
    methods: list = field(default_factory=lambda: ["pretrained", "finetuned"])
    doob_gamma: float = -1.0  # -1: inherit finetune gamma
    reconstruction_gamma: float = -1.0
    smc_particles: int = 1024
    smc_ess_fraction: float = 0.5
    best_of_n: int = 16
    classifier_free_budget: int = 10000
    classifier_free_updates: int = 4000
    mixed_gammas: list = field(default_factory=lambda: [[1.0, 1.0], [1.0, 2.0]])


@dataclass
class EvalConfig:
    samples_per_condition: int = 512
    tv_samples: int = 20000
    tv_bins: int = 100
    tv_methods: list = field(default_factory=lambda: ["pretrained", "finetuned"])
    grid_points_1d: int = 2048
    grid_points_2d: int = 256


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    baselines: BaselinesConfig = field(default_factory=BaselinesConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    init_law: str = "exact_prior"
    output_dir: str = "runs/out"

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


KNOWN_METHODS = (
    "pretrained",
    "finetuned",
    "doob",
    "reconstruction",
    "smc",
    "best_of_n",
    "classifier_free",
    "mixed",
)


def _from_dict(cls, blob, path):
    if not is_dataclass(cls):
        return blob
    if not isinstance(blob, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(blob).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(blob) - set(known)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in blob:
            continue
        val = blob[name]
        sub = f.type if isinstance(f.type, type) else None
        if sub is not None and is_dataclass(sub):
            kwargs[name] = _from_dict(sub, val, f"{path}.{name}")
        else:
            kwargs[name] = val
    return cls(**kwargs)


_SECTIONS = {
    "world": WorldConfig,
    "dataset": DatasetConfig,
    "classifier": ClassifierConfig,
    "finetune": FinetuneSection,
    "baselines": BaselinesConfig,
    "eval": EvalConfig,
}


def config_from_dict(blob: dict) -> ExperimentConfig:
    if not isinstance(blob, dict):
        raise ConfigurationError("config root must be a mapping")
    unknown = set(blob) - set(_SECTIONS) - {"seed", "init_law", "output_dir"}
    if unknown:
        raise ConfigurationError(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in blob:
            kwargs[name] = _from_dict(cls, blob[name], name)
    for name in ("seed", "init_law", "output_dir"):
        if name in blob:
            kwargs[name] = blob[name]
    cfg = ExperimentConfig(**kwargs)
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        blob = yaml.safe_load(f)
    return config_from_dict(blob or {})


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.init_law not in ("gaussian", "exact_prior"):
        raise ConfigurationError(f"unknown init law {cfg.init_law!r}")
    if cfg.world.preset not in ("", "w1", "w2"):
        raise ConfigurationError(f"unknown world preset {cfg.world.preset!r}")
    if not cfg.world.preset and not cfg.world.contexts:
        raise ConfigurationError("world needs a preset or an inline context list")
    if cfg.finetune.gamma < 0:
        raise ConfigurationError("finetune.gamma must be >= 0")
    if cfg.finetune.truncation not in ("uniform", "full") and not str(cfg.finetune.truncation).lstrip("-").isdigit():
        raise ConfigurationError(f"bad truncation law {cfg.finetune.truncation!r}")
    if cfg.dataset.size < 10:
        raise ConfigurationError("dataset.size too small")
    if not (0 < cfg.dataset.train_fraction < 1):
        raise ConfigurationError("dataset.train_fraction must be in (0, 1)")
    for m in cfg.baselines.methods:
        if m not in KNOWN_METHODS:
            raise ConfigurationError(f"unknown method {m!r}; known: {KNOWN_METHODS}")
    for m in cfg.eval.tv_methods:
        if m not in KNOWN_METHODS:
            raise ConfigurationError(f"unknown tv method {m!r}")
    if cfg.classifier.use_context is False:
        pass  # conditional-independence mode: classifiers see x only


def build_world(cfg: WorldConfig) -> DiffusionWorld:
    if cfg.preset == "w1":
        return make_world_w1(horizon=cfg.horizon, steps=cfg.steps, sharpness=cfg.sharpness)
    if cfg.preset == "w2":
        return make_world_w2(horizon=cfg.horizon, steps=cfg.steps, sharpness=cfg.sharpness)
    laws = []
    for ctx in cfg.contexts:
        comps = [_from_dict(ComponentConfig, c, "world.contexts[]") if isinstance(c, dict) else c for c in ctx]
        laws.append(
            MixtureLaw(
                weights=[c.weight for c in comps],
                means=[list(np.atleast_1d(c.mean)) for c in comps],
                stds=[c.std for c in comps],
            )
        )
    oracles = []
    for o in cfg.oracles:
        oc = _from_dict(OracleConfig, o, "world.oracles[]") if isinstance(o, dict) else o
        oracles.append(LabelOracle(boundaries=oc.boundaries, sharpness=oc.sharpness, feature_axis=oc.feature_axis))
    if not oracles:
        raise ConfigurationError("inline world needs at least one oracle")
    grid = TimeGrid(horizon=cfg.horizon, steps=cfg.steps)
    return DiffusionWorld(laws, grid, oracles=oracles)
