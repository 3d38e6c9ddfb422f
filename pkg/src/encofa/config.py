"""Run configuration: one TOML file with a section per module."""
import dataclasses
import json
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .exceptions import ConfigError

VARIANTS = ("ce", "cls_cl_cn", "cls", "cls_ensc", "encofa")


@dataclass
class DataConfig:
    source: str = "blobs"
    n_per_class: int = 200
    num_classes: int = 5
    num_ood_classes: int = 3
    dim: int = 32
    separation: float = 8.0
    seed: int = None
    path: str = None
    id_classes: list = field(default_factory=list)
    ood_classes: list = field(default_factory=list)
    image_size: list = field(default_factory=lambda: [32, 32])


@dataclass
class NoiseConfig:
    alpha: float = 0.4
    beta: float = 0.25
    profile: str = "probe_confusion"
    seed: int = None


@dataclass
class ModelConfig:
    arch: str = "mlp"
    hidden: list = field(default_factory=lambda: [128])
    feature_dim: int = 64
    proj_dim: int = 32
    conv_channels: list = field(default_factory=lambda: [16, 32])


@dataclass
class HyperParams:
    gamma_cl: float = 0.98
    gamma_ood: float = 0.96
    gamma_gen: float = 0.1
    gamma_p: float = 0.7
    lam: float = 1.0
    tau: float = 0.2
    k: int = 200
    desk_k: bool = True
    importance_source: str = "all"
    loss_clip: float = 1.0
    gmm_var_floor: float = 0.01


@dataclass
class OptimConfig:
    lr: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    power: float = 0.9


@dataclass
class TrainConfig:
    epochs: int = 60
    warmup_epochs: int = 3
    seed: int = 0
    variant: str = "encofa"
    augment: bool = True
    force_all_clean: bool = False
    run_dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        t, h, o = self.train, self.hyper, self.optim
        if t.variant not in VARIANTS:
            raise ConfigError(f"train.variant must be one of {VARIANTS}, got {t.variant!r}", key="train.variant")
        if not 0 <= t.warmup_epochs < t.epochs:
            raise ConfigError("train.warmup_epochs must satisfy 0 <= warmup < epochs", key="train.warmup_epochs")
        if not o.lr > 0:
            raise ConfigError("optim.lr must be positive", key="optim.lr")
        if o.batch_size < 1:
            raise ConfigError("optim.batch_size must be >= 1", key="optim.batch_size")
        if not h.tau > 0:
            raise ConfigError("hyper.tau must be positive", key="hyper.tau")
        if h.lam < 0:
            raise ConfigError("hyper.lambda must be non-negative", key="hyper.lambda")
        for name in ("gamma_cl", "gamma_ood", "gamma_gen", "gamma_p"):
            v = getattr(h, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"hyper.{name} must lie in [0, 1], got {v}", key=f"hyper.{name}")
        if h.k < 1:
            raise ConfigError("hyper.k must be >= 1", key="hyper.k")
        if h.loss_clip < 0:
            raise ConfigError("hyper.loss_clip must be >= 0 (0 disables clipping)", key="hyper.loss_clip")
        if not h.gmm_var_floor > 0:
            raise ConfigError("hyper.gmm_var_floor must be positive", key="hyper.gmm_var_floor")
        if h.importance_source not in ("all", "open"):
            raise ConfigError("hyper.importance_source must be 'all' or 'open'", key="hyper.importance_source")
        if self.data.source not in ("blobs", "csv", "image_folder"):
            raise ConfigError(f"unknown data.source {self.data.source!r}", key="data.source")
        if self.data.source != "blobs" and not self.data.path:
            raise ConfigError("data.path is required for this data.source", key="data.path")
        if self.model.arch not in ("mlp", "cnn"):
            raise ConfigError(f"unknown model.arch {self.model.arch!r}", key="model.arch")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hyper"]["lambda"] = d["hyper"].pop("lam")
        return d


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_ALIASES = {("hyper", "lambda"): "lam"}


def _coerce(section, key, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean", key=f"{section}.{key}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number", key=f"{section}.{key}")
        if isinstance(default, float):
            return float(value)
        if not float(value).is_integer():
            raise ConfigError(f"{section}.{key} must be an integer", key=f"{section}.{key}")
        return int(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{section}.{key} must be a list", key=f"{section}.{key}")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{section}.{key} must be a string", key=f"{section}.{key}")
    return value


def config_from_dict(raw):
    """Build and validate a :class:`RunConfig`; unknown sections or keys are errors."""
    cfg = RunConfig()
    for section, values in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]", key=section)
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table", key=section)
        target = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(target)}
        for key, value in values.items():
            attr = _ALIASES.get((section, key), key)
            if attr not in names or (section, key) == ("hyper", "lam"):
                raise ConfigError(f"unknown config key {section}.{key}", key=f"{section}.{key}")
            setattr(target, attr, _coerce(section, key, value, getattr(target, attr)))
    return cfg.validate()


def load_config(path):
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}", key="config")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}", key="config") from exc
    return config_from_dict(raw)


def dump_config_json(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
