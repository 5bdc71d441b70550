"""Run configuration: a flat JSON object validated against a fixed schema."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .dsp import FEATURE_KINDS
from .model import PIP, OMS, ConfigError, PipConfig

ABLATIONS = ("base", "no_long_range_skip", "no_positional_modeling", "no_linear_skip",
             "oms", "mfcc50", "mel100")
OMS_KAPPAS = [4, 8, 16]


def default_cache_dir():
    return os.environ.get("PIPMN_CACHE_DIR", "pipmn_cache")


@dataclass
class RunConfig:
    # architecture
    n: int = 2
    kappas: list = field(default_factory=lambda: [4, 8])
    time_length: int = 5
    in_dim: int = 100
    alpha: int = 3
    num_classes: int = 10
    long_range_skip: bool = True
    positional_modeling: bool = True
    linear_skip: bool = True
    structure: str = PIP
    eps1_init: float = 0.1
    eps2_init: float = 1.0
    rho_init: float = 0.1
    # data
    manifest: str | None = None
    cache_dir: str = field(default_factory=default_cache_dir)
    features: str = "stack"
    task: str = "multiclass"
    workers: int = 1
    # optimisation
    seed: int = 0
    epochs: int = 3500
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    patience: int = 20
    min_delta: float = 1e-4
    ablation: list = field(default_factory=lambda: list(ABLATIONS))

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            _check_type(f.name, v, f.type)
        if self.features not in FEATURE_KINDS:
            raise ConfigError("features", f"must be one of {sorted(FEATURE_KINDS)}")
        if FEATURE_KINDS[self.features] != self.in_dim:
            raise ConfigError("in_dim", f"features {self.features!r} produce "
                                        f"{FEATURE_KINDS[self.features]} dims, in_dim is {self.in_dim}")
        if self.task not in ("multiclass", "multilabel"):
            raise ConfigError("task", "must be 'multiclass' or 'multilabel'")
        for name in ("epochs", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing", "must be in [0, 1)")
        for name in self.ablation:
            if name not in ABLATIONS:
                raise ConfigError("ablation", f"unknown variant {name!r}; choose from {list(ABLATIONS)}")
        self.model_config()

    def model_config(self) -> PipConfig:
        keys = {f.name for f in fields(PipConfig)}
        return PipConfig(**{k: v for k, v in asdict(self).items() if k in keys})

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        return cls(**d)

    @classmethod
    def load(cls, path, overrides=None):
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("<file>", f"{path} is not valid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError("<file>", "configuration must be a JSON object")
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(d)

    def variant(self, name) -> "RunConfig":
        """Configuration of one ablation row."""
        d = self.to_dict()
        if name == "no_long_range_skip":
            d["long_range_skip"] = False
        elif name == "no_positional_modeling":
            d["positional_modeling"] = False
        elif name == "no_linear_skip":
            d["linear_skip"] = False
        elif name == "oms":
            d.update(structure=OMS, kappas=list(OMS_KAPPAS), long_range_skip=False)
            d["n"] = len(OMS_KAPPAS)
        elif name == "mfcc50":
            d.update(features="mfcc50", in_dim=50)
        elif name == "mel100":
            d.update(features="mel100", in_dim=100)
        elif name != "base":
            raise ConfigError("ablation", f"unknown variant {name!r}")
        return RunConfig.from_dict(d)


def _check_type(name, value, annotation):
    ann = str(annotation)
    if value is None:
        if "None" in ann:
            return
        raise ConfigError(name, "must not be null")
    if ann.startswith("bool"):
        ok = isinstance(value, bool)
    elif ann.startswith("int"):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif ann.startswith("float"):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif ann.startswith("str"):
        ok = isinstance(value, str)
    elif ann.startswith("list"):
        ok = isinstance(value, list)
        if ok and name == "kappas":
            ok = all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        if ok and name == "ablation":
            ok = all(isinstance(v, str) for v in value)
    else:
        ok = True
    if not ok:
        raise ConfigError(name, f"expected {ann}, got {type(value).__name__} {value!r}")
