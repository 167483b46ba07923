"""Run configuration: one YAML tree covering data, training and evaluation.

Layout::

    seed: 0
    data:      GeneratorConfig fields (no seed)
    augment:   AugmentationPolicy fields
    model:     ModelConfig fields
    stage1:    Stage1Config fields
    stage2:    Stage2Config fields
    optimizer: AdamWHyper fields
    eval:      EvalConfig fields (no seed)

The top-level seed is the only seed; it is copied into every section.
"""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from sm3.errors import ConfigError
from sm3.evaluation import EvalConfig
from sm3.synthdata import GeneratorConfig
from sm3.train import TrainConfig, _build

SECTIONS = ("data", "augment", "model", "stage1", "stage2", "optimizer", "eval")
# YAML 1.1 reads exponent floats without a dot (1e-3) as strings
_FLOAT = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$")


def _numbers(value):
    if isinstance(value, str) and _FLOAT.match(value.strip()):
        return float(value)
    if isinstance(value, dict):
        return {k: _numbers(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_numbers(v) for v in value]
    return value


@dataclass
class RunConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        self.set_seed(self.seed)

    def set_seed(self, seed: int) -> None:
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        self.seed = self.data.seed = self.train.seed = self.eval.seed = seed

    def validate(self) -> None:
        self.data.validate()
        self.train.validate()
        self.eval.validate()

    def to_dict(self) -> dict:
        data = self.data.to_dict()
        data.pop("seed")
        train = self.train.to_dict()
        ev = self.eval.to_dict()
        ev.pop("seed")
        out = {"seed": self.seed, "data": data}
        for key in ("augment", "model", "stage1", "stage2", "optimizer"):
            out[key] = train[key]
        out["eval"] = ev
        return out

    @classmethod
    def from_dict(cls, d: dict | None) -> RunConfig:
        if not isinstance(d or {}, dict):
            raise ConfigError("config file must hold a mapping at the top level")
        d = _numbers(copy.deepcopy(d or {}))
        unknown = set(d) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        for name in SECTIONS:
            section = d.get(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            if "seed" in section:
                raise ConfigError(f"{name}.seed is not allowed; set the top-level seed")
            d[name] = section
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        data = dict(d["data"])
        for key in ("class_counts", "split"):
            if key in data and isinstance(data[key], list):
                data[key] = tuple(data[key])
        train = TrainConfig.from_dict({k: d[k] for k in ("augment", "model", "stage1", "stage2", "optimizer")})
        if "encoder_widths" in d["model"]:
            train.model.encoder_widths = tuple(int(w) for w in d["model"]["encoder_widths"])
        if "scale_range" in d["augment"]:
            train.augment.scale_range = tuple(d["augment"]["scale_range"])
        try:
            cfg = cls(data=_build(GeneratorConfig, data, "data"), train=train,
                      eval=_build(EvalConfig, d["eval"], "eval"), seed=seed)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        try:
            cfg.validate()
        except TypeError as exc:
            raise ConfigError(f"config value has the wrong type: {exc}") from None
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_yaml())


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {p} is not valid YAML: {exc}") from None
    return RunConfig.from_dict(raw)


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars/lists)."""
    tree = cfg.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            raise ConfigError(f"cannot parse value in override {item!r}") from None
        parts = key.strip().split(".")
        if parts == ["seed"]:
            tree["seed"] = value
            continue
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"override key {key!r} must be seed or <section>.<field> with section in {SECTIONS}")
        section, name = parts
        if name not in tree[section]:
            raise ConfigError(f"unknown config field {key!r}")
        tree[section][name] = value
    return RunConfig.from_dict(tree)
