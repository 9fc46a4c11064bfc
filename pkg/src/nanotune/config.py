"""Experiment configuration: YAML file, environment overrides, strict schema.

Every section maps onto a dataclass; unknown keys anywhere are rejected.
Environment variables ``NANOTUNE_<SECTION>__<KEY>`` override file values,
``NANOTUNE_SEED`` overrides the top-level seed. Values are parsed as YAML
scalars, so ``NANOTUNE_TRAIN__LR=5e-4`` gives a float.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .data.augment import AugmentConfig
from .data.synth import DomainSpec, SubjectSpec, default_domains
from .nn.arch import ArchDescriptor, frontnet, reference_descriptor
from .losses import LossScenario
from .nn.strategy import strategy_from_name
from .odometry import OdomNoiseParams
from .trainer import ConfigError, TrainConfig

ENV_PREFIX = "NANOTUNE_"


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "5e-4" as a string; accept exponents without a dot
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class SynthSection:
    height: int = 48
    width: int = 80
    n_a: int = 5600
    n_b: int = 2000
    domain_a: dict = field(default_factory=dict)  # DomainSpec field overrides
    domain_b: dict = field(default_factory=dict)


@dataclass
class DataSection:
    domain_a: Optional[str] = None  # defaults under <out>/data
    domain_b: Optional[str] = None


@dataclass
class FinetuneSection:
    checkpoint: Optional[str] = None
    subject: str = "b0"
    fold: int = 0
    duration: float = 128.0
    rate: float = 4.0
    max_samples: Optional[int] = None
    gap: int = 100
    max_fraction: float = 0.75


@dataclass
class StillSection:
    v_max: float = 0.1
    t_min: float = 1.0


@dataclass
class PlanSection:
    subjects: list = field(default_factory=lambda: ["b0", "b1", "b2"])
    folds: int = 3


@dataclass
class SweepSection:
    sizes: list = field(default_factory=lambda: [32, 64, 128, 256, 512])
    rates: list = field(default_factory=lambda: [4.0, 2.0, 1.0, 0.5])
    strategies: list = field(default_factory=lambda: ["AllWB", "FcWB", "BnWB", "BiasOnly"])
    scenarios: list = field(
        default_factory=lambda: [
            "t(a)",
            "sc(a,dD,dH)",
            "sc(a,dD~,dH)",
            "sc(a,dD~,H?)",
            "sc(a,dD,H?)",
            "t(s32)+sc(a,dD~,H?)",
            "t(s32)+sc(s128,dD~,H?)",
        ]
    )
    dts: list = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])


@dataclass
class CostSection:
    arch: str = "reference"
    strategies: list = field(default_factory=lambda: ["AllWB", "BnWB", "FcWB", "BiasOnly"])
    set_sizes: list = field(default_factory=lambda: [512, 128])
    epochs: int = 5
    # measured (soc, set size, strategy, duration) used to calibrate each SoC
    calibration: dict = field(
        default_factory=lambda: {
            "GAP9": {"strategy": "AllWB", "set_size": 512, "time": "2:03"},
            "GAP8": {"strategy": "AllWB", "set_size": 512, "time": "86:51"},
        }
    )


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: Optional[str] = None
    jobs: int = 1
    arch: str = "desk"  # "desk", "reference" or a descriptor JSON path
    synth: SynthSection = field(default_factory=SynthSection)
    data: DataSection = field(default_factory=DataSection)
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    augment: dict = field(default_factory=dict)  # AugmentConfig overrides
    odometry: dict = field(default_factory=dict)  # OdomNoiseParams overrides
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    still: StillSection = field(default_factory=StillSection)
    plan: PlanSection = field(default_factory=PlanSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    cost: CostSection = field(default_factory=CostSection)

    # -- resolved objects ---------------------------------------------------

    def train_config(self, **over) -> TrainConfig:
        aug = AugmentConfig(**_tuples(self.augment))
        return TrainConfig(**{"seed": self.seed, **self.train, "augment": aug, **over})

    def odometry_params(self) -> OdomNoiseParams:
        return OdomNoiseParams(**{"seed": self.seed, **self.odometry})

    def domains(self) -> tuple[DomainSpec, DomainSpec]:
        a, b = default_domains(self.synth.height, self.synth.width)
        return _domain(a, self.synth.domain_a), _domain(b, self.synth.domain_b)

    def arch_descriptor(self, name: Optional[str] = None) -> ArchDescriptor:
        return resolve_arch(name or self.arch, (1, self.synth.height, self.synth.width))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects results; ``out`` and ``jobs`` do not."""
        content = {k: v for k, v in self.to_dict().items() if k not in ("out", "jobs")}
        blob = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def validate(self) -> "ExperimentConfig":
        """Resolve every derived object once so that errors surface before any run."""
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.plan.folds < 1 or not self.plan.subjects:
            raise ConfigError("plan needs at least one subject and one fold")
        if self.synth.n_a < 1 or self.synth.n_b < 2:
            raise ConfigError("synth sizes must be positive")
        try:
            self.train_config()
            self.odometry_params()
            a, b = self.domains()
            self.arch_descriptor().validate()
            self.arch_descriptor(self.cost.arch).validate()
            for name in (*self.sweep.strategies, *self.cost.strategies):
                strategy_from_name(name)
            for label in self.sweep.scenarios:
                LossScenario.parse(label)
            for dt in self.sweep.dts:
                if not float(dt) > 0:
                    raise ConfigError(f"dt must be positive, got {dt}")
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError, OSError) as exc:
            raise ConfigError(str(exc)) from exc
        ids = {s.subject_id for s in b.subjects}
        missing = [s for s in self.plan.subjects if s not in ids]
        if missing:
            raise ConfigError(f"plan subjects {missing} are not in domain B")
        return self


def _tuples(d: Mapping) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _domain(base: DomainSpec, over: Mapping) -> DomainSpec:
    over = dict(over)
    known = {f.name for f in fields(DomainSpec)}
    bad = sorted(set(over) - known)
    if bad:
        raise ConfigError(f"unknown domain keys: {bad}")
    if "subjects" in over:
        over["subjects"] = tuple(SubjectSpec(**s) for s in over["subjects"])
    return dataclasses.replace(base, **over)


def resolve_arch(name: str, input_shape=(1, 48, 80)) -> ArchDescriptor:
    if name == "reference":
        return reference_descriptor()
    if name == "desk":
        return frontnet(tuple(input_shape), (8, 16, 16, 32), name="frontnet-desk")
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"architecture {name!r} is neither a preset nor a file")
    return ArchDescriptor.from_json(path.read_text(encoding="utf-8"))


# -- loading ------------------------------------------------------------------


def _build(cls, data: Mapping, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(sub):
            value = _build(sub, value or {}, f"{where}.{key}".lstrip("."))
        kwargs[key] = value
    return cls(**kwargs)


def _check_overrides(section: str, data: Mapping, cls) -> None:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {unknown}")


def env_overrides(environ: Mapping[str, str]) -> dict:
    """Nested override dict from ``NANOTUNE_*`` variables."""
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX) :].split("__")]
        value = _scalar(name, raw)
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{name} conflicts with another override")
        node[path[-1]] = value
    return out


def _scalar(name: str, raw: str):
    try:
        return _load_yaml(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _merge(base: dict, over: Mapping) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, environ: Optional[Mapping[str, str]] = None, **overrides: Any) -> ExperimentConfig:
    """Read, merge and validate a configuration.

    Precedence, lowest first: defaults, file, environment, keyword overrides
    (the CLI flags). Keyword overrides whose value is ``None`` are ignored.
    """
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = _load_yaml(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
    data = _merge(data, env_overrides(os.environ if environ is None else environ))
    data = _merge(data, {k: v for k, v in overrides.items() if v is not None})
    cfg = _build(ExperimentConfig, data, "")
    _check_overrides("train", cfg.train, TrainConfig)
    _check_overrides("augment", cfg.augment, AugmentConfig)
    _check_overrides("odometry", cfg.odometry, OdomNoiseParams)
    for key in ("augment", "seed"):
        if key in cfg.train:
            raise ConfigError(f"train.{key} is set through its own section")
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
