"""Experiment configuration: nested dataclasses with a versioned YAML schema.

The file format is strict: unknown keys are rejected, and every config
round-trips through ``to_yaml``/``from_yaml``.  ``config_hash`` is the
sha256 of the canonical JSON form and goes into every run manifest so a
run can be replayed bit-identically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .coteaching import CoTeachingConfig

CONFIG_SCHEMA_VERSION = 1
WORKDIR_ENV_VAR = "EVIMRI_WORKDIR"

# Reference deployment-threshold ladder.
DEFAULT_LADDER = (1.0, 0.68, 0.63, 0.58, 0.53)


@dataclass(frozen=True)
class DataConfig:
    paths: tuple[str, ...] = ()
    variant: str = "mpmri"
    augment: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "paths", tuple(self.paths))


@dataclass(frozen=True)
class TranslationTrainConfig:
    modality: str = "T2"
    steps: int = 2000  # desk-scale default; the reference recipe trains far longer
    batch_size: int = 3
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    lambda_acl: float = 0.2
    lambda_idt: float = 1.0
    lambda_mask: float = 0.0025
    delta_min: float | None = None  # None: resolved from the modality preset
    delta_max: float | None = None
    epsilon: float = 1e-6
    gan_form: str = "ls"
    image_size: int = 64
    base_width: int = 32
    noise_dim: int = 16
    d_lr_factor: float = 1.0  # discriminator LR relative to the generator's
    val_fraction: float = 0.1
    eval_every: int = 200
    patience: int = 10

    def __post_init__(self) -> None:
        if self.modality not in ("T2", "ADC"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.gan_form not in ("ls", "log"):
            raise ValueError(f"unknown gan_form {self.gan_form!r}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")

    def mask_thresholds(self) -> tuple[float, float]:
        if self.delta_min is not None and self.delta_max is not None:
            return (self.delta_min, self.delta_max)
        if self.modality == "T2":
            return (0.005, 0.1)
        return (0.001, 0.005)


@dataclass(frozen=True)
class ClassifierTrainConfig:
    variant: str = "mpmri"
    head: str = "evidence"
    evidence_activation: str = "softplus"
    epochs: int = 300
    batch_size: int = 10
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 200
    class_weights: tuple[float, float] = (0.25, 0.75)
    gamma: float = 2.0
    kl_ramp_epochs: int = 10
    kl_on_full_alpha: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_weights", tuple(self.class_weights))
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ValueError("class_weights must be two positive numbers")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")


@dataclass(frozen=True)
class FilterPolicyConfig:
    method: str = "patch"  # patch | patient | none
    rate: float = 20.0
    ladder: tuple[float, ...] = DEFAULT_LADDER
    retrain_from_scratch: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "ladder", tuple(self.ladder))
        if self.method not in ("patch", "patient", "none"):
            raise ValueError(f"unknown filter method {self.method!r}")
        if not 0.0 <= self.rate < 100.0:
            raise ValueError("filter rate must be in [0, 100)")


@dataclass(frozen=True)
class ExperimentConfig:
    workdir: str = "runs"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    translation: TranslationTrainConfig = field(default_factory=TranslationTrainConfig)
    classifier: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    coteaching: CoTeachingConfig = field(default_factory=CoTeachingConfig)
    filtering: FilterPolicyConfig = field(default_factory=FilterPolicyConfig)
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ValueError(
                f"config schema_version {self.schema_version} not supported (expected {CONFIG_SCHEMA_VERSION})"
            )

    def resolved_workdir(self) -> Path:
        root = os.environ.get(WORKDIR_ENV_VAR)
        path = Path(self.workdir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path

    def validate_paths(self) -> None:
        missing = [p for p in self.data.paths if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"data paths do not exist: {missing}")

    def to_dict(self) -> dict:
        def plain(x):
            if isinstance(x, dict):
                return {k: plain(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [plain(v) for v in x]
            return x

        return plain(dataclasses.asdict(self))

    def to_yaml(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)


_SECTION_TYPES = {
    "data": DataConfig,
    "translation": TranslationTrainConfig,
    "classifier": ClassifierTrainConfig,
    "coteaching": CoTeachingConfig,
    "filtering": FilterPolicyConfig,
}


def _build_section(cls, payload: dict, name: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ValueError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return cls(**payload)


def config_from_dict(payload: dict) -> ExperimentConfig:
    payload = dict(payload)
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name in payload:
            section = payload.pop(name)
            if not isinstance(section, dict):
                raise ValueError(f"config section {name!r} must be a mapping")
            kwargs[name] = _build_section(cls, section, name)
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(payload) - allowed
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs.update(payload)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        payload = yaml.safe_load(f)
    if not isinstance(payload, dict):
        raise ValueError(f"{path} does not contain a config mapping")
    return config_from_dict(payload)
