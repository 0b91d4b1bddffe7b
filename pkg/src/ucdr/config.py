"""Run configuration: one JSON document covering data, splits, model, training and ablations."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import GALLERY_MODES, PROTOCOLS, GeneratorConfig
from .losses import LossConfig
from .model import ModelConfig
from .prompts import ConfigError
from .train import Ablation, TrainConfig

SCHEMA_VERSION = 1
SEED_ENV = "UCDR_SEED"


@dataclass(frozen=True)
class SplitConfig:
    protocol: str = "UCDR"
    holdout_domain: int | None = 4
    holdout_class_fraction: float = 1 / 3
    gallery_mode: str = "unseen_only"
    heldout_sample_fraction: float = 0.2

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.gallery_mode not in GALLERY_MODES:
            raise ConfigError(f"gallery_mode must be one of {GALLERY_MODES}, got {self.gallery_mode!r}")
        if not 0 <= self.holdout_class_fraction < 1:
            raise ConfigError("holdout_class_fraction must lie in [0, 1)")
        if not 0 < self.heldout_sample_fraction < 0.5:
            raise ConfigError("heldout_sample_fraction must lie in (0, 0.5)")


@dataclass(frozen=True)
class AblationConfig:
    use_mask: bool = True
    use_tst: bool = True
    triplet_pairs: int = 2
    use_momentum: bool = True
    crossed_tpg_pairing: bool = False
    one_phase_mode: bool = False

    def validate(self) -> None:
        if self.triplet_pairs < 0:
            raise ConfigError(f"triplet_pairs must be >= 0, got {self.triplet_pairs}")


def _phase1_default() -> TrainConfig:
    return TrainConfig(phase=1, batch_size=64)


def _phase2_default() -> TrainConfig:
    return TrainConfig(phase=2, batch_size=32)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    phase1: TrainConfig = field(default_factory=_phase1_default)
    phase2: TrainConfig = field(default_factory=_phase2_default)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    metric_ks: tuple[int, ...] = (10, 50)
    schema_version: int = SCHEMA_VERSION

    # -- derived views used by the pipeline --------------------------------

    def generator_config(self) -> GeneratorConfig:
        return replace(self.generator, seed=self.seed)

    def model_config(self) -> ModelConfig:
        return replace(self.model, use_tst=self.ablation.use_tst,
                       crossed_tpg_pairing=self.ablation.crossed_tpg_pairing)

    def train_config(self, phase: int) -> TrainConfig:
        base = self.phase1 if phase == 1 else self.phase2
        return replace(base, phase=phase, seed=self.seed)

    def loss_config(self) -> LossConfig:
        return replace(self.loss, pairs=max(1, self.ablation.triplet_pairs))

    def train_ablation(self) -> Ablation:
        a = self.ablation
        return Ablation(use_mask=a.use_mask, use_triplet=a.triplet_pairs > 0,
                        use_momentum=a.use_momentum, one_phase_mode=a.one_phase_mode)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        try:
            self.generator_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.split.validate()
        self.train_config(1).validate()
        self.train_config(2).validate()
        self.loss_config().validate()
        self.ablation.validate()
        if not self.metric_ks or any(int(k) < 1 for k in self.metric_ks):
            raise ConfigError(f"metric_ks must be a nonempty list of positive integers, got {self.metric_ks}")
        return self

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        out = asdict(self)
        out["metric_ks"] = list(self.metric_ks)
        for key in ("phase1", "phase2"):
            out[key].pop("phase")
            out[key].pop("seed")
        out["generator"].pop("seed")
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(obj, cls, "")
        kwargs = {}
        nested = {"generator": GeneratorConfig, "split": SplitConfig, "model": ModelConfig,
                  "loss": LossConfig, "ablation": AblationConfig}
        for key, value in obj.items():
            if key in nested:
                kwargs[key] = _build(nested[key], value, key, exclude=("seed",))
            elif key in ("phase1", "phase2"):
                default = _phase1_default() if key == "phase1" else _phase2_default()
                kwargs[key] = replace(default, **_fields_of(TrainConfig, value, key, exclude=("phase", "seed")))
            elif key == "metric_ks":
                if not isinstance(value, list) or not all(isinstance(k, int) for k in value):
                    raise ConfigError("metric_ks must be a list of integers")
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_json(obj)

    def with_env_seed(self, environ=os.environ) -> "RunConfig":
        """Apply the ``UCDR_SEED`` override if it is set."""
        raw = environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            return replace(self, seed=int(raw))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def _fields_of(cls, obj, where: str, exclude=()) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return dict(obj)


def _build(cls, obj, where: str, exclude=()):
    return cls(**_fields_of(cls, obj, where, exclude))


def _reject_unknown(obj: dict, cls, where: str) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
