"""Declarative run configuration (TOML) with strict key checking."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import tomli
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .attacks import SearchSpec, SplitPlan
from .gateway.training import TrainConfig
from .probes import DistanceProbeConfig, ProbeSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    kind: Literal["mnist", "blobs"] = "mnist"
    mnist_dir: Optional[str] = None
    n_members: Optional[int] = Field(None, gt=0)
    n_nonmembers: Optional[int] = Field(None, gt=0)
    label_noise: float = Field(0.0, ge=0, lt=1)
    n_samples: int = Field(400, gt=1)
    n_classes: int = Field(3, gt=1)
    dim: int = Field(10, gt=0)
    cluster_std: float = Field(2.0, gt=0)
    random_labels: bool = False
    seed: int = 0


class TargetSection(_Strict):
    arch: Literal["linear", "mlp", "lenet"] = "lenet"
    checkpoint: Optional[str] = None
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    early_stopping: bool = False
    patience: int = Field(5, ge=1)
    checkpoint_every: int = Field(1, ge=1)
    seed: int = 0
    lr_decay: float = Field(1.0, gt=0, le=1)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.optimizer,
                           self.early_stopping, self.patience, self.checkpoint_every, self.seed,
                           self.lr_decay)


class ProbeSection(_Strict):
    kind: Literal["confidence", "intermediate", "grad_w", "grad_x", "distance"]
    layers_back: int = Field(-1, le=-1)
    max_steps: int = Field(1000, ge=1)
    step_size: float = Field(0.01, gt=0)
    confidence_threshold: float = Field(1e-3, gt=0, lt=1)
    max_samples: Optional[int] = Field(None, gt=0)

    def spec(self) -> ProbeSpec:
        return ProbeSpec(self.kind, self.layers_back,
                         DistanceProbeConfig(self.max_steps, self.step_size, self.confidence_threshold))


class AttackSection(_Strict):
    learners: list[Literal["logistic", "fcnn_128_64", "random_forest", "gbdt"]] = ["fcnn_128_64"]
    known_fraction: float = Field(0.8, gt=0, lt=1)
    rebalance: Literal["none", "undersample_member", "oversample_nonmember"] = "none"
    min_samples: int = Field(30, ge=2)
    group_by: Literal["true_class", "predicted_class"] = "true_class"
    search_n_iter: int = Field(30, ge=0)
    search_cv: int = Field(3, ge=2)
    seed: int = 0

    def plan(self) -> SplitPlan:
        return SplitPlan(self.known_fraction, self.seed, self.rebalance)

    def search(self) -> SearchSpec:
        return SearchSpec(n_iter=self.search_n_iter, cv=self.search_cv)


class EvaluationSection(_Strict):
    ratios: list[float] = [5.0, 1.0, 0.2]
    n_resamples: int = Field(50, ge=1)
    histogram_bins: int = Field(20, ge=1)
    seed: int = 0


class ExperimentConfig(_Strict):
    name: str = "run"
    data: DataSection = DataSection()
    target: TargetSection = TargetSection()
    probes: list[ProbeSection] = [ProbeSection(kind="confidence")]
    attack: AttackSection = AttackSection()
    evaluation: EvaluationSection = EvaluationSection()

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def target_hash(self) -> str:
        blob = json.dumps({"data": self.data.model_dump(mode="json"),
                           "target": self.target.model_dump(mode="json")}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending dotted key when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _parse_value(raw: str):
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; values use TOML literal syntax."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-table key {key!r}", key)
        node[parts[-1]] = _parse_value(raw.strip())
    return data


def validate(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"])
        kind = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
        raise ConfigError(f"invalid config at {key!r}: {kind}", key) from None


def load_config(path=None, overrides=None) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            data = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return validate(apply_overrides(data, overrides))
