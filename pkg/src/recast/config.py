"""JSON run configuration shared by the command-line tools."""
from __future__ import annotations

import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .core import RecastConfig
from .integrate import AdapterSpec
from .mimicry import MimicryConfig
from .til import TrainConfig, make_task_suite


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RecastSection(_Section):
    layers: int = Field(6, ge=1)
    width: int = Field(16, ge=1)
    modules_per_layer: int = Field(1, ge=1)
    groups: int = Field(3, ge=1)
    templates: int = Field(2, ge=1)
    sets: int = Field(2, ge=1)
    activation: Literal["relu", "gelu", "identity"] = "relu"

    @model_validator(mode="after")
    def _groups_fit(self):
        if self.groups > self.layers:
            raise ValueError(f"groups ({self.groups}) must not exceed layers ({self.layers})")
        return self

    def build(self) -> RecastConfig:
        return RecastConfig.uniform_fc(self.layers, self.width, self.groups, self.templates, self.sets,
                                       self.modules_per_layer, self.activation)


class MimicrySection(_Section):
    loss: Literal["smoothl1", "mse"] = "smoothl1"
    beta: float = Field(1.0, gt=0)
    lr: float = Field(0.01, gt=0)
    epochs: int = Field(2000, ge=0)
    sigma: float = Field(0.01, ge=0)
    noise: bool = False
    seed: int = 0
    optimizer: Literal["sgd", "momentum", "adam"] = "sgd"
    schedule: Literal["module", "epoch"] = "module"
    threshold: float = Field(0.99, ge=-1, le=1)

    def build(self) -> MimicryConfig:
        return MimicryConfig(loss=self.loss, beta=self.beta, lr=self.lr, max_epochs=self.epochs,
                             sigma=self.sigma, noise=self.noise, seed=self.seed,
                             optimizer=self.optimizer, schedule=self.schedule)


class TeacherSection(_Section):
    epochs: int = Field(150, ge=0)
    lr: float = Field(5e-3, gt=0)
    weight_decay: float = Field(1e-6, ge=0)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    min_accuracy: float = Field(0.9, ge=0, le=1)

    def build(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, seed=self.seed)


class TilSection(_Section):
    seed: int = 0
    tasks: int = Field(3, ge=1)
    classes: int = Field(4, ge=2)
    shift: Literal["rotation", "mean-shuffle", "identity"] = "rotation"
    mode: Literal["coefficients+head", "head-only", "full"] = "coefficients+head"
    budget: int = Field(100, ge=0)
    epochs: int = Field(100, ge=0)
    lr: float = Field(0.02, gt=0)
    weight_decay: float = Field(1e-6, ge=0)
    batch_size: int = Field(32, ge=1)
    n_train: int = Field(256, ge=1)
    n_val: int = Field(16, ge=1)
    n_test: int = Field(64, ge=1)
    separation: float = Field(6.0, gt=0)
    cluster_std: float = Field(1.0, gt=0)

    def build(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, seed=self.seed)

    def suite(self, dim: int):
        """Pretraining task 0 followed by ``tasks`` downstream tasks."""
        return make_task_suite(self.tasks + 1, self.classes, dim, self.shift, self.seed,
                               n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
                               separation=self.separation, cluster_std=self.cluster_std)


class AdapterSection(_Section):
    kind: Literal["lora", "mask", "dora", "rosa"] = "lora"
    rank: int = Field(1, ge=1)
    sparsity: float = Field(0.01, ge=0, le=1)
    column_wise: bool = False
    seed: int = 0

    def build(self) -> AdapterSpec:
        return AdapterSpec(self.kind, self.rank, self.sparsity, self.column_wise)


class RunConfig(_Section):
    recast: RecastSection = Field(default_factory=RecastSection)
    mimicry: MimicrySection = Field(default_factory=MimicrySection)
    teacher: TeacherSection = Field(default_factory=TeacherSection)
    til: TilSection = Field(default_factory=TilSection)
    adapter: AdapterSection = Field(default_factory=AdapterSection)
    output_dir: str = "runs"

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.model_validate(json.load(fh))
