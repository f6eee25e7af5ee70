"""Run configuration: JSON file -> validated model -> library specs."""

from __future__ import annotations

import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .metalearn import ClipSpec, InnerOptSpec, MetaTrainConfig, OuterOptSpec, PenaltySpec
from .metatest import BETA_PAIRS, TestProtocol
from .network import MlpSpec
from .tasks import DEFAULT_NETWORKS, task_family


class ConfigError(ValueError):
    pass


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FamilyModel(_Model):
    kind: Literal["regression", "advection", "reaction_diffusion", "burgers"]
    distribution: Literal["train", "ood"] = "train"
    regime: Optional[Literal["r1", "r2"]] = None

    @model_validator(mode="after")
    def _exists(self):
        try:
            task_family(self.kind, self.distribution, self.regime)
        except ValueError as exc:
            raise ValueError(str(exc)) from None
        return self


class InnerModel(_Model):
    kind: Literal["sgd", "adam"] = "sgd"
    learning_rate: Optional[float] = Field(default=None, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0)
    steps: int = Field(default=20, ge=1)


class ClipModel(_Model):
    mode: Literal["none", "clip_norm", "divide_by_J", "normalize"] = "clip_norm"
    cap: float = Field(default=1.0, gt=0)


class PenaltyModel(_Model):
    c_margin: float = Field(default=1e-2, gt=0)
    samples: int = Field(default=64, ge=1)
    weight: float = Field(default=1.0, ge=0)


class OuterModel(_Model):
    kind: Literal["sgd", "adam"] = "adam"
    learning_rate: float = Field(default=1e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0)
    clip: ClipModel = ClipModel()
    iterations: int = Field(default=10000, ge=0)
    tasks_per_step: int = Field(default=1, ge=1)
    resample_every: Optional[int] = Field(default=1, ge=1)
    reinit_every: Optional[int] = Field(default=1, ge=1)
    penalty: PenaltyModel = PenaltyModel()
    validate_every: Optional[int] = Field(default=500, ge=1)
    validate_budget: int = Field(default=100, ge=0)
    validate_tasks: int = Field(default=1, ge=1)


class TestModel(_Model):
    distribution: Literal["train", "ood"] = "train"
    n_tasks: int = Field(default=5, ge=1)
    optimizer: InnerModel = InnerModel()
    iterations: int = Field(default=10000, ge=0)
    eval_every: int = Field(default=100, ge=1)
    eval_points: Optional[int] = Field(default=None, ge=1)
    architecture: Literal["fixed", "random"] = "fixed"


class NetworkModel(_Model):
    hidden_layers: int = Field(ge=1)
    hidden_width: int = Field(ge=1)


class SeedsModel(_Model):
    meta_train: int = Field(ge=0, lt=2**64)
    meta_test: int = Field(ge=0, lt=2**64)


class SweepModel(_Model):
    beta_pairs: list[tuple[float, float]] = Field(default_factory=lambda: [tuple(p) for p in BETA_PAIRS])
    j_set: list[int] = Field(default_factory=lambda: [1, 20])
    resample_set: list[Optional[int]] = Field(default_factory=lambda: [1, 10, 100, None])
    reinit_set: list[bool] = Field(default_factory=lambda: [True, False])
    iterations: int = Field(default=1000, ge=1)
    budgets: list[int] = Field(default_factory=lambda: [100, 500])
    validate_every: int = Field(default=10, ge=1)


class RunConfig(_Model):
    family: FamilyModel
    parametrization: Literal["lal", "ffn"] = "lal"
    loss_init: Literal["mse", "random"] = "mse"
    regularization: bool = False
    learn_weights: bool = False
    data_mode: Literal["single", "double"] = "single"
    inner: InnerModel = InnerModel()
    outer: OuterModel = OuterModel()
    test: TestModel = TestModel()
    network: Optional[NetworkModel] = None
    seeds: SeedsModel
    sweep: SweepModel = SweepModel()

    def with_seed(self, seed: int) -> "RunConfig":
        return self.model_copy(update={"seeds": SeedsModel(meta_train=seed, meta_test=seed)})

    def to_json(self) -> dict:
        return self.model_dump(mode="json")

    # library objects

    def family_obj(self, distribution: str | None = None):
        return task_family(self.family.kind, distribution or self.family.distribution, self.family.regime)

    def net_spec(self) -> MlpSpec:
        base = DEFAULT_NETWORKS[self.family.kind]
        if self.network is None:
            return base
        return MlpSpec(base.input_dim, base.output_dim, self.network.hidden_layers, self.network.hidden_width)

    def inner_spec(self, model: InnerModel | None = None) -> InnerOptSpec:
        m = model or self.inner
        return InnerOptSpec(m.kind, m.learning_rate, tuple(m.betas), m.eps, m.steps)

    def outer_spec(self) -> OuterOptSpec:
        o = self.outer
        return OuterOptSpec(
            kind=o.kind,
            learning_rate=o.learning_rate,
            betas=tuple(o.betas),
            eps=o.eps,
            clip=ClipSpec(o.clip.mode, o.clip.cap),
            iterations=o.iterations,
            tasks_per_step=o.tasks_per_step,
            resample_every=o.resample_every,
            reinit_every=o.reinit_every,
            penalty=PenaltySpec(self.regularization, o.penalty.c_margin, o.penalty.samples, o.penalty.weight),
            validate_every=o.validate_every,
            validate_budget=o.validate_budget,
            validate_tasks=o.validate_tasks,
        )

    def meta_train_config(self) -> MetaTrainConfig:
        return MetaTrainConfig(
            parametrization=self.parametrization,
            loss_init=self.loss_init,
            learn_weights=self.learn_weights,
            data_mode=self.data_mode,
            inner=self.inner_spec(),
            outer=self.outer_spec(),
            seed=self.seeds.meta_train,
            network=self.net_spec(),
        )

    def test_protocol(self) -> TestProtocol:
        t = self.test
        return TestProtocol(
            kind=self.family.kind,
            distribution=t.distribution,
            regime=self.family.regime,
            n_tasks=t.n_tasks,
            optimizer=self.inner_spec(t.optimizer),
            iterations=t.iterations,
            eval_every=t.eval_every,
            eval_points=t.eval_points,
            architecture=t.architecture,
        )


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "\n".join(lines)


def parse_config(data: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None
    if cfg.test.distribution == "ood":
        try:
            task_family(cfg.family.kind, "ood", cfg.family.regime)
        except ValueError as exc:
            raise ConfigError(f"test.distribution: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a JSON object")
    return parse_config(data)
