"""Experiment configuration: YAML schema, validation and run-manifest echo.

Sections mirror the package modules::

    seed: 0
    repeats: 3
    output_dir: runs/feduv
    data:
      source: synthetic            # or csv
      synthetic: {num_classes: 10, input_dim: 32, samples_per_class: 556}
      csv: {path: train.csv, label_column: label, header: true}
      test_fraction: 0.1
      domain_shift: null           # or a list of transforms
      partition: {kind: dirichlet, alpha: 0.01}
    model: {encoder_dims: [64], projector_dim: 64}
    objectives: {mu: 0.5, lambda: null, mu_prox: 0.01, sigma: null}
    federation: {strategy: feduv, rounds: 30, local_epochs: 10, ...}

``lambda: null`` resolves to (number of classes) / 4.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .. import data as data_mod
from .. import federation as fed
from .. import model as mdl
from .. import objectives as obj


class ConfigError(ValueError):
    """Raised for any schema or constraint violation; message names the key path."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticSection(_Section):
    num_classes: int = Field(10, ge=2)
    input_dim: int = Field(32, ge=2)
    samples_per_class: int = Field(556, ge=2)
    cluster_spread: float = Field(1.0, ge=0)
    class_mean_scale: float = Field(2.0, gt=0)


class CsvSection(_Section):
    path: str
    label_column: str | int = -1
    feature_columns: list[str | int] | None = None
    header: bool = True


class TransformSection(_Section):
    rotation_plane: tuple[int, int] = (0, 1)
    angle: float = 0.0
    scale: float = Field(1.0, gt=0)
    bias: list[float] | None = None

    @field_validator("rotation_plane")
    @classmethod
    def _distinct(cls, v):
        if v[0] == v[1] or min(v) < 0:
            raise ValueError("rotation_plane needs two distinct non-negative dims")
        return v

    def build(self) -> data_mod.DomainTransform:
        return data_mod.DomainTransform(
            tuple(self.rotation_plane), self.angle, self.scale, None if self.bias is None else tuple(self.bias)
        )


class PartitionSection(_Section):
    kind: Literal["dirichlet", "iid", "by_domain"] = "dirichlet"
    alpha: float | None = Field(None, gt=0)

    @model_validator(mode="after")
    def _alpha(self):
        if self.kind == "dirichlet" and self.alpha is None:
            raise ValueError("dirichlet partition needs alpha")
        return self


class DataSection(_Section):
    source: Literal["synthetic", "csv"] = "synthetic"
    synthetic: SyntheticSection = SyntheticSection()
    csv: CsvSection | None = None
    test_fraction: float = Field(0.1, gt=0, lt=1)
    domain_shift: list[TransformSection] | None = None
    partition: PartitionSection = PartitionSection(kind="iid")

    @model_validator(mode="after")
    def _source(self):
        if self.source == "csv" and self.csv is None:
            raise ValueError("source 'csv' needs a csv section")
        if self.partition.kind == "by_domain" and not self.domain_shift:
            raise ValueError("by_domain partitioning needs data.domain_shift transforms")
        return self


class ModelSection(_Section):
    encoder_dims: list[int] = [64]
    projector_dim: int = Field(64, ge=1)

    @field_validator("encoder_dims")
    @classmethod
    def _positive(cls, v):
        if any(d < 1 for d in v):
            raise ValueError("encoder dims must be >= 1")
        return v


class ObjectivesSection(_Section):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    mu: float = Field(0.5, ge=0)
    lam: float | None = Field(None, ge=0, alias="lambda")
    mu_prox: float = Field(0.01, ge=0)
    sigma: float | None = Field(None, gt=0)


class FederationSection(_Section):
    strategy: Literal["fedavg", "fedprox", "freeze", "feduv"] = "fedavg"
    rounds: int = Field(30, ge=1)
    local_epochs: int = Field(10, ge=1)
    num_clients: int = Field(10, ge=1)
    participation: float = Field(1.0, gt=0, le=1)
    batch_size: int = Field(64, ge=2)
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-5, ge=0)
    track_regularizers: bool = True


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    repeats: int = Field(1, ge=1)
    output_dir: str = "runs/default"
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    objectives: ObjectivesSection = ObjectivesSection()
    federation: FederationSection = FederationSection()

    @model_validator(mode="after")
    def _cross_checks(self):
        n_domains = len(self.data.domain_shift or [])
        if self.data.partition.kind == "by_domain" and n_domains != self.federation.num_clients:
            raise ValueError(
                f"by_domain partitioning needs federation.num_clients == number of domains ({n_domains})"
            )
        if self.federation.strategy == "freeze" and self.data.source == "synthetic":
            if self.data.synthetic.num_classes > self.model.projector_dim:
                raise ValueError("freeze strategy needs model.projector_dim >= number of classes")
        return self

    # -- derived objects -------------------------------------------------

    @property
    def num_classes(self) -> int | None:
        return self.data.synthetic.num_classes if self.data.source == "synthetic" else None

    def loss_weights(self, num_classes: int) -> obj.LossWeights:
        lam = self.objectives.lam if self.objectives.lam is not None else num_classes / 4.0
        return obj.LossWeights(mu=self.objectives.mu, lam=lam)

    def strategy(self, num_classes: int) -> fed.Strategy:
        kind = self.federation.strategy
        weights = self.loss_weights(num_classes) if kind == "feduv" else None
        return fed.Strategy(kind, mu_prox=self.objectives.mu_prox, weights=weights)

    def round_config(self, num_classes: int, seed: int) -> fed.RoundConfig:
        f = self.federation
        return fed.RoundConfig(
            rounds=f.rounds,
            local_epochs=f.local_epochs,
            num_clients=f.num_clients,
            participation=f.participation,
            batch_size=f.batch_size,
            lr=f.lr,
            momentum=f.momentum,
            weight_decay=f.weight_decay,
            seed=seed,
            strategy=self.strategy(num_classes),
            track_regularizers=f.track_regularizers,
            sigma=self.objectives.sigma,
        )

    def mlp_config(self, input_dim: int, num_classes: int) -> mdl.MlpConfig:
        return mdl.MlpConfig(input_dim, tuple(self.model.encoder_dims), self.model.projector_dim, num_classes)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    return resolve(cfg, base_dir)


def resolve(cfg: ExperimentConfig, base_dir: Path | None = None) -> ExperimentConfig:
    """Fill derived defaults (lambda, absolute csv path) so the config is self-contained."""
    updates = {}
    if cfg.data.source == "csv" and base_dir is not None:
        p = Path(cfg.data.csv.path)
        if not p.is_absolute():
            csv = cfg.data.csv.model_copy(update={"path": str((base_dir / p).resolve())})
            updates["data"] = cfg.data.model_copy(update={"csv": csv})
            cfg = cfg.model_copy(update=updates)
    if cfg.objectives.lam is None:
        d = cfg.num_classes
        if d is None:
            c = cfg.data.csv
            try:
                d = data_mod.load_csv_dataset(c.path, c.label_column, c.feature_columns, c.header).num_classes
            except (OSError, ValueError) as exc:
                raise ConfigError(f"data.csv.path: {exc}") from None
        cfg = cfg.model_copy(update={"objectives": cfg.objectives.model_copy(update={"lam": d / 4.0})})
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return config_from_dict(raw if raw is not None else {}, path.parent)


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
    return path
