"""Typed configuration objects.

Every config is a frozen pydantic model that rejects unknown keys, so a typo
in a JSON config file fails loudly instead of silently falling back to a
default.
"""
from __future__ import annotations

import hashlib
import json
import math
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigError

U64_MAX = 2**64 - 1

#: inverse temperatures used for the reported image experiments
BETA_PRESETS = (5.0, 14.28)
# constant SGD step for the preset runs
FIG7_GAMMA = 1.0


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EncoderSpec(_Strict):
    kind: Literal["embedding-table", "linear", "mlp2"]
    modality: Literal["unimodal", "bimodal"] = "unimodal"
    input_dim: Optional[int] = Field(default=None, ge=1)
    feature_dim: int = Field(ge=1)
    hidden_dim: Optional[int] = Field(default=None, ge=1)
    normalize: bool = True
    norm_bound: float = Field(default=1.0, gt=0)
    # embedding-table only; filled from the dataset when left unset
    n_items: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind in ("linear", "mlp2") and self.input_dim is None:
            raise ValueError(f"{self.kind} encoder needs input_dim")
        if self.kind == "mlp2" and self.hidden_dim is None:
            raise ValueError("mlp2 encoder needs hidden_dim")
        if self.normalize and self.norm_bound < 1.0:
            raise ValueError("normalized features have norm 1; norm_bound must be >= 1")
        return self

    def with_items(self, n_items: int) -> "EncoderSpec":
        if self.kind != "embedding-table" or self.n_items == n_items:
            return self
        return self.model_copy(update={"n_items": n_items})


class DatasetSpec(_Strict):
    mode: Literal["synthetic-clusters", "csv-features", "precomputed-augmentations"] = (
        "synthetic-clusters"
    )
    m: int = Field(default=100, ge=2)
    clusters: int = Field(default=10, ge=1)
    input_dim: int = Field(default=8, ge=1)
    noise_sigma: float = Field(default=0.1, ge=0)
    # spread of base items around their cluster center
    cluster_sigma: float = Field(default=0.3, ge=0)
    augmentations_per_item: Union[int, Literal["infinite"]] = 2
    seed: int = Field(default=0, ge=0, le=U64_MAX)
    path: Optional[str] = None

    @field_validator("augmentations_per_item")
    @classmethod
    def _check_aug(cls, v):
        if isinstance(v, int) and v < 1:
            raise ValueError("augmentations_per_item must be >= 1 or 'infinite'")
        return v

    @model_validator(mode="after")
    def _check_path(self):
        if self.mode != "synthetic-clusters" and not self.path:
            raise ValueError(f"dataset mode {self.mode} needs a path")
        return self


class TrainConfig(_Strict):
    algorithm: Literal["emc2", "simclr", "exact-gd"] = "emc2"
    beta: float = Field(default=5.0, gt=0)
    batch_size: int = Field(default=4, ge=1)
    R: Optional[int] = Field(default=None, ge=1)
    P: Optional[int] = Field(default=None, ge=0)
    # emc2 only: propose from the other views of the mini-batch instead of
    # the full negative set
    in_batch: bool = False
    gamma: float = Field(default=0.1, ge=0)
    schedule: Literal["constant", "inv-sqrt-T"] = "constant"
    total_iterations: int = Field(default=1000, ge=0)
    # when set, overrides total_iterations with an equal-sample budget
    epochs: Optional[float] = Field(default=None, ge=0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    # L2 penalty added to every update, never to the reported loss or gradient
    weight_decay: float = Field(default=0.0, ge=0)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    eval_every: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0, le=U64_MAX)
    # wall-clock columns break byte-identical logs, so they are opt-in
    timing: bool = False

    @field_validator("beta")
    @classmethod
    def _finite_beta(cls, v):
        if not math.isfinite(v):
            raise ValueError("beta must be finite")
        return v

    @model_validator(mode="after")
    def _check_chain(self):
        if self.R is not None and self.P is not None and self.P >= self.R:
            raise ValueError(f"burn-in P={self.P} must be < R={self.R}")
        if self.in_batch and self.batch_size < 2:
            raise ValueError("in-batch sampling needs batch_size >= 2")
        return self

    def chain_lengths(self) -> tuple[int, int]:
        """Resolved (R, P) for the emc2 sampler."""
        if self.in_batch:
            R = 2 * self.batch_size - 2
            if self.R is not None and self.R != R:
                raise ConfigError(f"in-batch mode fixes R = 2b - 2 = {R}, got R={self.R}")
            P = self.batch_size - 1 if self.P is None else self.P
        else:
            R = 2 if self.R is None else self.R
            P = R - 1 if self.P is None else self.P
        if P >= R:
            raise ConfigError(f"burn-in P={P} must be < R={R}")
        return R, P

    def bases_per_iteration(self, m: int) -> int:
        return m if self.algorithm == "exact-gd" else min(self.batch_size, m)

    def iterations(self, m: int) -> int:
        """Number of iterations T, honouring an epoch budget if one is set."""
        if self.epochs is None:
            return self.total_iterations
        return int(math.ceil(self.epochs * m / self.bases_per_iteration(m)))

    def step_size(self, T: int) -> float:
        if self.schedule == "inv-sqrt-T":
            return self.gamma / math.sqrt(max(T, 1))
        return self.gamma


class ExperimentConfig(_Strict):
    dataset: DatasetSpec = DatasetSpec()
    encoder: EncoderSpec
    train: TrainConfig = TrainConfig()
    output_dir: str = "runs/out"
    checkpoint_every: int = Field(default=0, ge=0)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    try:
        return ExperimentConfig.model_validate(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_hash(cfg: BaseModel) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def fig7_preset(algorithm: str = "emc2", seed: int = 0, epochs: float = 200.0) -> ExperimentConfig:
    """Desk-scale analog of the exactly-evaluable two-augmentation subset run.

    100 base items with two stored views each, a normalized 8-dimensional
    embedding table, beta = 5, plain SGD and b = 4 bases per mini-batch.
    """
    return ExperimentConfig(
        dataset=DatasetSpec(m=100, clusters=10, input_dim=8, augmentations_per_item=2, seed=seed),
        encoder=EncoderSpec(kind="embedding-table", feature_dim=8, normalize=True),
        train=TrainConfig(
            algorithm=algorithm,
            beta=5.0,
            batch_size=4,
            in_batch=algorithm == "emc2",
            gamma=FIG7_GAMMA,
            epochs=epochs,
            optimizer="sgd",
            eval_every=1000,
            seed=seed,
        ),
        output_dir=f"runs/fig7-{algorithm}-{seed}",
    )

