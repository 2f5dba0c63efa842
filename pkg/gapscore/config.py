# config.py
import os
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Type, TypeVar

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from gapscore.data.models import Algorithm, Strategy
from gapscore.utils.errors import ConfigurationError
from gapscore.utils.validators import validate_rho_grid, validate_seed, validate_strategy_pairs

load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    LOG_LEVEL = os.environ.get('GAPSCORE_LOG_LEVEL', 'INFO')
    LOG_FORMAT = os.environ.get('GAPSCORE_LOG_FORMAT', '%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    JOBS = int(os.environ.get('GAPSCORE_JOBS', 1))


DEFAULT_RHO_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
RHO_CORR_GRID = [0.4, 0.6, 0.8, 1.2]
# stand-in for NA that no real feature takes
SENTINEL_VALUE = -9999.0

SynthKind = Literal["uncorrelated", "noise", "correlated", "mixture"]
InjectionMode = Literal["mcar", "instances", "features"]

M = TypeVar("M", bound=BaseModel)


def build(model_cls: Type[M], data=None, **kwargs) -> M:
    """Validate `data` into `model_cls`, raising ConfigurationError on failure"""
    payload = dict(data or {})
    payload.update(kwargs)
    try:
        return model_cls.model_validate(payload)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in err['loc']) or model_cls.__name__}: {err['msg']}"
            + (f" (got {err['input']!r})" if err["loc"] and not isinstance(err.get("input"), dict) else "")
            for err in e.errors()
        )
        raise ConfigurationError(f"Invalid {model_cls.__name__}: {problems}") from e


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    config: SynthKind = "uncorrelated"
    n: int = Field(3000, ge=2)
    d: int = Field(8, ge=1)
    anomaly_frac: float = 0.10
    rho_corr: float = 0.4
    c: float = 2.0
    b: float = 2.0
    n_noise: int = Field(5, ge=0)

    @field_validator("anomaly_frac")
    @classmethod
    def _fraction_inside_unit_interval(cls, value):
        if not 0.0 < value < 1.0:
            raise ValueError(f"anomaly_frac must be in (0, 1), got {value}")
        return value

    @model_validator(mode="after")
    def _equicorrelation_positive_definite(self):
        # eigenvalues c - rho and c + (d - 1) rho
        if self.config == "correlated" and not self.c > self.rho_corr:
            raise ValueError(f"c={self.c} must exceed rho_corr={self.rho_corr} for a positive-definite covariance")
        return self


class MiceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    ridge_lambda: float = Field(0.01, gt=0, alias="lambda")
    total_passes: int = Field(110, ge=1, alias="passes")
    burn_in: int = Field(10, ge=0)
    corpus: Literal["train+test", "test-only"] = "train+test"

    @model_validator(mode="after")
    def _burn_in_shorter_than_run(self):
        if self.burn_in >= self.total_passes:
            raise ValueError(f"burn_in ({self.burn_in}) must be smaller than total_passes ({self.total_passes})")
        return self


class IForestSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    trees: int = Field(100, ge=1)
    subsample: int = Field(256, ge=2)


class LodaSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    projections: int = Field(100, ge=1)


class EgmmSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    ks: List[int] = Field(default_factory=lambda: [3, 4, 5], min_length=1)
    reps: int = Field(15, ge=1)

    @field_validator("ks")
    @classmethod
    def _positive_component_counts(cls, value):
        if any(k < 1 for k in value):
            raise ValueError(f"component counts must be >= 1, got {value}")
        return value


class DatasetEntry(BaseModel):
    """Either a synthetic generator configuration or a labeled CSV file"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    synthetic: Optional[SynthKind] = None
    csv: Optional[str] = None
    label_column: str = "label"
    sentinel: Optional[float] = None
    name: Optional[str] = None
    n: Optional[int] = None
    d: Optional[int] = None
    anomaly_frac: Optional[float] = None
    rho_corr: Optional[float] = None
    c: Optional[float] = None
    b: Optional[float] = None
    n_noise: Optional[int] = None

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.synthetic is None) == (self.csv is None):
            raise ValueError("each dataset entry needs exactly one of 'synthetic' or 'csv'")
        return self

    @property
    def dataset_name(self) -> str:
        if self.name:
            return self.name
        if self.synthetic:
            return self.synthetic
        return Path(self.csv).stem

    def synth_config(self) -> SynthConfig:
        overrides = {
            key: getattr(self, key)
            for key in ("n", "d", "anomaly_frac", "rho_corr", "c", "b", "n_noise")
            if getattr(self, key) is not None
        }
        return build(SynthConfig, overrides, config=self.synthetic)


class GridSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    rho: List[float] = Field(default_factory=lambda: list(DEFAULT_RHO_GRID))
    replicates: int = Field(20, ge=1)
    mode: InjectionMode = "mcar"
    feature_rate: float = Field(0.10, gt=0, le=1)
    row_fraction: float = Field(0.20, gt=0, le=1)
    ensemble_scale: List[int] = Field(default_factory=lambda: [1], min_length=1)

    @field_validator("rho")
    @classmethod
    def _valid_grid(cls, value):
        errors = validate_rho_grid(value)
        if errors:
            raise ValueError("; ".join(errors))
        return value

    @field_validator("ensemble_scale")
    @classmethod
    def _positive_unique_scales(cls, value):
        if any(s < 1 for s in value) or len(set(value)) != len(value):
            raise ValueError(f"ensemble_scale must hold distinct multipliers >= 1, got {value}")
        return value


class SeedSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    master: Optional[int] = None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dataset: List[DatasetEntry]
    algorithms: Dict[Algorithm, List[Strategy]]
    grid: GridSettings = Field(default_factory=GridSettings)
    seed: SeedSettings = Field(default_factory=SeedSettings)
    iforest: IForestSettings = Field(default_factory=IForestSettings)
    loda: LodaSettings = Field(default_factory=LodaSettings)
    egmm: EgmmSettings = Field(default_factory=EgmmSettings)
    mice: MiceConfig = Field(default_factory=MiceConfig)
    sentinel_value: float = SENTINEL_VALUE
    jobs: int = Field(default_factory=lambda: Config.JOBS, ge=1)
    output: Optional[str] = None

    @field_validator("dataset", mode="before")
    @classmethod
    def _single_dataset_to_list(cls, value):
        if isinstance(value, dict):
            return [value]
        return value

    @field_validator("algorithms", mode="before")
    @classmethod
    def _supported_pairs(cls, value):
        errors = validate_strategy_pairs(value or {})
        if errors:
            raise ValueError("; ".join(errors))
        return value

    @property
    def master_seed(self) -> int:
        errors = validate_seed(self.seed.master)
        if errors:
            raise ConfigurationError("; ".join(errors))
        return self.seed.master

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Apply CLI flag values (None means keep the file value)"""
        data = self.model_dump(mode="json", by_alias=True)
        if overrides.get("seed") is not None:
            data["seed"]["master"] = overrides["seed"]
        if overrides.get("jobs") is not None:
            data["jobs"] = overrides["jobs"]
        if overrides.get("replicates") is not None:
            data["grid"]["replicates"] = overrides["replicates"]
        if overrides.get("rho") is not None:
            data["grid"]["rho"] = overrides["rho"]
        if overrides.get("output") is not None:
            data["output"] = overrides["output"]
        return build(ExperimentConfig, data)


def load_experiment_config(path) -> ExperimentConfig:
    """Read and validate a YAML experiment file"""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Experiment config not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Experiment config {path} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"Experiment config {path} must be a mapping of sections")

    config = build(ExperimentConfig, data)
    logger.info(f"Loaded experiment config {path}: {len(config.dataset)} dataset(s), "
                f"{sum(len(s) for s in config.algorithms.values())} algorithm/strategy pair(s)")
    return config
