"""
Explanation Lab - Experiment Configuration
Validated experiment settings layered as: versioned defaults file, then the
experiment file (YAML or JSON), then command-line overrides.
"""

import copy
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from attack import AttackConfig
from core_net import Activation, TrainingConfig
from datasets import MNIST_FILES
from errors import ConfigError
from explain import MethodKind, SmoothingSpec

logger = logging.getLogger(__name__)

DEFAULTS_PATH = Path(__file__).resolve().with_name("defaults.yaml")
ATTACK_TABLES = ("attack_methods", "smoothgrad_attack", "beta_smoothing_attack")


class DatasetConfig(BaseModel):
    """Where samples come from"""
    format: Literal["idx", "synthetic"] = Field("synthetic", description="MNIST-format IDX directory or seeded synthetic images")
    path: Optional[str] = Field(None, description="Directory holding the four IDX files")
    num_classes: int = Field(10, ge=2, description="Number of classes K")
    synthetic_samples: int = Field(400, ge=1, description="Synthetic sample count (train + test)")
    synthetic_side: int = Field(8, ge=2, description="Synthetic image side length")
    synthetic_noise: float = Field(0.15, ge=0, description="Synthetic pixel noise level")
    seed: int = Field(0, description="Seed of the synthetic data and of the train/test split")
    test_fraction: float = Field(0.25, gt=0, lt=1, description="Held-out share for synthetic data")
    train_limit: Optional[int] = Field(None, ge=1, description="Use only the first n training samples")

    @model_validator(mode="after")
    def _check_path(self) -> "DatasetConfig":
        if self.format == "idx" and not self.path:
            raise ValueError("dataset.path is required for the idx format")
        return self

    def referenced_files(self) -> List[Path]:
        if self.format != "idx":
            return []
        return [Path(self.path) / name for name in MNIST_FILES.values()]


class NetworkConfig(BaseModel):
    hidden_sizes: List[int] = Field(default_factory=lambda: [32, 16], description="Hidden layer widths")
    activation: Literal["relu", "softplus"] = Field("relu", description="Hidden activation of the trained network")
    beta: Optional[float] = Field(None, gt=0, description="Softplus beta")
    weights_path: Optional[str] = Field(None, description="Weights manifest to load (or write, for train)")
    init_seed: int = Field(0, description="Initialisation seed")

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_sizes(cls, sizes: List[int]) -> List[int]:
        if any(size < 1 for size in sizes):
            raise ValueError(f"hidden sizes must be positive, got {sizes}")
        return sizes

    def activation_spec(self) -> Activation:
        if self.activation == "softplus":
            if self.beta is None:
                raise ValueError("softplus networks need network.beta")
            return Activation.softplus(self.beta)
        return Activation.relu()


class SmoothingConfig(BaseModel):
    """Smoothing applied to single explanations and to attacked explanations"""
    mode: Literal["none", "beta", "smoothgrad"] = "none"
    beta: Optional[float] = Field(None, gt=0, description="Smoothing beta, or the logistic noise beta")
    samples: int = Field(10, ge=1, description="SmoothGrad sample count N")
    noise_level: float = Field(0.1, ge=0, lt=1, description="SmoothGrad noise level n")
    noise: Literal["gaussian", "logistic"] = "gaussian"

    @model_validator(mode="after")
    def _check_beta(self) -> "SmoothingConfig":
        if self.beta is None and (self.mode == "beta" or self.noise == "logistic" and self.mode == "smoothgrad"):
            raise ValueError("smoothing.beta is required for beta-smoothing and logistic noise")
        return self

    def to_spec(self, seed: int) -> SmoothingSpec:
        if self.mode == "beta":
            return SmoothingSpec.beta_smoothing(self.beta)
        if self.mode == "smoothgrad":
            return SmoothingSpec.smoothgrad(self.samples, self.noise_level, seed, self.noise, self.beta)
        return SmoothingSpec.none()


class DefenseConfig(BaseModel):
    beta: float = Field(0.8, gt=0, description="beta of the beta-smoothing arm")
    smoothgrad_samples: int = Field(10, ge=1, description="N of the SmoothGrad arm")
    smoothgrad_noise_level: float = Field(0.1, ge=0, lt=1, description="n of the SmoothGrad arm")
    recovery_betas: List[float] = Field(default_factory=lambda: [100.0, 50.0, 20.0, 10.0, 5.0, 3.0, 2.0, 1.0])
    recovery_noise_levels: List[float] = Field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2, 0.3, 0.5])


class Theorem2Config(BaseModel):
    samples: int = Field(1_000_000, ge=1, description="Monte-Carlo draws per check")
    betas: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    convergence_counts: List[int] = Field(default_factory=lambda: [1000, 10000, 100000, 1000000])
    convergence_repeats: int = Field(10, ge=1)


class GeometryConfig(BaseModel):
    """Toy-field study settings"""
    toy_hidden: int = Field(50, ge=1, description="Hidden width of the 2-D toy field")
    betas: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0, 5.0, 10.0])
    study_beta: float = Field(1.0, gt=0, description="beta of the traced contours")
    start_points: List[List[float]] = Field(default_factory=lambda: [[0.6, 0.4], [-0.5, 0.5], [0.3, -0.7]])
    arc_budget: float = Field(4.0, gt=0)
    step: float = Field(2e-3, gt=0)
    box: Optional[float] = Field(1.0, gt=0)
    raster_resolution: int = Field(256, ge=2)
    theorem2: Theorem2Config = Field(default_factory=Theorem2Config)

    @field_validator("start_points")
    @classmethod
    def _planar(cls, points: List[List[float]]) -> List[List[float]]:
        if any(len(p) != 2 for p in points):
            raise ValueError("start points must be 2-D")
        return points


class MetricsConfig(BaseModel):
    percentiles: List[float] = Field(default_factory=lambda: [10, 25, 50, 75, 90])

    @field_validator("percentiles")
    @classmethod
    def _in_range(cls, values: List[float]) -> List[float]:
        if any(not 0 <= v <= 100 for v in values):
            raise ValueError(f"percentiles must lie in [0, 100], got {values}")
        return sorted(values)


class ExperimentConfig(BaseModel):
    """One campaign: data, network, methods, attack settings, run count and seed"""
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    methods: List[str] = Field(default_factory=lambda: [kind.value for kind in MethodKind])
    ig_steps: int = Field(30, ge=1, description="Integrated-gradients steps")
    attack: Dict[str, Any] = Field(default_factory=dict, description="AttackConfig fields overriding the defaults table")
    smoothing: SmoothingConfig = Field(default_factory=SmoothingConfig)
    runs: int = Field(20, ge=0, description="Run count R per method")
    seed: Optional[int] = Field(None, ge=0, description="Campaign seed")
    output_dir: str = Field("results", description="Output directory")
    workers: int = Field(1, ge=1, description="Parallel runs")
    self_target: bool = Field(False, description="Use the source image as its own target")
    defense: DefenseConfig = Field(default_factory=DefenseConfig)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    defaults_version: str = Field("unversioned", description="version field of the defaults file")
    defaults: Dict[str, Any] = Field(default_factory=dict, exclude=True)

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, methods: List[str]) -> List[str]:
        known = {kind.value for kind in MethodKind}
        unknown = [m for m in methods if m not in known]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {sorted(known)}")
        return methods

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required for this command (--seed)")
        return self.seed

    def attack_config(self, method: Union[str, MethodKind], table: str = "attack_methods") -> AttackConfig:
        return attack_config_for(method, self.defaults or load_defaults(), self.attack, self.seed or 0, table)

    def resolved(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_document(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        document = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {str(e)}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {str(e)}") from e
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigError(f"config {path} must hold a mapping, got {type(document).__name__}")
    return document


def load_defaults(path: Union[str, Path] = DEFAULTS_PATH) -> Dict[str, Any]:
    defaults = _read_document(path)
    if "version" not in defaults:
        raise ConfigError(f"defaults file {path} has no version")
    return defaults


def attack_config_for(method: Union[str, MethodKind], defaults: Dict[str, Any],
                      overrides: Optional[Dict[str, Any]] = None, seed: int = 0,
                      table: str = "attack_methods") -> AttackConfig:
    """AttackConfig from beta growth, campaign settings, the method's table row and overrides, in that order.

    Tables without a row for ``method`` fall back to the plain attack table.
    """
    if table not in ATTACK_TABLES:
        raise ConfigError(f"unknown attack table {table!r}; choose from {ATTACK_TABLES}")
    kind = MethodKind(method).value
    rows = defaults.get(table, {})
    if table == "beta_smoothing_attack":
        rows = rows.get("methods", {})
    row = rows.get(kind) or defaults.get("attack_methods", {}).get(kind, {})

    settings: Dict[str, Any] = {"beta_growth": dict(defaults.get("beta_growth", {}))}
    settings = _deep_merge(settings, defaults.get("attack_campaign", {}))
    settings = _deep_merge(settings, row)
    settings = _deep_merge(settings, overrides or {})
    settings["seed"] = seed
    try:
        return AttackConfig.model_validate(settings)
    except ValidationError as e:
        raise ConfigError(f"invalid attack settings for {kind}: {str(e)}") from e


def _defaults_document(defaults: Dict[str, Any]) -> Dict[str, Any]:
    document: Dict[str, Any] = {"defaults_version": str(defaults["version"])}
    for section in ("training", "defense", "geometry", "metrics"):
        if section in defaults:
            document[section] = defaults[section]
    if "integrated_gradients" in defaults:
        document["ig_steps"] = defaults["integrated_gradients"].get("steps", 30)
    return document


def load_experiment_config(path: Optional[Union[str, Path]] = None,
                           overrides: Optional[Dict[str, Any]] = None,
                           defaults_path: Union[str, Path] = DEFAULTS_PATH) -> ExperimentConfig:
    """Defaults file, then ``path``, then ``overrides``; raises ConfigError on any problem"""
    defaults = load_defaults(defaults_path)
    document = _defaults_document(defaults)
    if path is not None:
        document = _deep_merge(document, _read_document(path))
    document = _deep_merge(document, overrides or {})
    document.pop("defaults", None)
    try:
        config = ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {str(e)}") from e
    config.defaults = defaults
    logger.debug(f"resolved config with defaults version {config.defaults_version}")
    return config


def check_referenced_files(config: ExperimentConfig, require_weights: bool = False) -> None:
    """All input files must exist before a run starts"""
    files = config.dataset.referenced_files()
    if require_weights and config.network.weights_path:
        files.append(Path(config.network.weights_path))
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise ConfigError(f"missing input files: {', '.join(missing)}")
