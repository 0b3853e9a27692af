import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from pydantic import BaseModel, Field, validator

from artifacts import is_square_count
from binarygan_logger import logger
from model_zoo import FAMILIES, ModelSpec
from binary_neurons import NEURON_MODES
from objectives import AdversarialObjective
from optimizers import OPTIMIZER_KINDS

CONFIG_PATH = Path(__file__).resolve().parent / "config.yaml"
ENV_PREFIX = "BINARYGAN_"


def _read_yaml(config_path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    path = Path(config_path) if config_path else CONFIG_PATH
    if not path.exists():
        if config_path:
            logger.error(f"Config file {path} not found")
            raise FileNotFoundError(f"config file {path} not found")
        return {}
    with open(path, "r") as f:
        content = yaml.safe_load(f) or {}
    if not isinstance(content, dict):
        raise ValueError(f"config file {path} must hold a mapping of keys to values")
    return {str(k).lower(): v for k, v in content.items()}


def get_config(key: str, default: Any = None, config_path: Optional[Union[str, Path]] = None) -> Any:
    """
    Read one configuration key.
    The environment variable BINARYGAN_<KEY> wins over the config file.
    """
    env_value = os.environ.get(f"{ENV_PREFIX}{key.upper()}")
    if env_value is not None:
        return env_value
    return _read_yaml(config_path).get(key.lower(), default)


class ExperimentConfig(BaseModel):
    """
    Every knob of one training run.
    Attributes:
        run_id : Name used in every artifact; derived from the run settings when unset.
        n_critic, bn_in_d, optimizer : Left unset they follow the objective's conventions.
    """
    run_id: Optional[str] = Field(None, description="Run name used in artifact file names")
    seed: int = Field(0, ge=0, description="Master seed for every random stream")
    objective: str = Field("WGAN_GP", description="Adversarial objective: GAN, WGAN or WGAN_GP")
    gp_lambda: float = Field(10.0, ge=0, description="Gradient-penalty coefficient (WGAN_GP)")
    clip_bound: float = Field(0.01, gt=0, description="Critic weight clipping bound (WGAN)")
    n_critic: Optional[int] = Field(None, ge=1, description="Discriminator steps per generator step")
    neuron_mode: str = Field("deterministic", description="Output neurons: deterministic, stochastic or real_valued")
    family: str = Field("MLP", description="Network family: MLP or CNN")
    bn_in_g: bool = Field(True, description="Batch norm in the generator")
    bn_in_d: Optional[bool] = Field(None, description="Batch norm in the discriminator")
    optimizer: Optional[str] = Field(None, description="adam or rmsprop")
    learning_rate: float = Field(1e-4, gt=0, description="Optimizer learning rate")
    beta1: float = Field(0.5, ge=0, lt=1, description="Adam first-moment decay")
    beta2: float = Field(0.9, ge=0, lt=1, description="Adam second-moment decay")
    rms_decay: float = Field(0.9, ge=0, lt=1, description="RMSProp decay rate")
    optimizer_eps: float = Field(1e-8, gt=0, description="Optimizer denominator epsilon")
    epochs: int = Field(20, ge=1, description="Training epochs")
    max_steps: Optional[int] = Field(None, ge=1, description="Stop after this many generator steps")
    batch_size: int = Field(64, ge=2, description="Images per batch")
    anneal_slope: bool = Field(True, description="Multiply the sigmoid slope after every epoch")
    slope_factor: float = Field(1.1, ge=1, description="Slope multiplier per epoch")
    initial_slope: float = Field(1.0, gt=0, description="Slope before annealing")
    latent_dim: int = Field(128, ge=1, description="Latent vector size")
    sample_count: int = Field(64, ge=1, description="Samples rendered per epoch")
    data_dir: Optional[str] = Field(None, description="Directory holding the MNIST IDX files")
    data_limit: Optional[int] = Field(None, ge=1, description="Use only the first N training images")
    output_dir: str = Field("runs", description="Directory receiving run artifacts")

    @validator("objective", pre=True)
    def _objective(cls, objective):
        return AdversarialObjective(kind=objective).kind

    @validator("neuron_mode")
    def _neuron_mode(cls, mode):
        if mode not in NEURON_MODES:
            raise ValueError(f"unknown neuron mode '{mode}'; expected one of {', '.join(NEURON_MODES)}")
        return mode

    @validator("family", pre=True)
    def _family(cls, family):
        family = str(family).upper()
        if family not in FAMILIES:
            raise ValueError(f"unknown family '{family}'; expected one of {', '.join(FAMILIES)}")
        return family

    @validator("sample_count")
    def _square_sample_count(cls, count):
        if not is_square_count(count):
            raise ValueError(f"sample_count must be a perfect square for the sample grid, got {count}")
        return count

    @validator("optimizer", pre=True)
    def _optimizer(cls, optimizer):
        if optimizer is None:
            return None
        optimizer = str(optimizer).lower()
        if optimizer not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer '{optimizer}'; expected one of {', '.join(OPTIMIZER_KINDS)}")
        return optimizer

    @property
    def resolved_n_critic(self) -> int:
        return self.objective_spec().n_critic

    @property
    def resolved_bn_in_d(self) -> bool:
        return self.objective == "GAN" if self.bn_in_d is None else self.bn_in_d

    @property
    def resolved_optimizer(self) -> str:
        if self.optimizer:
            return self.optimizer
        return "rmsprop" if self.objective == "WGAN" else "adam"

    @property
    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        bn = "bnD" if self.resolved_bn_in_d else "nobnD"
        return f"{self.family.lower()}-{self.objective.lower()}-{self.neuron_mode}-{bn}-s{self.seed}"

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.resolved_run_id

    def objective_spec(self) -> AdversarialObjective:
        return AdversarialObjective(kind=self.objective, clip_bound=self.clip_bound, gp_lambda=self.gp_lambda,
                                    n_critic=self.n_critic)

    def model_spec(self, side: str) -> ModelSpec:
        return ModelSpec(family=self.family, side=side, output_mode=self.neuron_mode, objective=self.objective,
                         bn_in_g=self.bn_in_g, bn_in_d=self.resolved_bn_in_d, latent_dim=self.latent_dim,
                         initial_slope=self.initial_slope, slope_factor=self.slope_factor)

    def portable_dict(self) -> Dict[str, Any]:
        """Settings without filesystem paths, so checkpoints do not depend on where a run lives."""
        return self.dict(exclude={"data_dir", "output_dir"})


def _env_overrides() -> Dict[str, str]:
    overrides = {}
    for field in ExperimentConfig.__fields__:
        value = os.environ.get(f"{ENV_PREFIX}{field.upper()}")
        if value is not None:
            overrides[field] = value
    return overrides


def load_experiment_config(config_path: Optional[Union[str, Path]] = None,
                           overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Build the run configuration.
    Precedence, lowest first: field defaults, config file, BINARYGAN_<FIELD>
    environment variables, then `overrides` (CLI flags; None values are ignored).
    """
    values: Dict[str, Any] = {}
    file_values = _read_yaml(config_path)
    unknown = sorted(set(file_values) - set(ExperimentConfig.__fields__))
    if unknown:
        logger.warning(f"Ignoring unknown config keys: {', '.join(unknown)}")
    values.update({k: v for k, v in file_values.items() if k in ExperimentConfig.__fields__ and v is not None})
    values.update(_env_overrides())
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**values)
