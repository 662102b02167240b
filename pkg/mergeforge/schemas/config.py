import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from mergeforge.core.exceptions import ConfigError
from mergeforge.models.model_spec import Activation


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAMW = "adamw"


class LossWeighting(str, Enum):
    """How the validation union is averaged while fitting merge weights."""
    EXAMPLES = "examples"
    TASKS = "tasks"


class TrimScope(str, Enum):
    GLOBAL = "global"
    PER_LAYER = "per_layer"


MERGING_METHODS = (
    "task_arithmetic",
    "dare_ta",
    "ties",
    "dare_ties",
    "supermerge",
    "supermerge_no_tanh",
    "hierarchical",
)
REFERENCE_METHODS = ("pretrained", "individual", "multitask")
ALL_METHODS = REFERENCE_METHODS + MERGING_METHODS


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class OptimizerConfig(_Section):
    """AdamW / SGD hyperparameters."""
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    learning_rate: float = Field(default=1e-3, ge=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = Field(default=1e-8, gt=0.0)


class SuiteConfig(_Section):
    """Synthetic task suite: rotated, relabelled Gaussian-mixture problems."""
    k_in: int = Field(default=6, ge=2)
    k_out: int = Field(default=3, ge=0)
    input_dim: int = Field(default=16, ge=2)
    num_classes: int = Field(default=4, ge=2)
    hidden_dims: List[int] = Field(default_factory=lambda: [64, 64, 64])
    activation: Activation = Activation.RELU
    n_train: int = Field(default=400, ge=2)
    n_validation: int = Field(default=32, ge=1)
    n_test: int = Field(default=200, ge=1)
    n_pretrain: int = Field(default=1200, ge=2)
    validation_fraction: Optional[float] = Field(
        default=None, gt=0.0, lt=1.0,
        description="Carve validation out of train instead of sampling n_validation"
    )
    components_per_class: int = Field(default=2, ge=1)
    cluster_radius: float = Field(default=3.0, gt=0.0)
    noise_std: float = Field(default=0.6, gt=0.0)

    @field_validator("hidden_dims")
    @classmethod
    def check_hidden(cls, v: List[int]) -> List[int]:
        if any(width < 1 for width in v):
            raise ValueError("hidden widths must be positive")
        return v


class TrainingConfig(OptimizerConfig):
    """Pretraining, fine-tuning and multitask reference training budgets."""
    learning_rate: float = Field(default=3e-3, ge=0.0)
    batch_size: int = Field(default=32, ge=1)
    pretrain_epochs: int = Field(default=20, ge=1)
    finetune_epochs: int = Field(default=40, ge=1)
    multitask_epochs: int = Field(default=40, ge=1)


class MethodsConfig(_Section):
    """Which methods to run and the non-gradient baselines' hyperparameters."""
    methods: List[str] = Field(default_factory=lambda: list(ALL_METHODS))
    lambda_grid: List[float] = Field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 11)])
    dare_drop_prob: float = Field(default=0.9, ge=0.0, lt=1.0)
    ties_density: float = Field(default=0.2, gt=0.0, le=1.0)
    ties_trim_scope: TrimScope = TrimScope.GLOBAL

    @field_validator("methods")
    @classmethod
    def check_methods(cls, v: List[str]) -> List[str]:
        unknown = [m for m in v if m not in ALL_METHODS]
        if unknown:
            raise ValueError(f"Unknown method(s): {', '.join(unknown)}")
        return list(dict.fromkeys(v))

    @field_validator("lambda_grid")
    @classmethod
    def check_grid(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("lambda_grid must not be empty")
        if any(not 0.0 <= lam <= 1.0 for lam in v):
            raise ValueError("lambda_grid values must lie in [0, 1]")
        return v


class MergeHyperParams(_Section):
    """Knobs of the non-gradient mergers (lambda, DARE drop rate, TIES density)."""
    lam: float = Field(default=1.0, ge=0.0, le=1.0, alias="lambda")
    drop_prob: float = Field(default=0.9, ge=0.0, lt=1.0)
    density: float = Field(default=0.2, gt=0.0, le=1.0)
    trim_scope: TrimScope = TrimScope.GLOBAL
    seed: int = 0

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @classmethod
    def from_methods(cls, methods: "MethodsConfig", seed: int, lam: float = 1.0) -> "MergeHyperParams":
        return cls(
            lam=lam,
            drop_prob=methods.dare_drop_prob,
            density=methods.ties_density,
            trim_scope=methods.ties_trim_scope,
            seed=seed,
        )


class FitConfig(OptimizerConfig):
    """Settings for learning the k x n merge-weight matrix."""
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=0.1, ge=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    init_value: float = 0.0
    use_tanh: bool = True
    loss_weighting: LossWeighting = LossWeighting.EXAMPLES
    seed: int = 0


class HierarchicalConfig(_Section):
    fan_in_limit: int = Field(default=2, ge=2)
    plan: Optional[List[Any]] = Field(
        default=None, description="Explicit nested task-name lists; overrides similarity grouping"
    )
    spill_dir: Optional[Path] = None
    match_flat_steps: bool = Field(
        default=True, description="Run every node for as many optimizer steps as a flat fit over the whole plan"
    )


class CostConfig(_Section):
    """Inputs for the analytic cost table, sized like a 2.85B-parameter model merged over 11 tasks."""
    n_para: int = Field(default=2_850_000_000, ge=0)
    n_task_vector: Optional[int] = Field(default=None, ge=0)
    n_layers: int = Field(default=192, ge=1)
    k: int = Field(default=11, ge=1)
    training_samples: int = Field(default=254_164, ge=0)
    merge_samples: int = Field(default=352, ge=0)
    flops_fwd_coeff: float = Field(default=2.0, gt=0.0)
    flops_train_coeff: float = Field(default=4.0, gt=0.0)
    flops_merge_backward_coeff: float = Field(default=1.52, gt=0.0)
    # Calibrated once against measured per-epoch FLOPs; overridable.
    flops_scale: float = Field(default=11.67, gt=0.0)

    @property
    def task_vector_size(self) -> int:
        return self.n_para if self.n_task_vector is None else self.n_task_vector


class ExperimentConfig(_Section):
    """Single JSON experiment file: one section per concern plus the master seed."""
    seed: int = 0
    suite: SuiteConfig = Field(default_factory=SuiteConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    methods: MethodsConfig = Field(default_factory=MethodsConfig)
    supermerge: FitConfig = Field(default_factory=FitConfig)
    hierarchical: HierarchicalConfig = Field(default_factory=HierarchicalConfig)
    cost: CostConfig = Field(default_factory=CostConfig)

    @classmethod
    def load(
        cls,
        path: Optional[Union[str, Path]] = None,
        overrides: Sequence[str] = (),
    ) -> "ExperimentConfig":
        """Read a JSON config (or defaults), apply `section.key=value` overrides, validate."""
        data: Dict[str, Any] = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except FileNotFoundError as exc:
                raise ConfigError(f"Config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("Config file must hold a JSON object")

        for override in overrides:
            apply_override(data, override)

        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(f"Invalid configuration:\n{exc}") from exc

    def dump(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def apply_override(data: Dict[str, Any], override: str) -> None:
    """Apply one `a.b.c=value` assignment; value is parsed as JSON when possible."""
    if "=" not in override:
        raise ConfigError(f"Override '{override}' must look like section.key=value")
    dotted, raw = override.split("=", 1)
    keys = [key for key in dotted.strip().split(".") if key]
    if not keys:
        raise ConfigError(f"Override '{override}' has an empty key")

    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw

    node = data
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Override '{override}' descends into non-section '{key}'")
        node = child
    node[keys[-1]] = value
