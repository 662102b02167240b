"""
Pytest configuration and fixtures for the mergeforge tests.

This file contains shared fixtures and configuration that can be used
across all test modules: small model specs, seeded parameter sets and a
trained toy suite shared by the merging tests.
"""

from typing import Dict, List

import numpy as np
import pytest
from fastapi.testclient import TestClient

from mergeforge.api.deps import get_artifact_dir
from mergeforge.main import app
from mergeforge.models.dataset import Batch, Examples
from mergeforge.models.model_spec import Activation, ModelSpec
from mergeforge.models.parameters import ParameterSet, TaskVector
from mergeforge.schemas.config import ExperimentConfig
from mergeforge.services.bench_service import BenchService, TrainedModels
from mergeforge.services.nn_service import NNService
from mergeforge.services.suite_service import SuiteService, TaskSuite
from mergeforge.services.task_vector_service import TaskVectorService

# Small enough to train the whole suite in a few seconds.
TOY_OVERRIDES = [
    "suite.k_in=3",
    "suite.k_out=1",
    "suite.input_dim=6",
    "suite.num_classes=3",
    "suite.hidden_dims=[16]",
    "suite.n_train=150",
    "suite.n_validation=24",
    "suite.n_test=90",
    "suite.n_pretrain=300",
    "training.learning_rate=0.01",
    "training.pretrain_epochs=8",
    "training.finetune_epochs=15",
    "training.multitask_epochs=10",
    "methods.lambda_grid=[0.0, 0.25, 0.5, 0.75, 1.0]",
    "supermerge.epochs=10",
    "supermerge.batch_size=24",
    "supermerge.learning_rate=0.05",
]
TOY_SEED = 7


def make_examples(spec: ModelSpec, n: int, seed: int, id_offset: int = 0) -> Examples:
    """Random inputs with random labels for a spec."""
    rng = np.random.default_rng(seed)
    return Examples(
        ids=id_offset + np.arange(n),
        inputs=rng.normal(size=(n, spec.input_dim)).astype(np.float32),
        labels=rng.integers(0, spec.num_classes, size=n),
    )


def perturbed(params: ParameterSet, scale: float, seed: int) -> ParameterSet:
    """A fake fine-tuned model: params plus seeded Gaussian noise."""
    rng = np.random.default_rng(seed)
    return ParameterSet.from_layers(
        params, [layer.values + scale * rng.normal(size=layer.values.shape) for layer in params.layers]
    )


def task_vectors_for(pretrained: ParameterSet, models: Dict[str, ParameterSet]) -> List[TaskVector]:
    return [TaskVectorService.compute_task_vector(params, pretrained, name) for name, params in models.items()]


@pytest.fixture
def tanh_spec() -> ModelSpec:
    """4 -> 5 -> 3 MLP with tanh hidden units (smooth, for gradient checks)."""
    return ModelSpec.mlp(4, [5], 3, Activation.TANH)


@pytest.fixture
def relu_spec() -> ModelSpec:
    return ModelSpec.mlp(4, [8], 3, Activation.RELU)


@pytest.fixture
def pretrained(tanh_spec: ModelSpec) -> ParameterSet:
    return NNService.init_params(tanh_spec, seed=0)


@pytest.fixture
def fine_tuned(pretrained: ParameterSet) -> Dict[str, ParameterSet]:
    """Three fake fine-tuned models around the pretrained one."""
    return {f"task_{i:02d}": perturbed(pretrained, 0.1, seed=100 + i) for i in range(3)}


@pytest.fixture
def batch(tanh_spec: ModelSpec) -> Batch:
    return make_examples(tanh_spec, 20, seed=3).as_batch()


@pytest.fixture(scope="session")
def toy_config() -> ExperimentConfig:
    return ExperimentConfig.load(None, TOY_OVERRIDES)


@pytest.fixture(scope="session")
def toy_suite(toy_config: ExperimentConfig) -> TaskSuite:
    return SuiteService.generate_suite(toy_config.suite, TOY_SEED)


@pytest.fixture(scope="session")
def toy_trained(toy_suite: TaskSuite, toy_config: ExperimentConfig) -> TrainedModels:
    """Pretrained plus fine-tuned models of the toy suite, trained once per session."""
    return BenchService.train_models(toy_suite, toy_config, TOY_SEED)


@pytest.fixture
def artifact_dir(tmp_path):
    directory = tmp_path / "artifacts"
    directory.mkdir()
    return directory


@pytest.fixture
def client(artifact_dir) -> TestClient:
    """Test client whose checkpoint endpoints read from a temporary artifact directory."""
    app.dependency_overrides[get_artifact_dir] = lambda: artifact_dir
    yield TestClient(app)
    app.dependency_overrides.clear()
