import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import ortho_group

from mergeforge.core.exceptions import ConfigError
from mergeforge.models.dataset import DatasetSplit, Examples
from mergeforge.models.model_spec import ModelSpec
from mergeforge.schemas.config import SuiteConfig
from mergeforge.services.checkpoint_service import CheckpointService
from mergeforge.utils.rng import keyed_generator

logger = logging.getLogger(__name__)

PRETRAIN_TASK = "pretrain"
# Example ids are unique across a suite: task slot * ID_STRIDE + running index.
ID_STRIDE = 1_000_000


@dataclass(frozen=True, eq=False)
class TaskSuite:
    """Pretraining mixture plus in-domain (merged) and out-of-domain (held-out) tasks."""
    pretrain_mixture: DatasetSplit
    in_domain_tasks: List[DatasetSplit]
    out_of_domain_tasks: List[DatasetSplit] = field(default_factory=list)
    generator_seed: int = 0

    @property
    def in_domain_names(self) -> List[str]:
        return [split.task_name for split in self.in_domain_tasks]

    @property
    def out_of_domain_names(self) -> List[str]:
        return [split.task_name for split in self.out_of_domain_tasks]

    @property
    def tasks(self) -> Dict[str, DatasetSplit]:
        return {split.task_name: split for split in self.in_domain_tasks + self.out_of_domain_tasks}

    def fingerprint(self) -> str:
        """SHA-256 over every array of every split, in a fixed order."""
        digest = hashlib.sha256()
        for split in [self.pretrain_mixture, *self.in_domain_tasks, *self.out_of_domain_tasks]:
            digest.update(split.task_name.encode("utf-8"))
            for part in (split.train, split.validation, split.test):
                for array in (part.ids, part.inputs, part.labels):
                    digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()


class _MixtureProblem:
    """Gaussian mixture with several components per class; tasks rotate inputs and permute labels."""

    def __init__(self, cfg: SuiteConfig, seed: int):
        rng = keyed_generator(seed, "suite", "centers")
        n_components = cfg.num_classes * cfg.components_per_class
        directions = rng.normal(size=(n_components, cfg.input_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        self.centers = cfg.cluster_radius * directions
        self.component_labels = np.repeat(np.arange(cfg.num_classes), cfg.components_per_class)
        self.cfg = cfg

    def sample(self, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
        components = rng.integers(0, len(self.centers), size=n)
        noise = rng.normal(scale=self.cfg.noise_std, size=(n, self.cfg.input_dim))
        return self.centers[components] + noise, self.component_labels[components]


class SuiteService:
    """Synthetic task suites for desk-scale merging experiments."""

    @staticmethod
    def model_spec(cfg: SuiteConfig) -> ModelSpec:
        return ModelSpec.mlp(cfg.input_dim, cfg.hidden_dims, cfg.num_classes, cfg.activation)

    @staticmethod
    def _make_task(
        problem: _MixtureProblem,
        cfg: SuiteConfig,
        seed: int,
        name: str,
        slot: int,
        n_train: int,
        rotation: Optional[np.ndarray],
        permutation: Optional[np.ndarray],
    ) -> DatasetSplit:
        rng = keyed_generator(seed, "suite", "samples", name)
        carve = cfg.validation_fraction is not None
        sizes = [n_train, 0 if carve else cfg.n_validation, cfg.n_test]
        inputs, labels = problem.sample(rng, sum(sizes))
        if rotation is not None:
            inputs = inputs @ rotation
        if permutation is not None:
            labels = permutation[labels]
        ids = slot * ID_STRIDE + np.arange(sum(sizes))
        everything = Examples(ids=ids, inputs=inputs.astype(np.float32), labels=labels)

        bounds = np.cumsum(sizes)
        train = everything.subset(np.arange(0, bounds[0]))
        validation = everything.subset(np.arange(bounds[0], bounds[1]))
        test = everything.subset(np.arange(bounds[1], bounds[2]))
        if carve:
            train, validation = CheckpointService.split_validation(train, cfg.validation_fraction, seed, name)

        return DatasetSplit(
            task_name=name,
            input_dim=cfg.input_dim,
            num_classes=cfg.num_classes,
            train=train,
            validation=validation,
            test=test,
        )

    @staticmethod
    def generate_suite(cfg: SuiteConfig, seed: int) -> TaskSuite:
        """
        Build k_in in-domain and k_out out-of-domain tasks over one input space.

        Every task applies its own random rotation to the inputs and its own
        permutation to the labels of a shared mixture, so a model trained on
        the unrotated mixture is weak on each task while fine-tuning solves it.
        All tasks share input_dim and num_classes.
        """
        if cfg.k_in < 2:
            raise ConfigError("A suite needs at least two in-domain tasks")
        if min(cfg.n_train, cfg.n_test, cfg.n_pretrain) < 1:
            raise ConfigError("Split sizes must be positive")

        problem = _MixtureProblem(cfg, seed)
        pretrain = SuiteService._make_task(
            problem, cfg, seed, PRETRAIN_TASK, 0, cfg.n_pretrain, rotation=None, permutation=None
        )

        names = [f"task_{i:02d}" for i in range(cfg.k_in)] + [f"ood_{i:02d}" for i in range(cfg.k_out)]
        tasks: List[DatasetSplit] = []
        for slot, name in enumerate(names, start=1):
            rng = keyed_generator(seed, "suite", "transform", name)
            rotation = ortho_group.rvs(cfg.input_dim, random_state=rng)
            permutation = rng.permutation(cfg.num_classes)
            tasks.append(SuiteService._make_task(
                problem, cfg, seed, name, slot, cfg.n_train, rotation=rotation, permutation=permutation
            ))
            logger.debug("generated task %s", name)

        return TaskSuite(
            pretrain_mixture=pretrain,
            in_domain_tasks=tasks[:cfg.k_in],
            out_of_domain_tasks=tasks[cfg.k_in:],
            generator_seed=seed,
        )
