import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from mergeforge.core.exceptions import ConfigError, DataError
from mergeforge.models.dataset import Examples
from mergeforge.models.model_spec import ModelSpec
from mergeforge.models.parameters import MergeWeights, ParameterSet, TaskVector
from mergeforge.schemas.config import ALL_METHODS, ExperimentConfig, MergeHyperParams, REFERENCE_METHODS
from mergeforge.schemas.cost import CostInput, CostRow, PeakModelsMeasurement
from mergeforge.schemas.report import CurvePoint, MethodReport, NodeReport
from mergeforge.services.checkpoint_service import CHECKPOINT_SUFFIX, CheckpointService
from mergeforge.services.cost_service import CostService
from mergeforge.services.hierarchical_service import HierarchicalService
from mergeforge.services.merge_service import GRID_METHODS, MergeService
from mergeforge.services.nn_service import NNService
from mergeforge.services.supermerge_service import SuperMergeService
from mergeforge.services.suite_service import TaskSuite, SuiteService
from mergeforge.services.task_vector_service import TaskVectorService
from mergeforge.utils.ranking import competition_ranks
from mergeforge.utils.rng import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class TrainedModels:
    """Pretrained anchor, per-task fine-tuned models and their task vectors."""
    spec: ModelSpec
    pretrained: ParameterSet
    fine_tuned: Dict[str, ParameterSet]
    task_vectors: Dict[str, TaskVector]
    training_losses: Dict[str, List[float]] = field(default_factory=dict)


@dataclass
class BenchmarkResult:
    seed: int
    methods: List[str]
    in_domain: List[MethodReport]
    out_of_domain: List[MethodReport]
    task_vectors: Dict[str, TaskVector]
    curves: Dict[str, List[CurvePoint]] = field(default_factory=dict)
    lambdas: Dict[str, float] = field(default_factory=dict)
    merge_weights: Dict[str, MergeWeights] = field(default_factory=dict)
    use_tanh: Dict[str, bool] = field(default_factory=dict)
    node_reports: List[NodeReport] = field(default_factory=list)
    plan: Optional[Any] = None
    peak_concurrent_models: Optional[int] = None
    peak_measurement: Optional[PeakModelsMeasurement] = None
    cost_rows: List[CostRow] = field(default_factory=list)

    def report(self, method: str, out_of_domain: bool = False) -> MethodReport:
        for report in self.out_of_domain if out_of_domain else self.in_domain:
            if report.method == method:
                return report
        raise KeyError(method)


def _accuracies(spec: ModelSpec, params: ParameterSet, tests: Mapping[str, Examples]) -> Dict[str, float]:
    return {task: NNService.evaluate(spec, params, examples) for task, examples in tests.items()}


def _rank_reports(reports: List[MethodReport], tasks: Sequence[str]) -> None:
    """Competition ranks per task over the merging methods; reference rows stay unranked."""
    ranked = [report for report in reports if not report.reference]
    for task in tasks:
        scores = {r.method: r.accuracies[task] for r in ranked if r.accuracies.get(task) is not None}
        for method, rank in competition_ranks(scores).items():
            next(r for r in ranked if r.method == method).ranks[task] = rank
    for report in reports:
        values = [v for v in report.accuracies.values() if v is not None]
        report.average_accuracy = sum(values) / len(values) if values else None
        if report.ranks:
            report.average_rank = sum(report.ranks.values()) / len(report.ranks)


class BenchService:
    """End-to-end protocol: train, merge with every method, evaluate, rank."""

    @staticmethod
    def train_models(suite: TaskSuite, cfg: ExperimentConfig, seed: int) -> TrainedModels:
        """Pretrain on the mixture, then fine-tune one model per in-domain task from it."""
        spec = SuiteService.model_spec(cfg.suite)
        training = cfg.training
        init = NNService.init_params(spec, derive_seed(seed, "init"))
        pretrain = NNService.train(
            spec, init, suite.pretrain_mixture, training, training.pretrain_epochs,
            derive_seed(seed, "pretrain"), training.batch_size, label="pretrain",
        )
        fine_tuned: Dict[str, ParameterSet] = {}
        task_vectors: Dict[str, TaskVector] = {}
        losses = {"pretrain": pretrain.epoch_losses}
        for split in suite.in_domain_tasks:
            result = NNService.train(
                spec, pretrain.params, split, training, training.finetune_epochs,
                derive_seed(seed, "finetune", split.task_name), training.batch_size, label=split.task_name,
            )
            fine_tuned[split.task_name] = result.params
            task_vectors[split.task_name] = TaskVectorService.compute_task_vector(
                result.params, pretrain.params, source_task=split.task_name
            )
            losses[split.task_name] = result.epoch_losses
        return TrainedModels(
            spec=spec,
            pretrained=pretrain.params,
            fine_tuned=fine_tuned,
            task_vectors=task_vectors,
            training_losses=losses,
        )

    @staticmethod
    def run_benchmark(
        suite: TaskSuite,
        methods: Optional[Sequence[str]],
        cfg: ExperimentConfig,
        seed: int,
        trained: Optional[TrainedModels] = None,
    ) -> BenchmarkResult:
        """
        Evaluate each requested method on every in-domain and out-of-domain test set.

        Ranks are computed per task among the requested merging methods only.
        The individual row evaluates each fine-tuned model on its own task and
        has no out-of-domain entries.
        """
        methods = list(dict.fromkeys(methods if methods is not None else cfg.methods.methods))
        unknown = [m for m in methods if m not in ALL_METHODS]
        if unknown:
            raise ConfigError(f"Unknown method(s): {', '.join(unknown)}")
        if not methods:
            raise ConfigError("No methods requested")

        trained = trained or BenchService.train_models(suite, cfg, seed)
        spec = trained.spec
        names = suite.in_domain_names
        validation = {split.task_name: split.validation for split in suite.in_domain_tasks}
        for task, examples in validation.items():
            if len(examples) == 0:
                raise DataError(f"Task '{task}' has no validation data")
        in_tests = {split.task_name: split.test for split in suite.in_domain_tasks}
        out_tests = {split.task_name: split.test for split in suite.out_of_domain_tasks}
        fine_tuned_list = [trained.fine_tuned[name] for name in names]
        vectors = [trained.task_vectors[name] for name in names]

        result = BenchmarkResult(
            seed=seed, methods=methods, in_domain=[], out_of_domain=[], task_vectors=trained.task_vectors
        )

        def record(method: str, in_acc: Dict[str, Optional[float]], out_acc: Dict[str, Optional[float]]) -> None:
            reference = method in REFERENCE_METHODS
            result.in_domain.append(MethodReport(method=method, accuracies=in_acc, reference=reference))
            result.out_of_domain.append(MethodReport(method=method, accuracies=out_acc, reference=reference))
            logger.info("method %s: in-domain %s", method, {t: round(a, 4) for t, a in in_acc.items() if a is not None})

        for method in methods:
            if method == "individual":
                in_acc = {
                    name: NNService.evaluate(spec, trained.fine_tuned[name], in_tests[name]) for name in names
                }
                record(method, in_acc, {task: None for task in out_tests})
                continue

            if method == "pretrained":
                params = trained.pretrained
            elif method == "multitask":
                union = Examples.concat([split.train for split in suite.in_domain_tasks])
                params = NNService.train(
                    spec, trained.pretrained, union, cfg.training, cfg.training.multitask_epochs,
                    derive_seed(seed, "multitask"), cfg.training.batch_size, label="multitask",
                ).params
            elif method in GRID_METHODS:
                hp = MergeHyperParams.from_methods(cfg.methods, seed)
                lam, curve = MergeService.grid_search_lambda(
                    method, cfg.methods.lambda_grid, trained.pretrained, vectors, validation, spec, hp
                )
                result.curves[method] = curve
                result.lambdas[method] = lam
                params = MergeService.merge(method, trained.pretrained, vectors, hp.model_copy(update={"lam": lam}))
            elif method in ("supermerge", "supermerge_no_tanh"):
                fit_cfg = cfg.supermerge.model_copy(update={"use_tanh": method == "supermerge"})
                fit = SuperMergeService.fit(
                    spec, trained.pretrained, fine_tuned_list, validation, fit_cfg, model_ids=names, label=method
                )
                result.merge_weights[method] = fit.weights
                result.use_tanh[method] = fit_cfg.use_tanh
                params = fit.merged
            else:
                plan = HierarchicalService.plan_from_config(cfg.hierarchical, trained.task_vectors)
                # leaves go through checkpoints so only the running node's children are resident
                with tempfile.TemporaryDirectory(prefix="mergeforge-leaves-") as leaves:
                    leaf_paths = {}
                    for name in names:
                        leaf_paths[name] = Path(leaves) / f"{name}{CHECKPOINT_SUFFIX}"
                        CheckpointService.save_params(trained.fine_tuned[name], leaf_paths[name])
                    run = HierarchicalService.execute(
                        plan, spec, trained.pretrained, leaf_paths, validation, cfg.supermerge,
                        spill_dir=cfg.hierarchical.spill_dir,
                        match_flat_steps=cfg.hierarchical.match_flat_steps,
                    )
                result.plan = plan.to_nested()
                result.node_reports = run.reports
                result.peak_concurrent_models = run.peak_concurrent_models
                result.peak_measurement = CostService.measure_peak_models(
                    run.trace,
                    CostInput(
                        n_para=spec.num_parameters,
                        n_trainable=max(weights.num_trainable for weights in run.weights.values()),
                        n_task_vector=spec.num_parameters,
                        k=1,
                        is_merging=True,
                    ),
                    fan_in_limit=cfg.hierarchical.fan_in_limit,
                )
                params = run.merged

            record(method, _accuracies(spec, params, in_tests), _accuracies(spec, params, out_tests))

        _rank_reports(result.in_domain, names)
        _rank_reports(result.out_of_domain, list(out_tests))
        result.cost_rows = CostService.scenario_rows(cfg.cost, cfg.hierarchical.fan_in_limit)
        return result
