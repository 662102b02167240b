import logging
import math
import tempfile
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from mergeforge.core.exceptions import DataError, FitError, StructuralError
from mergeforge.models.dataset import Examples
from mergeforge.models.model_spec import ModelSpec
from mergeforge.models.parameters import IntermediateModel, MergeWeights, ParameterSet, TaskVector
from mergeforge.models.plan import MergePlan, PlanNode
from mergeforge.schemas.config import FitConfig, HierarchicalConfig
from mergeforge.schemas.report import NodeReport, TraceEvent
from mergeforge.services.checkpoint_service import CHECKPOINT_SUFFIX, CheckpointService
from mergeforge.services.supermerge_service import SuperMergeService
from mergeforge.services.task_vector_service import TaskVectorService
from mergeforge.utils.rng import derive_seed

logger = logging.getLogger(__name__)

ModelSource = Union[ParameterSet, str, Path]


@dataclass
class HierarchicalResult:
    merged: ParameterSet
    reports: List[NodeReport]
    peak_concurrent_models: int
    trace: List[TraceEvent] = field(default_factory=list)
    weights: Dict[str, MergeWeights] = field(default_factory=dict)


@dataclass
class _Cluster:
    node: PlanNode
    members: Tuple[str, ...]

    @property
    def key(self) -> Tuple[str, ...]:
        return tuple(sorted(self.members))


class _Residency:
    """Counts full ParameterSets held at once (the pretrained anchor is not counted)."""

    def __init__(self):
        self.resident: Dict[str, ParameterSet] = {}
        self.peak = 0
        self.trace: List[TraceEvent] = []

    def hold(self, node_path: str, action: str, name: str, params: ParameterSet) -> ParameterSet:
        self.resident[name] = params
        self.peak = max(self.peak, len(self.resident))
        self.trace.append(TraceEvent(node_path=node_path, action=action, model=name, resident=len(self.resident)))
        return params

    def release(self, node_path: str, name: str) -> None:
        del self.resident[name]
        self.trace.append(TraceEvent(node_path=node_path, action="release", model=name, resident=len(self.resident)))


def _average_linkage(similarity: Dict[Tuple[str, str], float], members: Sequence[str]) -> float:
    pairs = list(combinations(sorted(members), 2))
    return float(np.mean([similarity[pair] for pair in pairs])) if pairs else 0.0


def _node_file_name(path: str) -> str:
    return path.replace("/", "-") + CHECKPOINT_SUFFIX


def _steps_per_epoch(validation: Mapping[str, Examples], tasks: Sequence[str], batch_size: int) -> int:
    size = sum(len(validation[task]) for task in tasks if task in validation)
    return max(1, math.ceil(size / batch_size))


class HierarchicalService:
    """Tree-structured SuperMerge over a fan-in bounded plan."""

    @staticmethod
    def build_plan_by_similarity(
        task_vectors: Union[Sequence[TaskVector], Mapping[str, TaskVector]],
        fan_in_limit: int,
    ) -> MergePlan:
        """
        Greedy agglomerative plan over cosine similarity of flattened task vectors.

        Each level groups clusters of the level below, up to fan_in_limit per
        group, starting from the most similar pair (average linkage) and
        growing it with the cluster that keeps the group's average similarity
        highest. Equal scores resolve by task-name order. A single leftover
        cluster moves up a level unchanged; once at most fan_in_limit clusters
        remain they become the root's children.
        """
        if fan_in_limit < 2:
            raise StructuralError("fan_in_limit must be at least 2")
        if isinstance(task_vectors, Mapping):
            named = dict(task_vectors)
        else:
            named = {tv.source_task: tv for tv in task_vectors}
            if len(named) != len(task_vectors) or "" in named:
                raise StructuralError("Task vectors need distinct source_task names to be planned")
        if len(named) < 2:
            raise StructuralError("At least two task vectors are needed to build a plan")

        names = sorted(named)
        similarity: Dict[Tuple[str, str], float] = {}
        for a, b in combinations(names, 2):
            similarity[(a, b)] = TaskVectorService.cosine_similarity(named[a], named[b])

        clusters = [_Cluster(node=PlanNode(task=name), members=(name,)) for name in names]
        level = 0
        while len(clusters) > fan_in_limit:
            level += 1
            pool = sorted(clusters, key=lambda c: c.key)
            grouped: List[_Cluster] = []
            while len(pool) >= 2:
                # pool is sorted by member names, so index order is the tie-break order
                best = min(
                    combinations(range(len(pool)), 2),
                    key=lambda ij: (-_average_linkage(similarity, pool[ij[0]].members + pool[ij[1]].members), ij),
                )
                group = [pool[best[0]], pool[best[1]]]
                rest = [c for index, c in enumerate(pool) if index not in best]
                while len(group) < fan_in_limit and rest:
                    members = sum((c.members for c in group), ())
                    scores = [_average_linkage(similarity, members + c.members) for c in rest]
                    top = min(range(len(rest)), key=lambda index: (-scores[index], index))
                    group.append(rest.pop(top))
                group.sort(key=lambda c: c.key)
                grouped.append(_Cluster(
                    node=PlanNode(children=tuple(c.node for c in group)),
                    members=sum((c.members for c in group), ()),
                ))
                pool = rest
            clusters = sorted(grouped + pool, key=lambda c: c.key)
            logger.debug("plan level %d: %s", level, [c.key for c in clusters])

        root = PlanNode(children=tuple(c.node for c in sorted(clusters, key=lambda c: c.key)))
        plan = MergePlan(root=root, fan_in_limit=fan_in_limit)
        plan.validate(names)
        return plan

    @staticmethod
    def plan_from_config(
        cfg: HierarchicalConfig, task_vectors: Mapping[str, TaskVector]
    ) -> MergePlan:
        """An explicit nested-list plan from config wins over similarity grouping."""
        if cfg.plan is not None:
            plan = MergePlan.from_nested(cfg.plan, cfg.fan_in_limit)
            plan.validate(task_vectors.keys())
            return plan
        return HierarchicalService.build_plan_by_similarity(task_vectors, cfg.fan_in_limit)

    @staticmethod
    def execute(
        plan: MergePlan,
        spec: ModelSpec,
        pretrained: ParameterSet,
        fine_tuned: Mapping[str, ModelSource],
        validation: Mapping[str, Examples],
        cfg: FitConfig,
        spill_dir: Optional[Union[str, Path]] = None,
        weights_dir: Optional[Union[str, Path]] = None,
        match_flat_steps: bool = False,
    ) -> HierarchicalResult:
        """
        Run the plan bottom-up, one internal node at a time.

        Leaves are loaded when their parent runs; every non-root result is
        written to `spill_dir` (a temporary directory when unset) and released,
        so at most one node's children plus its merged model are resident.
        Every node merges against the pretrained anchor and reads only the
        validation sets of the tasks it covers. The root fits with cfg.seed;
        other nodes use a seed derived from (cfg.seed, node path).

        With `match_flat_steps` a node whose validation union is smaller than
        the whole plan's runs more epochs, so that every node takes at least
        as many optimizer steps as a flat fit over all tasks would.
        """
        plan.validate(fine_tuned.keys())
        pretrained.check_spec(spec)
        with tempfile.TemporaryDirectory(prefix="mergeforge-spill-") as scratch:
            spill = Path(spill_dir) if spill_dir is not None else Path(scratch)
            return HierarchicalService._run(
                plan, spec, pretrained, fine_tuned, validation, cfg, spill, weights_dir, match_flat_steps
            )

    @staticmethod
    def _run(
        plan: MergePlan,
        spec: ModelSpec,
        pretrained: ParameterSet,
        fine_tuned: Mapping[str, ModelSource],
        validation: Mapping[str, Examples],
        cfg: FitConfig,
        spill: Path,
        weights_dir: Optional[Union[str, Path]],
        match_flat_steps: bool,
    ) -> HierarchicalResult:
        residency = _Residency()
        spilled: Dict[str, Path] = {}
        reports: List[NodeReport] = []
        learned: Dict[str, MergeWeights] = {}
        root_model: Optional[IntermediateModel] = None
        flat_steps = cfg.epochs * _steps_per_epoch(validation, plan.root.covered_tasks, cfg.batch_size)

        for path, node in plan.internal_nodes_bottom_up():
            child_paths = [f"{path}/{index}" for index in range(len(node.children))]
            child_ids: List[str] = []
            for child_path, child in zip(child_paths, node.children):
                if child.is_leaf:
                    source = fine_tuned[child.task]
                    params = source if isinstance(source, ParameterSet) else CheckpointService.load_params(source, spec)
                    residency.hold(path, "load", child.task, params)
                    child_ids.append(child.task)
                else:
                    params = CheckpointService.load_params(spilled.pop(child_path), spec)
                    residency.hold(path, "load", child_path, params)
                    child_ids.append(child_path)

            covered = node.covered_tasks
            missing = [task for task in covered if task not in validation]
            if missing:
                raise DataError(f"Node '{path}' has no validation data for {missing}")
            node_validation = {task: validation[task] for task in covered}
            seed = cfg.seed if node is plan.root else derive_seed(cfg.seed, path)
            node_cfg = cfg
            if match_flat_steps:
                epochs = max(cfg.epochs, math.ceil(flat_steps / _steps_per_epoch(validation, covered, cfg.batch_size)))
                node_cfg = cfg.model_copy(update={"epochs": epochs})

            try:
                result = SuperMergeService.fit(
                    spec,
                    pretrained,
                    [residency.resident[child_id] for child_id in child_ids],
                    node_validation,
                    node_cfg,
                    model_ids=child_ids,
                    seed=seed,
                    label=path,
                )
            except FitError as exc:
                raise exc.at_node(path) from exc

            residency.hold(path, "materialize", path, result.merged)
            for child_id in child_ids:
                residency.release(path, child_id)

            intermediate = IntermediateModel(
                params=result.merged,
                covered_tasks=frozenset(covered),
                derived_task_vector=TaskVectorService.compute_task_vector(result.merged, pretrained, path),
            )
            learned[path] = result.weights

            weights_path = None
            if weights_dir is not None:
                weights_path = Path(weights_dir) / f"weights-{_node_file_name(path)}"
                CheckpointService.save_merge_weights(result.weights, weights_path, spec)

            reports.append(NodeReport(
                path=path,
                tasks=list(covered),
                children=child_ids,
                seed=seed,
                epochs=node_cfg.epochs,
                final_loss=result.final_loss,
                validation_examples=sum(len(examples) for examples in node_validation.values()),
                validation_tasks=list(node_validation),
                delta_norm=float(np.linalg.norm(intermediate.derived_task_vector.flatten())),
                weights_path=None if weights_path is None else weights_path.as_posix(),
            ))
            logger.info("node %s merged %s (final loss %.6f)", path, child_ids, result.final_loss)

            if node is plan.root:
                root_model = intermediate
            else:
                spill_path = spill / _node_file_name(path)
                CheckpointService.save_params(intermediate.params, spill_path)
                spilled[path] = spill_path
                residency.release(path, path)

        if root_model is None:
            raise StructuralError("Plan has no root merge")
        return HierarchicalResult(
            merged=root_model.params,
            reports=reports,
            peak_concurrent_models=residency.peak,
            trace=residency.trace,
            weights=learned,
        )
