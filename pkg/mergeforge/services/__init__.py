"""
Services package initialization.

One service class per concern: the reference network, checkpoints, task
vectors, the non-gradient mergers, learned merging, hierarchical merging,
the cost model, and the benchmark suite, driver and reports.
"""

from mergeforge.services.nn_service import NNService, Network
from mergeforge.services.optimizer import Optimizer, OptimizerState
from mergeforge.services.checkpoint_service import CheckpointService
from mergeforge.services.task_vector_service import TaskVectorService
from mergeforge.services.merge_service import MergeService
from mergeforge.services.supermerge_service import SuperMergeService, MergeObjective, FitResult
from mergeforge.services.hierarchical_service import HierarchicalService, HierarchicalResult
from mergeforge.services.cost_service import CostService
from mergeforge.services.suite_service import SuiteService, TaskSuite
from mergeforge.services.bench_service import BenchService, BenchmarkResult, TrainedModels
from mergeforge.services.report_service import ReportService

__all__ = [
    "NNService",
    "Network",
    "Optimizer",
    "OptimizerState",
    "CheckpointService",
    "TaskVectorService",
    "MergeService",
    "SuperMergeService",
    "MergeObjective",
    "FitResult",
    "HierarchicalService",
    "HierarchicalResult",
    "CostService",
    "SuiteService",
    "TaskSuite",
    "BenchService",
    "BenchmarkResult",
    "TrainedModels",
    "ReportService",
]
