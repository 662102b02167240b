"""
Tests for merge planning and tree-structured execution.
"""

import numpy as np
import pytest

from mergeforge.core.exceptions import DataError, FitError, StructuralError
from mergeforge.models.model_spec import ModelSpec
from mergeforge.models.parameters import TaskVector
from mergeforge.models.plan import MergePlan
from mergeforge.schemas.config import FitConfig, HierarchicalConfig, OptimizerKind
from mergeforge.services.checkpoint_service import CheckpointService
from mergeforge.services.hierarchical_service import HierarchicalService
from mergeforge.services.nn_service import NNService
from mergeforge.services.supermerge_service import SuperMergeService
from mergeforge.utils.rng import derive_seed
from tests.conftest import make_examples, perturbed

FIT = FitConfig(epochs=2, batch_size=8, learning_rate=0.05, seed=3)


def clustered_vectors(spec: ModelSpec, groups, seed: int = 0):
    """Task vectors scattered tightly around one random direction per group."""
    rng = np.random.default_rng(seed)
    n = spec.num_parameters
    sizes = [d.num_elements for d in spec.layer_descriptors]
    vectors = {}
    for names in groups:
        direction = rng.normal(size=n)
        for name in names:
            flat = direction + 0.1 * rng.normal(size=n)
            vectors[name] = TaskVector.from_arrays(spec, np.split(flat, np.cumsum(sizes)[:-1]), source_task=name)
    return vectors


@pytest.fixture
def four_models(pretrained):
    return {f"task_{i:02d}": perturbed(pretrained, 0.1, seed=200 + i) for i in range(4)}


@pytest.fixture
def validation(tanh_spec):
    return {f"task_{i:02d}": make_examples(tanh_spec, 12, seed=60 + i, id_offset=100 * i) for i in range(4)}


class TestPlanning:
    """Test similarity grouping and explicit plans."""

    def test_similar_vectors_share_a_subtree(self, tanh_spec):
        """Two tight clusters of two become the two children of the root."""
        vectors = clustered_vectors(tanh_spec, [("a1", "b2"), ("a2", "b1")])
        plan = HierarchicalService.build_plan_by_similarity(vectors, fan_in_limit=2)
        assert plan.to_nested() == [["a1", "b2"], ["a2", "b1"]]

    def test_sequence_input_uses_source_task(self, tanh_spec):
        vectors = clustered_vectors(tanh_spec, [("x", "y"), ("z", "w")], seed=1)
        plan = HierarchicalService.build_plan_by_similarity(list(vectors.values()), fan_in_limit=2)
        assert sorted(plan.tasks) == ["w", "x", "y", "z"]

    def test_two_models_merge_at_the_root(self, tanh_spec):
        vectors = clustered_vectors(tanh_spec, [("b",), ("a",)])
        plan = HierarchicalService.build_plan_by_similarity(vectors, fan_in_limit=2)
        assert plan.to_nested() == ["a", "b"]

    def test_fan_in_at_k_is_flat(self, tanh_spec):
        vectors = clustered_vectors(tanh_spec, [("a", "b"), ("c", "d")])
        plan = HierarchicalService.build_plan_by_similarity(vectors, fan_in_limit=4)
        assert plan.to_nested() == ["a", "b", "c", "d"]

    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_fan_in_bound_holds(self, tanh_spec, k):
        """Every internal node respects the limit and every model appears once."""
        vectors = clustered_vectors(tanh_spec, [(f"t{i}",) for i in range(k)], seed=k)
        plan = HierarchicalService.build_plan_by_similarity(vectors, fan_in_limit=2)
        assert sorted(plan.tasks) == sorted(vectors)
        assert all(len(node.children) <= 2 for _, node in plan.walk() if not node.is_leaf)

    def test_unnamed_vectors_rejected(self, tanh_spec):
        vectors = list(clustered_vectors(tanh_spec, [("a", "b")]).values())
        unnamed = [TaskVector.from_layers(tv, tv.arrays) for tv in vectors]
        with pytest.raises(StructuralError):
            HierarchicalService.build_plan_by_similarity(unnamed, fan_in_limit=2)

    def test_config_plan_wins(self, tanh_spec):
        vectors = clustered_vectors(tanh_spec, [("a", "b"), ("c", "d")])
        cfg = HierarchicalConfig(fan_in_limit=2, plan=[["a", "c"], ["b", "d"]])
        assert HierarchicalService.plan_from_config(cfg, vectors).to_nested() == [["a", "c"], ["b", "d"]]

    @pytest.mark.parametrize(
        "nested",
        [
            [["a", "b", "c"], "d"],
            [["a", "b"], "a"],
            [["a"], "b"],
            [1, "a"],
        ],
    )
    def test_invalid_nested_plans(self, nested):
        with pytest.raises(StructuralError):
            MergePlan.from_nested(nested, 2)

    def test_plan_must_cover_models(self):
        plan = MergePlan.from_nested(["a", "b"], 2)
        with pytest.raises(StructuralError):
            plan.validate(["a", "b", "c"])

    def test_bottom_up_order(self):
        plan = MergePlan.from_nested([["a", "b"], [["c", "d"], "e"]], 2)
        assert [path for path, _ in plan.internal_nodes_bottom_up()] == ["root/0", "root/1/0", "root/1", "root"]


class TestExecution:
    """Test bottom-up execution with bounded residency."""

    def test_pairwise_plan_holds_three_models(self, tanh_spec, pretrained, four_models, validation):
        """Two children plus their merge are the most ever resident."""
        plan = MergePlan.from_nested([["task_00", "task_01"], ["task_02", "task_03"]], 2)
        result = HierarchicalService.execute(plan, tanh_spec, pretrained, four_models, validation, FIT)
        assert result.peak_concurrent_models == 3
        assert max(event.resident for event in result.trace) == 3
        assert result.trace[-1].resident == 1

    def test_flat_plan_holds_k_plus_one(self, tanh_spec, pretrained, four_models, validation):
        models = {name: four_models[name] for name in ("task_00", "task_01", "task_02")}
        plan = MergePlan.from_nested(list(models), 3)
        result = HierarchicalService.execute(plan, tanh_spec, pretrained, models, validation, FIT)
        assert result.peak_concurrent_models == 4

    def test_flat_plan_equals_flat_fit(self, tanh_spec, pretrained, four_models, validation):
        """A one-node plan is exactly a flat fit over the same models, order and seed."""
        names = ["task_02", "task_00", "task_01"]
        models = {name: four_models[name] for name in names}
        plan = MergePlan.from_nested(names, 3)
        result = HierarchicalService.execute(plan, tanh_spec, pretrained, models, validation, FIT)
        flat = SuperMergeService.fit(
            tanh_spec,
            pretrained,
            [models[name] for name in names],
            {name: validation[name] for name in names},
            FIT,
            model_ids=names,
        )
        assert result.merged.equals(flat.merged)
        assert result.weights["root"].equals(flat.weights)

    def test_reports_and_seeds(self, tanh_spec, pretrained, four_models, validation):
        """Non-root nodes fit with a seed derived from their path; each reads only its own tasks."""
        plan = MergePlan.from_nested([["task_00", "task_01"], ["task_02", "task_03"]], 2)
        result = HierarchicalService.execute(plan, tanh_spec, pretrained, four_models, validation, FIT)
        by_path = {report.path: report for report in result.reports}
        assert [report.path for report in result.reports] == ["root/0", "root/1", "root"]
        assert by_path["root"].seed == FIT.seed
        assert by_path["root/1"].seed == derive_seed(FIT.seed, "root/1")
        assert by_path["root/0"].validation_tasks == ["task_00", "task_01"]
        assert by_path["root/0"].validation_examples == 24
        assert by_path["root"].children == ["root/0", "root/1"]
        assert by_path["root"].validation_examples == 48

    def test_matched_step_budget(self, tanh_spec, pretrained, four_models, validation):
        """Half-size nodes run twice the epochs, so every node takes the flat fit's step count."""
        plan = MergePlan.from_nested([["task_00", "task_01"], ["task_02", "task_03"]], 2)
        plain = HierarchicalService.execute(plan, tanh_spec, pretrained, four_models, validation, FIT)
        matched = HierarchicalService.execute(
            plan, tanh_spec, pretrained, four_models, validation, FIT, match_flat_steps=True
        )
        assert [report.epochs for report in plain.reports] == [FIT.epochs] * 3
        # 48 root examples at batch 8 is 6 steps per epoch; 24 per pair node is 3
        assert [report.epochs for report in matched.reports] == [2 * FIT.epochs, 2 * FIT.epochs, FIT.epochs]

    def test_root_delta_norm(self, tanh_spec, pretrained, four_models, validation):
        plan = MergePlan.from_nested([["task_00", "task_01"], ["task_02", "task_03"]], 2)
        result = HierarchicalService.execute(plan, tanh_spec, pretrained, four_models, validation, FIT)
        expected = np.linalg.norm(result.merged.flatten() - pretrained.flatten())
        assert result.reports[-1].delta_norm == pytest.approx(expected, rel=1e-12)
        assert all(report.delta_norm > 0.0 for report in result.reports)

    def test_spill_and_weight_files(self, tmp_path, tanh_spec, pretrained, four_models, validation):
        plan = MergePlan.from_nested([["task_00", "task_01"], ["task_02", "task_03"]], 2)
        HierarchicalService.execute(
            plan, tanh_spec, pretrained, four_models, validation, FIT,
            spill_dir=tmp_path / "spill", weights_dir=tmp_path / "weights",
        )
        assert sorted(p.name for p in (tmp_path / "spill").glob("*.ckpt")) == ["root-0.ckpt", "root-1.ckpt"]
        assert len(list((tmp_path / "weights").glob("*.ckpt"))) == 3
        weights = CheckpointService.load_merge_weights(tmp_path / "weights" / "weights-root-0.ckpt", tanh_spec)
        assert weights.model_ids == ("task_00", "task_01")

    def test_models_loaded_from_files(self, tmp_path, tanh_spec, pretrained, four_models, validation):
        """Checkpoint paths give the same result as in-memory models."""
        paths = {}
        for name, params in four_models.items():
            paths[name] = tmp_path / f"{name}.ckpt"
            CheckpointService.save_params(params, paths[name])
        plan = MergePlan.from_nested([["task_00", "task_01"], ["task_02", "task_03"]], 2)
        from_memory = HierarchicalService.execute(plan, tanh_spec, pretrained, four_models, validation, FIT)
        from_files = HierarchicalService.execute(plan, tanh_spec, pretrained, paths, validation, FIT)
        assert from_files.merged.equals(from_memory.merged)

    def test_missing_validation(self, tanh_spec, pretrained, four_models, validation):
        plan = MergePlan.from_nested([["task_00", "task_01"], ["task_02", "task_03"]], 2)
        del validation["task_03"]
        with pytest.raises(DataError):
            HierarchicalService.execute(plan, tanh_spec, pretrained, four_models, validation, FIT)

    def test_fit_error_names_node(self, relu_spec):
        """A diverging node fit reports where in the tree it happened."""
        pretrained = NNService.init_params(relu_spec, seed=0)
        models = {f"t{i}": perturbed(pretrained, 0.1, seed=300 + i) for i in range(2)}
        validation = {name: make_examples(relu_spec, 16, seed=70 + i, id_offset=100 * i) for i, name in enumerate(models)}
        cfg = FitConfig(optimizer=OptimizerKind.SGD, learning_rate=1e300, epochs=2, batch_size=8, use_tanh=False)
        plan = MergePlan.from_nested(["t0", "t1"], 2)
        with pytest.raises(FitError) as info:
            HierarchicalService.execute(plan, relu_spec, pretrained, models, validation, cfg)
        assert info.value.node_path == "root"
