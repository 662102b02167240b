"""
Tests for the task suite, the benchmark protocol and the report files.
"""

import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from mergeforge.core.exceptions import ConfigError
from mergeforge.schemas.config import ExperimentConfig, SuiteConfig
from mergeforge.schemas.cost import CostInput
from mergeforge.services.bench_service import BenchService
from mergeforge.services.checkpoint_service import CHECKPOINT_SUFFIX, CheckpointService
from mergeforge.services.cost_service import CostService
from mergeforge.services.report_service import ReportService
from mergeforge.services.suite_service import ID_STRIDE, SuiteService
from mergeforge.utils.ranking import competition_ranks
from tests.conftest import TOY_SEED

FAST_METHODS = ["pretrained", "individual", "task_arithmetic", "ties", "supermerge", "hierarchical"]


@pytest.fixture(scope="module")
def toy_result(toy_suite, toy_config, toy_trained):
    return BenchService.run_benchmark(toy_suite, FAST_METHODS, toy_config, TOY_SEED, trained=toy_trained)


class TestSuite:
    """Test synthetic task generation."""

    def test_suite_shape(self, toy_suite, toy_config):
        assert toy_suite.in_domain_names == ["task_00", "task_01", "task_02"]
        assert toy_suite.out_of_domain_names == ["ood_00"]
        for split in toy_suite.tasks.values():
            assert split.input_dim == toy_config.suite.input_dim
            assert (len(split.train), len(split.validation), len(split.test)) == (150, 24, 90)
        assert len(toy_suite.pretrain_mixture.train) == 300

    def test_ids_are_unique_across_tasks(self, toy_suite):
        """Each task owns its own id block."""
        for slot, split in enumerate(toy_suite.in_domain_tasks, start=1):
            ids = np.concatenate([split.train.ids, split.validation.ids, split.test.ids])
            assert ids.min() >= slot * ID_STRIDE
            assert ids.max() < (slot + 1) * ID_STRIDE

    def test_suite_is_deterministic(self, toy_config, toy_suite):
        again = SuiteService.generate_suite(toy_config.suite, TOY_SEED)
        assert again.fingerprint() == toy_suite.fingerprint()
        other = SuiteService.generate_suite(toy_config.suite, TOY_SEED + 1)
        assert other.fingerprint() != toy_suite.fingerprint()

    def test_carved_validation(self):
        cfg = SuiteConfig(k_in=2, k_out=0, n_train=50, n_test=10, n_pretrain=20, validation_fraction=0.2)
        suite = SuiteService.generate_suite(cfg, 0)
        split = suite.in_domain_tasks[0]
        assert (len(split.train), len(split.validation)) == (40, 10)

    def test_single_task_suite_rejected(self):
        with pytest.raises(ValidationError):
            SuiteConfig(k_in=1)


class TestBenchmark:
    """Test method evaluation and ranking on the toy suite."""

    def test_fine_tuning_helps(self, toy_trained, toy_suite, toy_result):
        """Each fine-tuned model beats the pretrained anchor on its own task."""
        individual = toy_result.report("individual")
        pretrained = toy_result.report("pretrained")
        for task in toy_suite.in_domain_names:
            assert individual.accuracies[task] > pretrained.accuracies[task]

    def test_reference_rows_are_unranked(self, toy_result):
        for method in ("pretrained", "individual"):
            report = toy_result.report(method)
            assert report.ranks == {}
            assert report.average_rank is None
        ood = toy_result.report("individual", out_of_domain=True)
        assert ood.accuracies == {"ood_00": None}
        assert ood.average_accuracy is None

    def test_ranks_follow_accuracy(self, toy_suite, toy_result):
        """Competition ranks among merging methods, recomputed from the accuracies."""
        merging = [r for r in toy_result.in_domain if not r.reference]
        assert [r.method for r in merging] == ["task_arithmetic", "ties", "supermerge", "hierarchical"]
        for task in toy_suite.in_domain_names:
            expected = competition_ranks({r.method: r.accuracies[task] for r in merging})
            assert {r.method: r.ranks[task] for r in merging} == expected
            assert min(expected.values()) == 1
        for report in merging:
            assert report.average_rank == pytest.approx(np.mean(list(report.ranks.values())))

    def test_single_method_ranks_first(self, toy_suite, toy_config, toy_trained):
        result = BenchService.run_benchmark(
            toy_suite, ["task_arithmetic"], toy_config, TOY_SEED, trained=toy_trained
        )
        report = result.report("task_arithmetic")
        assert set(report.ranks.values()) == {1}
        assert report.average_rank == 1.0
        assert result.report("task_arithmetic", out_of_domain=True).ranks == {"ood_00": 1}

    def test_grid_and_hierarchical_details(self, toy_result, toy_config, toy_trained):
        assert set(toy_result.lambdas) == {"task_arithmetic", "ties"}
        assert all(lam in toy_config.methods.lambda_grid for lam in toy_result.lambdas.values())
        assert len(toy_result.curves["ties"]) == len(toy_config.methods.lambda_grid)
        assert toy_result.peak_concurrent_models == 3
        assert toy_result.peak_measurement.modeled_k == 2
        assert len(toy_result.node_reports) == 2
        assert toy_result.node_reports[-1].path == "root"
        weights = toy_result.merge_weights["supermerge"]
        assert weights.w.shape == (3, toy_trained.spec.num_layers)
        assert weights.num_trainable == 3 * toy_trained.spec.num_layers
        spec = toy_trained.spec
        pair_fit = CostInput(
            n_para=spec.num_parameters, n_trainable=2 * spec.num_layers, n_task_vector=spec.num_parameters,
            k=2, is_merging=True,
        )
        assert toy_result.peak_measurement.modeled_bytes == CostService.peak_memory_bytes(pair_fit)

    def test_hierarchical_nodes_get_flat_step_budget(self, toy_result, toy_config):
        """The two-task node sees a smaller validation union and runs more epochs than the root."""
        pair, root = toy_result.node_reports
        batch = toy_config.supermerge.batch_size
        flat_steps = toy_config.supermerge.epochs * -(-root.validation_examples // batch)
        assert root.epochs == toy_config.supermerge.epochs
        assert pair.epochs * -(-pair.validation_examples // batch) >= flat_steps
        assert pair.epochs > root.epochs
        assert pair.delta_norm > 0.0 and root.delta_norm > 0.0

    def test_hierarchical_leaves_are_loaded_from_checkpoints(self, monkeypatch, toy_suite, toy_config, toy_trained):
        """Fine-tuned leaves are read from disk when their node runs, one load per leaf and spilled node."""
        loaded = []
        load_params = CheckpointService.load_params

        def counting_load(path, spec):
            loaded.append(Path(path).name)
            return load_params(path, spec)

        monkeypatch.setattr(CheckpointService, "load_params", staticmethod(counting_load))
        result = BenchService.run_benchmark(
            toy_suite, ["hierarchical"], toy_config, TOY_SEED, trained=toy_trained
        )
        leaves = [name for name in loaded if name.startswith("task_")]
        assert sorted(leaves) == sorted(f"{task}{CHECKPOINT_SUFFIX}" for task in toy_suite.in_domain_names)
        assert len(loaded) == len(toy_suite.in_domain_names) + 1
        assert result.peak_concurrent_models == 3

    @pytest.mark.parametrize("methods", [["average_merge"], []])
    def test_bad_method_lists(self, toy_suite, toy_config, toy_trained, methods):
        with pytest.raises(ConfigError):
            BenchService.run_benchmark(toy_suite, methods, toy_config, TOY_SEED, trained=toy_trained)


class TestReports:
    """Test the exported report files."""

    def test_report_files(self, tmp_path, toy_suite, toy_result):
        written = ReportService.export_reports(toy_result, toy_suite, tmp_path)
        names = sorted(path.name for path in written)
        assert names == sorted([
            "header.md",
            "methods_in_domain.csv",
            "methods_in_domain.md",
            "methods_out_of_domain.csv",
            "methods_out_of_domain.md",
            "lambda_sweep_task_arithmetic.csv",
            "lambda_sweep_ties.csv",
            "task_vector_stats_task_00.csv",
            "task_vector_stats_task_01.csv",
            "task_vector_stats_task_02.csv",
            "merge_weights_supermerge.csv",
            "hierarchical_nodes.json",
            "cost.csv",
            "cost.md",
        ])

        lines = (tmp_path / "methods_in_domain.csv").read_text().splitlines()
        assert lines[0].split(",") == [
            "method",
            "task_00_accuracy", "task_00_rank",
            "task_01_accuracy", "task_01_rank",
            "task_02_accuracy", "task_02_rank",
            "average_accuracy", "average_rank",
        ]
        assert len(lines) == 1 + len(FAST_METHODS)

        nodes = json.loads((tmp_path / "hierarchical_nodes.json").read_text())
        assert nodes["peak_concurrent_models"] == 3
        assert len(nodes["nodes"]) == 2
        assert len((tmp_path / "cost.csv").read_text().splitlines()) == 5
        assert f"seed: {TOY_SEED}" in (tmp_path / "header.md").read_text()

    def test_markdown_cells(self, toy_result, toy_suite):
        table = ReportService.method_table_markdown(toy_result.in_domain, toy_suite.in_domain_names)
        pretrained_row = next(line for line in table.splitlines() if line.startswith("| pretrained "))
        cells = [cell.strip() for cell in pretrained_row.split("|")[2:-1]]
        assert len(cells) == 4
        assert all(cell.startswith("(") for cell in cells)

    def test_reports_are_reproducible(self, tmp_path, toy_suite, toy_config, toy_trained, toy_result):
        """Two runs with one seed write byte-identical files."""
        again = BenchService.run_benchmark(toy_suite, FAST_METHODS, toy_config, TOY_SEED, trained=toy_trained)
        first = ReportService.export_reports(toy_result, toy_suite, tmp_path / "a")
        second = ReportService.export_reports(again, toy_suite, tmp_path / "b")
        for a, b in zip(first, second):
            assert a.name == b.name
            assert a.read_bytes() == b.read_bytes()


@pytest.mark.slow
class TestFullBenchmark:
    """End-to-end run at the default suite size and seed 0."""

    GRID = ("task_arithmetic", "ties", "dare_ta", "dare_ties")

    @pytest.fixture(scope="class")
    def full(self):
        cfg = ExperimentConfig()
        suite = SuiteService.generate_suite(cfg.suite, 0)
        methods = ["pretrained", "individual", *self.GRID, "supermerge", "supermerge_no_tanh", "hierarchical"]
        return BenchService.run_benchmark(suite, methods, cfg, 0)

    def test_fine_tuned_models_are_strong(self, full):
        individual = full.report("individual").average_accuracy
        assert individual >= 0.8
        assert full.report("pretrained").average_accuracy <= individual - 0.1

    def test_supermerge_beats_grid_baselines(self, full):
        """Learned weights match or beat every lambda-tuned baseline on mean in-domain accuracy."""
        supermerge = full.report("supermerge").average_accuracy
        assert supermerge >= max(full.report(method).average_accuracy for method in self.GRID)

    def test_tanh_gate_does_not_hurt(self, full):
        assert full.report("supermerge").average_accuracy >= full.report("supermerge_no_tanh").average_accuracy

    def test_hierarchical_tracks_flat(self, full):
        """Pairwise merging stays within three points of the flat fit."""
        gap = full.report("supermerge").average_accuracy - full.report("hierarchical").average_accuracy
        assert abs(gap) <= 0.03

    def test_pairwise_hierarchy_peak(self, full):
        """Three models resident at once, against k + 1 for a flat merge."""
        assert full.peak_concurrent_models == 3
        assert full.peak_concurrent_models < len(full.task_vectors) + 1

    def test_dare_lambda_sweep_peaks_inside_the_grid(self, full):
        """Validation accuracy of DARE + Task Arithmetic falls off on both sides of the chosen lambda."""
        curve = full.curves["dare_ta"]
        scores = [point.mean_accuracy for point in curve]
        best = scores.index(max(scores))
        assert 0 < best < len(scores) - 1
        assert scores[best] > scores[0]
        assert scores[best] > scores[-1]
        assert full.lambdas["dare_ta"] == curve[best].lam
