import json
import logging
from pathlib import Path
from typing import List, Sequence, Union

from mergeforge.core.exceptions import ConfigError
from mergeforge.schemas.report import MethodReport
from mergeforge.services.bench_service import BenchmarkResult
from mergeforge.services.cost_service import CostService
from mergeforge.services.merge_service import MergeService
from mergeforge.services.suite_service import TaskSuite
from mergeforge.services.supermerge_service import SuperMergeService
from mergeforge.services.task_vector_service import TaskVectorService
from mergeforge.utils.tables import TableFormatter

logger = logging.getLogger(__name__)

OOD_PROTOCOL = (
    "Out-of-domain tasks share the input space and class count of the merged tasks, "
    "so every merged model is evaluated with its own head and no head surgery. "
    "They are never used for fine-tuning, lambda selection or merge-weight fitting."
)


def _method_rows(reports: Sequence[MethodReport], tasks: Sequence[str], markdown: bool) -> List[list]:
    rows = []
    for report in reports:
        if markdown:
            cells = [TableFormatter.rank_cell(report.ranks.get(task), report.accuracies.get(task)) for task in tasks]
            cells.append(TableFormatter.rank_cell(report.average_rank, report.average_accuracy))
        else:
            cells = []
            for task in tasks:
                cells.append(TableFormatter.number(report.accuracies.get(task), 4))
                cells.append(report.ranks.get(task, ""))
            cells.append(TableFormatter.number(report.average_accuracy, 4))
            cells.append(TableFormatter.number(report.average_rank, 3))
        rows.append([report.method] + cells)
    return rows


class ReportService:
    """Writes benchmark results as CSV, Markdown and JSON files."""

    @staticmethod
    def method_table_csv(reports: Sequence[MethodReport], tasks: Sequence[str]) -> str:
        headers = ["method"]
        for task in tasks:
            headers += [f"{task}_accuracy", f"{task}_rank"]
        headers += ["average_accuracy", "average_rank"]
        return TableFormatter.csv_text(headers, _method_rows(reports, tasks, markdown=False))

    @staticmethod
    def method_table_markdown(reports: Sequence[MethodReport], tasks: Sequence[str]) -> str:
        """Cells read 'rank (accuracy %)'; reference rows show accuracy only."""
        headers = ["method", *tasks, "average"]
        return TableFormatter.markdown(headers, _method_rows(reports, tasks, markdown=True))

    @staticmethod
    def header_markdown(result: BenchmarkResult, suite: TaskSuite) -> str:
        lines = [
            "# Merging benchmark",
            "",
            f"- seed: {result.seed}",
            f"- suite fingerprint: {suite.fingerprint()}",
            f"- in-domain tasks: {', '.join(suite.in_domain_names)}",
            f"- out-of-domain tasks: {', '.join(suite.out_of_domain_names) or '(none)'}",
            f"- methods: {', '.join(result.methods)}",
        ]
        for method, lam in result.lambdas.items():
            lines.append(f"- {method} lambda: {lam:.3f}")
        if result.peak_concurrent_models is not None:
            lines.append(f"- hierarchical peak concurrent models: {result.peak_concurrent_models}")
        lines += [
            "",
            "Ranks use competition ranking over the merging methods; "
            "pretrained, individual and multitask rows are not ranked.",
            "",
            "## Out-of-domain protocol",
            "",
            OOD_PROTOCOL,
            "",
        ]
        return "\n".join(lines)

    @staticmethod
    def export_reports(
        result: BenchmarkResult, suite: TaskSuite, out_dir: Union[str, Path]
    ) -> List[Path]:
        """
        Write every report file of a benchmark run into out_dir and return their paths.

        Output carries no timestamps and every float has a fixed format, so
        identical results give identical bytes.
        """
        out = Path(out_dir)
        files = {
            "header.md": ReportService.header_markdown(result, suite),
            "methods_in_domain.csv": ReportService.method_table_csv(result.in_domain, suite.in_domain_names),
            "methods_in_domain.md": ReportService.method_table_markdown(result.in_domain, suite.in_domain_names),
            "cost.csv": CostService.rows_to_csv(result.cost_rows),
            "cost.md": CostService.rows_to_markdown(result.cost_rows),
        }
        if suite.out_of_domain_names:
            ood = suite.out_of_domain_names
            files["methods_out_of_domain.csv"] = ReportService.method_table_csv(result.out_of_domain, ood)
            files["methods_out_of_domain.md"] = ReportService.method_table_markdown(result.out_of_domain, ood)
        for method, curve in result.curves.items():
            files[f"lambda_sweep_{method}.csv"] = MergeService.curve_to_csv(curve)
        for task, task_vector in result.task_vectors.items():
            files[f"task_vector_stats_{task}.csv"] = TaskVectorService.stats_to_csv(
                TaskVectorService.layer_stats(task_vector)
            )
        for method, weights in result.merge_weights.items():
            files[f"merge_weights_{method}.csv"] = SuperMergeService.weights_to_csv(
                weights, result.use_tanh.get(method, True)
            )
        if result.node_reports:
            payload = {
                "plan": result.plan,
                "peak_concurrent_models": result.peak_concurrent_models,
                "peak_measurement": (
                    None if result.peak_measurement is None else result.peak_measurement.model_dump(mode="json")
                ),
                "nodes": [report.model_dump(mode="json") for report in result.node_reports],
            }
            files["hierarchical_nodes.json"] = json.dumps(payload, indent=2, sort_keys=True) + "\n"

        written = []
        try:
            out.mkdir(parents=True, exist_ok=True)
            for name, text in files.items():
                path = out / name
                path.write_text(text, encoding="utf-8")
                written.append(path)
        except OSError as exc:
            raise ConfigError(f"Cannot write reports to {out}: {exc}") from exc
        logger.info("wrote %d report files to %s", len(written), out)
        return written
