"""
Command-line interface.

    mergeforge train  --out runs/demo --seed 0
    mergeforge merge  --run-dir runs/demo --method ties --out merged.ckpt
    mergeforge eval   --run-dir runs/demo --model merged.ckpt
    mergeforge bench  --seed 0 --out reports/
    mergeforge cost   --n-para 2850000000 --n-trainable 2112 --k 11 --merging
    mergeforge serve

Exit codes: 0 success, 2 configuration or data errors, 3 numeric failures.
"""

import functools
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
from pydantic import ValidationError

from mergeforge.core.config import settings
from mergeforge.core.exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    FitError,
    NumericError,
    StructuralError,
    TrainingError,
)
from mergeforge.core.logging import configure_logging
from mergeforge.models.dataset import DatasetSplit, Examples
from mergeforge.models.model_spec import ModelSpec
from mergeforge.models.parameters import ParameterSet
from mergeforge.schemas.config import ExperimentConfig, MergeHyperParams
from mergeforge.schemas.cost import CostInput, FlopsMode
from mergeforge.services.bench_service import BenchService
from mergeforge.services.checkpoint_service import CHECKPOINT_SUFFIX, CheckpointService
from mergeforge.services.cost_service import CostService
from mergeforge.services.hierarchical_service import HierarchicalService
from mergeforge.services.merge_service import GRID_METHODS, MergeService
from mergeforge.services.nn_service import NNService
from mergeforge.services.report_service import ReportService
from mergeforge.services.suite_service import PRETRAIN_TASK, SuiteService
from mergeforge.services.supermerge_service import SuperMergeService
from mergeforge.services.task_vector_service import TaskVectorService
from mergeforge.utils.tables import TableFormatter

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

MERGE_METHODS = GRID_METHODS + ("supermerge", "supermerge_no_tanh", "hierarchical")


def handle_errors(command):
    """Translate domain errors into exit codes."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ConfigError, DataError, StructuralError, CheckpointError, ValidationError) as exc:
            click.echo(f"❌ {type(exc).__name__}: {exc}", err=True)
            raise SystemExit(EXIT_CONFIG)
        except (NumericError, TrainingError, FitError) as exc:
            click.echo(f"❌ {type(exc).__name__}: {exc}", err=True)
            raise SystemExit(EXIT_NUMERIC)

    return wrapper


def _load_config(ctx: click.Context, extra: Sequence[str] = ()) -> ExperimentConfig:
    path = ctx.obj["config"] or settings.DEFAULT_CONFIG_PATH
    return ExperimentConfig.load(path, [*ctx.obj["overrides"], *extra])


class RunDirectory:
    """Layout of a `train` output directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "run.json"

    def checkpoint(self, task: str) -> Path:
        return self.root / "checkpoints" / f"{task}{CHECKPOINT_SUFFIX}"

    def task_vector(self, task: str) -> Path:
        return self.root / "task_vectors" / f"{task}{CHECKPOINT_SUFFIX}"

    def dataset(self, task: str) -> Path:
        return self.root / "data" / task

    def manifest(self) -> Dict[str, Any]:
        if not self.manifest_path.is_file():
            raise DataError(f"{self.root} is not a training run (no run.json)")
        try:
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{self.manifest_path} is corrupt: {exc}") from exc

    def spec(self) -> ModelSpec:
        try:
            return ModelSpec.model_validate(self.manifest()["spec"])
        except (KeyError, ValidationError) as exc:
            raise DataError(f"{self.manifest_path} holds no valid model spec") from exc

    def load_split(self, task: str, seed: int) -> DatasetSplit:
        return CheckpointService.load_dataset(self.dataset(task), seed=seed)


def _parse_models(pairs: Sequence[str], run: RunDirectory, default_tasks: Sequence[str]) -> Dict[str, Path]:
    if not pairs:
        return {task: run.checkpoint(task) for task in default_tasks}
    models: Dict[str, Path] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--model expects NAME=PATH, got '{pair}'")
        name, path = pair.split("=", 1)
        if name in models:
            raise ConfigError(f"Model '{name}' given twice")
        models[name] = Path(path)
    return models


@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Experiment config (JSON)')
@click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE',
              help='Override one config value; repeatable')
@click.option('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR')
@click.pass_context
def cli(ctx, config_path, overrides, log_level):
    """mergeforge: train, merge, evaluate and benchmark model merging."""
    configure_logging(log_level)
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path
    ctx.obj["overrides"] = list(overrides)


@cli.command()
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='Run directory')
@click.option('--seed', type=int, default=None, help='Master seed (defaults to the config seed)')
@click.pass_context
@handle_errors
def train(ctx, out_dir, seed):
    """Generate the task suite, pretrain, and fine-tune one model per task."""
    cfg = _load_config(ctx)
    seed = cfg.seed if seed is None else seed
    run = RunDirectory(Path(out_dir))
    click.echo(f"🛠️  Training suite with seed {seed} into {run.root}")

    suite = SuiteService.generate_suite(cfg.suite, seed)
    trained = BenchService.train_models(suite, cfg, seed)

    for split in [suite.pretrain_mixture, *suite.in_domain_tasks, *suite.out_of_domain_tasks]:
        CheckpointService.save_dataset(split, run.dataset(split.task_name))
    CheckpointService.save_params(trained.pretrained, run.checkpoint(PRETRAIN_TASK))
    for task, params in trained.fine_tuned.items():
        CheckpointService.save_params(params, run.checkpoint(task))
        CheckpointService.save_task_vector(trained.task_vectors[task], run.task_vector(task))

    manifest = {
        "seed": seed,
        "in_domain": suite.in_domain_names,
        "out_of_domain": suite.out_of_domain_names,
        "suite_fingerprint": suite.fingerprint(),
        "spec": trained.spec.model_dump(mode="json"),
    }
    run.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (run.root / "config.json").write_text(cfg.dump(), encoding="utf-8")

    for split in suite.in_domain_tasks:
        accuracy = NNService.evaluate(trained.spec, trained.fine_tuned[split.task_name], split.test)
        click.echo(f"  {split.task_name}: test accuracy {accuracy:.4f}")
    click.echo("✅ Training run saved")


@cli.command()
@click.option('--run-dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--method', required=True, type=click.Choice(MERGE_METHODS))
@click.option('--model', 'model_pairs', multiple=True, metavar='NAME=PATH',
              help='Fine-tuned checkpoint; repeatable (default: every in-domain model of the run)')
@click.option('--lam', type=float, default=None, help='Fixed lambda; grid-searched on validation when omitted')
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False))
@click.option('--weights-out', type=click.Path(), default=None,
              help='Where to store learned merge weights (file for flat, directory for hierarchical)')
@click.pass_context
@handle_errors
def merge(ctx, run_dir, method, model_pairs, lam, out_path, weights_out):
    """Merge fine-tuned checkpoints into one model."""
    cfg = _load_config(ctx)
    run = RunDirectory(Path(run_dir))
    manifest = run.manifest()
    spec = run.spec()
    seed = manifest.get("seed", cfg.seed)
    pretrained = CheckpointService.load_params(run.checkpoint(PRETRAIN_TASK), spec)
    models = _parse_models(model_pairs, run, manifest.get("in_domain", []))
    if len(models) < 1:
        raise ConfigError("No models to merge")

    def validation() -> Dict[str, Examples]:
        return {name: run.load_split(name, seed).validation for name in models}

    click.echo(f"🔀 Merging {len(models)} models with {method}")
    if method == "hierarchical":
        task_vectors = {
            name: TaskVectorService.compute_task_vector(CheckpointService.load_params(path, spec), pretrained, name)
            for name, path in models.items()
        }
        plan = HierarchicalService.plan_from_config(cfg.hierarchical, task_vectors)
        result = HierarchicalService.execute(
            plan, spec, pretrained, models, validation(), cfg.supermerge,
            spill_dir=cfg.hierarchical.spill_dir, weights_dir=weights_out,
            match_flat_steps=cfg.hierarchical.match_flat_steps,
        )
        merged = result.merged
        click.echo(f"  plan: {json.dumps(plan.to_nested())}")
        click.echo(f"  peak concurrent models: {result.peak_concurrent_models}")
    else:
        fine_tuned: List[ParameterSet] = [CheckpointService.load_params(path, spec) for path in models.values()]
        if method in GRID_METHODS:
            task_vectors = [
                TaskVectorService.compute_task_vector(params, pretrained, name)
                for name, params in zip(models, fine_tuned)
            ]
            hp = MergeHyperParams.from_methods(cfg.methods, seed)
            if lam is None:
                lam, _ = MergeService.grid_search_lambda(
                    method, cfg.methods.lambda_grid, pretrained, task_vectors, validation(), spec, hp
                )
            merged = MergeService.merge(method, pretrained, task_vectors, hp.model_copy(update={"lam": lam}))
            click.echo(f"  lambda: {lam:.3f}")
        else:
            fit_cfg = cfg.supermerge.model_copy(update={"use_tanh": method == "supermerge"})
            fit = SuperMergeService.fit(
                spec, pretrained, fine_tuned, validation(), fit_cfg, model_ids=list(models), label=method
            )
            merged = fit.merged
            if weights_out is not None:
                CheckpointService.save_merge_weights(fit.weights, weights_out, spec)
            click.echo(f"  final validation loss: {fit.final_loss:.6f}")

    CheckpointService.save_params(merged, out_path)
    click.echo(f"✅ Merged model written to {out_path}")


@cli.command(name="eval")
@click.option('--run-dir', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--model', 'model_path', type=click.Path(dir_okay=False), default=None,
              help='Checkpoint to evaluate (default: the pretrained model)')
@click.option('--tasks', default=None, help='Comma-separated task names (default: every task of the run)')
@click.option('--split', type=click.Choice(["test", "validation"]), default="test")
@click.pass_context
@handle_errors
def evaluate(ctx, run_dir, model_path, tasks, split):
    """Evaluate one checkpoint on a set of tasks."""
    run = RunDirectory(Path(run_dir))
    manifest = run.manifest()
    spec = run.spec()
    params = CheckpointService.load_params(model_path or run.checkpoint(PRETRAIN_TASK), spec)
    names = (
        [name.strip() for name in tasks.split(",") if name.strip()]
        if tasks else manifest.get("in_domain", []) + manifest.get("out_of_domain", [])
    )
    if not names:
        raise ConfigError("No tasks to evaluate")

    rows = []
    for name in names:
        examples = getattr(run.load_split(name, manifest.get("seed", 0)), split)
        rows.append([name, f"{NNService.evaluate(spec, params, examples):.4f}"])
    click.echo(TableFormatter.markdown(["task", f"{split}_accuracy"], rows), nl=False)


@cli.command()
@click.option('--seed', type=int, required=True, help='Master seed')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
              help='Report directory (default: <ARTIFACT_DIR>/bench-<seed>)')
@click.option('--methods', default=None, help='Comma-separated methods (default: the config list)')
@click.pass_context
@handle_errors
def bench(ctx, seed, out_dir, methods):
    """Run the full protocol and write every report."""
    cfg = _load_config(ctx)
    method_list = [m.strip() for m in methods.split(",") if m.strip()] if methods else None
    out = Path(out_dir) if out_dir else Path(settings.ARTIFACT_DIR) / f"bench-{seed}"
    click.echo(f"🧪 Benchmark with seed {seed}")

    suite = SuiteService.generate_suite(cfg.suite, seed)
    result = BenchService.run_benchmark(suite, method_list, cfg, seed)
    written = ReportService.export_reports(result, suite, out)

    click.echo(ReportService.method_table_markdown(result.in_domain, suite.in_domain_names), nl=False)
    click.echo(f"✅ {len(written)} report files written to {out}")


@cli.command()
@click.option('--n-para', type=int, default=None, help='Total parameters (omit for the scenario table)')
@click.option('--n-trainable', type=int, default=0)
@click.option('--n-task-vector', type=int, default=None, help='Entries of one task vector (default: n-para)')
@click.option('--k', type=int, default=1, help='Number of merged tasks')
@click.option('--merging/--no-merging', default=False)
@click.option('--samples', type=int, default=0)
@click.option('--mode', type=click.Choice([m.value for m in FlopsMode]), default=FlopsMode.TRAINING.value)
@click.option('--fan-in', type=int, default=None, help='Hierarchical fan-in for the scenario table')
@click.pass_context
@handle_errors
def cost(ctx, n_para, n_trainable, n_task_vector, k, merging, samples, mode, fan_in):
    """Peak memory and FLOPs per epoch."""
    cfg = _load_config(ctx)
    if n_para is None:
        rows = CostService.scenario_rows(cfg.cost, fan_in or cfg.hierarchical.fan_in_limit)
        click.echo(CostService.rows_to_markdown(rows), nl=False)
        return

    cost_input = CostInput(
        n_para=n_para,
        n_trainable=n_trainable,
        n_task_vector=n_para if n_task_vector is None else n_task_vector,
        k=k,
        is_merging=merging,
        n_samples=samples,
        flops_fwd_coeff=cfg.cost.flops_fwd_coeff,
        flops_train_coeff=cfg.cost.flops_train_coeff,
        flops_merge_backward_coeff=cfg.cost.flops_merge_backward_coeff,
        flops_scale=cfg.cost.flops_scale,
    )
    memory = CostService.breakdown(cost_input)
    click.echo(f"peak memory: {memory.total_bytes} bytes ({CostService.format_bytes(memory.total_bytes)})")
    click.echo(f"  weights {memory.weights}, gradients {memory.gradients}, "
               f"optimizer states {memory.optimizer_states}, task vectors {memory.task_vectors}")
    click.echo(f"flops per epoch ({mode}): {CostService.flops_per_epoch(cost_input, mode):.3e}")


@cli.command()
@click.option('--host', default='127.0.0.1', help='Host to bind to')
@click.option('--port', default=8000, help='Port to bind to')
@click.option('--reload/--no-reload', default=False, help='Enable auto-reload')
def serve(host, port, reload):
    """Start the inspection API."""
    import uvicorn

    click.echo(f"🚀 Starting server at http://{host}:{port}")
    uvicorn.run(
        "mergeforge.main:app",
        host=host,
        port=port,
        reload=reload,
        log_level=settings.LOG_LEVEL.lower()
    )


def main(argv: Optional[Sequence[str]] = None) -> None:
    cli(args=argv, obj={})


if __name__ == '__main__':
    main()
