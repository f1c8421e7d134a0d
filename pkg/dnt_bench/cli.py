"""
Command-line runner for the twin lifecycle experiments.

Every subcommand reads one experiment config, writes its artifacts into the
run directory and records them in the run manifest.
"""

import functools
import logging
import os
from typing import Dict, List, Optional, Tuple

import click
import pandas as pd
from dotenv import load_dotenv

from dnt_bench.attack_eval import run_attack_eval, write_attack_eval
from dnt_bench.cache_sim import run_cache_sim, write_cache_sim
from dnt_bench.config import ExperimentConfig, config_to_dict, load_config
from dnt_bench.pipeline import (
    ExperimentData,
    assignment_rows,
    build_assignment,
    build_vtwins,
    centralized_baseline,
    combined_ledger,
    effective_k,
    evaluate_twins,
    maintain_twins,
    prepare_data,
)
from dnt_bench.report import write_report
from twinpress import __version__
from twinpress.aggregation import build_rule
from twinpress.checkpoint import TwinCheckpoint, load_checkpoint, save_checkpoint
from twinpress.errors import ConfigurationError, TwinError, TwinStateError
from twinpress.executor import LocalTrainingExecutor
from twinpress.fedsync import GlobalTwin, centralized_maintenance_ledger
from twinpress.metrics import QualityReport
from twinpress.network import ClusterAssignment, write_traffic_csv
from twinpress.state_manager import RunStateManager

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
QUALITY_COLUMNS = ["model", "mae", "mse", "nrmse"]


def setup_logging(level: Optional[str]) -> None:
    level = (level or os.environ.get("DNT_LOG_LEVEL") or "INFO").upper()
    if level not in LOG_LEVELS:
        raise click.BadParameter(f"must be one of {', '.join(LOG_LEVELS)}", param_hint="--log-level")
    logging.basicConfig(level=getattr(logging, level), format="%(asctime)s %(levelname)s %(message)s", force=True)


def experiment_options(func):
    """--config, --seed, --out and --log-level, shared by every experiment subcommand."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Experiment YAML file")
    @click.option("--seed", type=int, default=None, help="Root seed, overrides the config")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Run directory, overrides output_dir")
    @click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: $DNT_LOG_LEVEL or INFO)")
    @functools.wraps(func)
    def wrapper(config_path, seed, out_dir, log_level, **kwargs):
        setup_logging(log_level)
        command = click.get_current_context().info_name
        try:
            config = load_config(config_path).with_overrides(seed=seed, output_dir=out_dir)
            os.makedirs(config.output_dir, exist_ok=True)
            manager = RunStateManager(config.output_dir)
            manager.set("config", config_to_dict(config))
            files = func(config, manager, **kwargs)
            manager.add_files(command, files)
        except TwinError as e:
            logging.error(f"{command} failed: {e}", exc_info=logging.getLogger().isEnabledFor(logging.DEBUG))
            raise click.ClickException(str(e)) from e
        except OSError as e:
            logging.error(f"{command} failed: {e}", exc_info=True)
            raise click.ClickException(f"I/O error: {e}") from e

    return wrapper


def _show_progress() -> bool:
    return logging.getLogger().isEnabledFor(logging.INFO)


def _quality_row(model: str, quality: QualityReport) -> Dict[str, object]:
    return {"model": model, "mae": quality.mae, "mse": quality.mse, "nrmse": quality.nrmse}


def _write_quality(rows: List[Dict[str, object]], path: str) -> None:
    pd.DataFrame(rows, columns=QUALITY_COLUMNS).to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


def _write_clusters(config: ExperimentConfig, data: ExperimentData, k: int, path: str) -> None:
    assignment, linked = build_assignment(config, data, k)
    pd.DataFrame(assignment_rows(assignment, linked)).to_csv(path, index=False, lineterminator="\n")
    click.echo(f"{assignment.k} clusters, sizes {assignment.sizes()}")


def _save_twins(twins: Dict[int, GlobalTwin], tag: str, window: int, out: str) -> List[str]:
    files = []
    for j in sorted(twins):
        twin = twins[j]
        ckpt = os.path.join(out, f"{tag}_c{j}.ckpt")
        save_checkpoint(TwinCheckpoint(cluster_id=j, version=twin.version, window=window, params=twin.params), ckpt)
        timeline = os.path.join(out, f"timeline_{tag}_c{j}.csv")
        twin.timeline.write_csv(timeline)
        files += [ckpt, timeline]
    return files


def _load_vtwins(
    config: ExperimentConfig, data: ExperimentData, k: int, tag: str
) -> Tuple[Dict[int, GlobalTwin], ClusterAssignment]:
    """V-twin checkpoints of a clustering, bound to the members of the same partition."""
    assignment, _ = build_assignment(config, data, k)
    twins = {}
    for j in range(assignment.k):
        path = os.path.join(config.output_dir, f"{tag}_c{j}.ckpt")
        if not os.path.exists(path):
            raise TwinStateError(f"missing V-twin checkpoint {path}; run the vtwin subcommand first")
        ckpt = load_checkpoint(path)
        if ckpt.window != config.forecaster.window:
            raise ConfigurationError(
                f"checkpoint {path} has W={ckpt.window}, config has {config.forecaster.window}", key="forecaster.window"
            )
        twins[j] = GlobalTwin(cluster_id=j, params=ckpt.params, version=ckpt.version, members=assignment.members(j))
    return twins, assignment


@click.group()
@click.version_option(__version__, prog_name="dnt")
def cli():
    """Digital network twin experiments: data, twin lifecycle, attacks and edge caching."""
    load_dotenv()


@cli.command("gen-data")
@experiment_options
def gen_data(config: ExperimentConfig, manager: RunStateManager) -> List[str]:
    """Write the experiment's traffic as traffic.csv."""
    data = prepare_data(config)
    path = os.path.join(config.output_dir, "traffic.csv")
    rows = write_traffic_csv(data.dataset, path)
    click.echo(f"{rows} rows written to {path}")
    return [path]


@cli.command("cluster")
@experiment_options
def cluster(config: ExperimentConfig, manager: RunStateManager) -> List[str]:
    """Cluster cells on the training window and write clusters.csv."""
    data = prepare_data(config)
    path = os.path.join(config.output_dir, "clusters.csv")
    _write_clusters(config, data, effective_k(config), path)
    return [path]


@cli.command("vtwin")
@experiment_options
@click.option("--no-cluster", is_flag=True, help="Also run the single-cluster ablation")
def vtwin(config: ExperimentConfig, manager: RunStateManager, no_cluster: bool) -> List[str]:
    """Build the global twins with synchronous rounds; compare against the centralized mapping."""
    out = config.output_dir
    data = prepare_data(config)
    rule = build_rule(config.fedsync.rule, tau=config.fedsync.tau)
    executor = LocalTrainingExecutor(config.fedsync.num_workers)
    files = [os.path.join(out, "clusters.csv")]
    _write_clusters(config, data, effective_k(config), files[0])

    variants = [("vtwin", effective_k(config))] + ([("vtwin_nocluster", 1)] if no_cluster else [])
    rows = []
    for tag, k in variants:
        assignment, _ = build_assignment(config, data, k)
        twins = build_vtwins(config, data, assignment, rule, executor=executor)
        files += _save_twins(twins, tag, config.forecaster.window, out)
        quality = evaluate_twins(data, assignment, twins)
        rows.append(_quality_row(tag, quality))
        manager.record_ledger(tag.replace("_", "-"), combined_ledger(twins).report())
        click.echo(f"{tag}: {assignment.k} twins, final mae={quality.mae:.6g}")

    _, ledger, quality = centralized_baseline(config, data)
    rows.append(_quality_row("centralized", quality))
    manager.record_ledger("centralized", ledger.report())
    path = os.path.join(out, "quality_vtwin.csv")
    _write_quality(rows, path)
    return files + [path]


@cli.command("htwin")
@experiment_options
@click.option("--no-cluster", is_flag=True, help="Also maintain the single-cluster ablation")
def htwin(config: ExperimentConfig, manager: RunStateManager, no_cluster: bool) -> List[str]:
    """Maintain the V-twin checkpoints asynchronously over the traffic stream."""
    out = config.output_dir
    data = prepare_data(config)
    rule = build_rule(config.fedsync.rule, tau=config.fedsync.tau)
    variants = [("htwin", "vtwin", effective_k(config))] + ([("htwin_nocluster", "vtwin_nocluster", 1)] if no_cluster else [])

    files, rows = [], []
    for tag, source, k in variants:
        twins, assignment = _load_vtwins(config, data, k, source)
        result = maintain_twins(config, data, assignment, twins, rule)
        files += _save_twins(result.twins, tag, config.forecaster.window, out)
        quality = evaluate_twins(data, result.assignment, result.twins)
        rows.append(_quality_row(tag, quality))
        clustered = tag == "htwin"
        manager.record_ledger(tag.replace("_", "-"), combined_ledger(result.twins).report(), role="candidate" if clustered else None)
        if clustered:
            start = max(data.train_end, config.fedsync.htwin_window - 1)
            baseline = centralized_maintenance_ledger(data.network.cell_ids, data.cells, start, result.stop_tick, config.sync_config())
            manager.record_ledger("centralized-maintenance", baseline.report(), role="baseline")
        click.echo(
            f"{tag}: versions {[result.twins[j].version for j in sorted(result.twins)]}, "
            f"{result.reclusterings} re-clusterings, final mae={quality.mae:.6g}"
        )

    path = os.path.join(out, "quality_htwin.csv")
    _write_quality(rows, path)
    return files + [path]


@cli.command("attack-eval")
@experiment_options
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Parallel processes (default: fedsync.num_workers)")
def attack_eval(config: ExperimentConfig, manager: RunStateManager, workers: Optional[int]) -> List[str]:
    """Evaluate every aggregation rule under every attack in both phases."""
    data = prepare_data(config)
    frame = run_attack_eval(
        config, data, num_workers=workers or config.fedsync.num_workers, progress=_show_progress()
    )
    files = write_attack_eval(frame, config.output_dir)
    click.echo(f"{len(frame)} grid rows written to {files[0]}")
    return files


@cli.command("cache-sim")
@experiment_options
@click.option("--trace", is_flag=True, help="Also write the per-request trace of every policy")
def cache_sim(config: ExperimentConfig, manager: RunStateManager, trace: bool) -> List[str]:
    """Train and evaluate the caching variants and the LRU/LFU baselines."""
    result = run_cache_sim(config.caching, config.seed, trace=trace, progress=_show_progress())
    files = write_cache_sim(result, config.output_dir)
    for name, report in result.reports.items():
        click.echo(f"{name:>15}: hit_rate={report.hit_rate:.4f} interventions={report.interventions} load_cv={report.load_cv:.4f}")
    return files


@cli.command("report")
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: $DNT_LOG_LEVEL or INFO)")
def report(run_dir: str, log_level: Optional[str]):
    """Summarize a run directory into summary.txt and summary.json."""
    setup_logging(log_level)
    try:
        files = write_report(run_dir)
    except TwinError as e:
        logging.error(f"report failed: {e}", exc_info=logging.getLogger().isEnabledFor(logging.DEBUG))
        raise click.ClickException(str(e)) from e
    except OSError as e:
        logging.error(f"report failed: {e}", exc_info=True)
        raise click.ClickException(f"I/O error: {e}") from e
    click.echo(f"Summary written to {files[0]}")


def main():
    cli()


if __name__ == "__main__":
    main()
