"""
Lifecycle pipeline shared by the CLI subcommands and the attack grid.

Turns an ExperimentConfig into data, clusters and twins:
- prepare_data: generate or load traffic and freeze the V-twin split
- build_assignment: cluster cells and link every cell to its cluster head
- build_vtwins / maintain_twins: the two lifecycle phases over every cluster
- evaluate_params / evaluate_twins: pooled held-out forecast quality
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dnt_bench.config import ExperimentConfig
from twinpress.aggregation import AggregationRule
from twinpress.errors import SchemaError
from twinpress.executor import LocalTrainingExecutor
from twinpress.fedsync import (
    CellData,
    GlobalTwin,
    SyncConfig,
    carry_twins,
    run_centralized,
    run_htwin,
    run_vtwin,
)
from twinpress.forecast import ForecastModel, ParameterVector, rolling_forecast, warn_if_unstable
from twinpress.metrics import CostLedger, QualityReport, safe_quality_report
from twinpress.network import (
    ClusterAssignment,
    PhysicalNetwork,
    TrafficDataset,
    build_physical_network,
    cell_features,
    cluster_cells,
    generate_synthetic_traffic,
    link_clusters,
    load_traffic_csv,
    match_clusters,
)
from twinpress.threat import AttackConfig, build_adversary


@dataclass
class ExperimentData:
    """Traffic of one experiment and its lifecycle boundaries.

    V-twin trains on [0, train_end), H-twin streams over
    [train_end, eval_start) and evaluation holds out [eval_start, T).
    """
    network: PhysicalNetwork
    dataset: TrafficDataset
    cells: CellData
    train_end: int
    eval_start: int

    @property
    def n_steps(self) -> int:
        return self.dataset.n_steps


@dataclass
class MaintenanceResult:
    twins: Dict[int, GlobalTwin]
    assignment: ClusterAssignment
    network: PhysicalNetwork
    stop_tick: int
    reclusterings: int


def load_dataset(config: ExperimentConfig, network: PhysicalNetwork) -> TrafficDataset:
    """Traffic from config.network.csv_path, or synthetic traffic when unset.

    Raises:
        SchemaError: If a loaded file does not cover exactly the network's cells
    """
    if config.network.csv_path is None:
        return generate_synthetic_traffic(network, config.seed, config.network.horizon, config.traffic)
    dataset = load_traffic_csv(config.network.csv_path, channel=config.network.channel)
    if sorted(dataset.cell_ids) != network.cell_ids:
        raise SchemaError(
            f"{config.network.csv_path} covers {len(dataset.cell_ids)} cells, "
            f"the {config.network.rows}x{config.network.cols} grid has {len(network.cell_ids)}"
        )
    return dataset


def prepare_data(config: ExperimentConfig) -> ExperimentData:
    network = build_physical_network(config.network_config())
    dataset = load_dataset(config, network)
    train_end, eval_start = dataset.split(config.fedsync.train_fraction, config.fedsync.eval_steps)
    warn_if_unstable(config.training_config(), config.forecaster.window)
    logging.info(
        f"Data: {len(dataset.cell_ids)} cells x {dataset.n_steps} steps; train [0, {train_end}), "
        f"stream [{train_end}, {eval_start}), held out [{eval_start}, {dataset.n_steps})"
    )
    return ExperimentData(
        network=network,
        dataset=dataset,
        cells=CellData.prepare(dataset, train_end),
        train_end=train_end,
        eval_start=eval_start,
    )


def effective_k(config: ExperimentConfig, no_cluster: bool = False) -> int:
    if no_cluster or not config.clustering.enabled:
        return 1
    return config.clustering.k


def build_assignment(
    config: ExperimentConfig,
    data: ExperimentData,
    k: int,
    stop: Optional[int] = None,
    network: Optional[PhysicalNetwork] = None,
) -> Tuple[ClusterAssignment, PhysicalNetwork]:
    """Cluster cells on the traffic observed before `stop` (train_end by default)."""
    network = network or data.network
    observed = data.dataset.window(0, stop if stop is not None else data.train_end)
    assignment = cluster_cells(network, observed, k, config.seed, config.clustering.recluster_period)
    linked = link_clusters(network, assignment, cell_features(network, observed))
    return assignment, linked


def evaluate_params(data: ExperimentData, cells: Sequence[int], params_of: Callable[[int], ParameterVector]) -> QualityReport:
    """Pooled one-step forecast quality over the held-out window.

    Args:
        data: Experiment data
        cells: Cells to pool
        params_of: Model parameters serving each cell

    Returns:
        QualityReport over every (cell, held-out step) pair
    """
    T = data.n_steps
    horizon = T - data.eval_start
    predictions, truth = [], []
    for cid in sorted(cells):
        series = data.cells.series(cid)
        model = ForecastModel.unpack(params_of(cid))
        predictions.append(rolling_forecast(model, series[: T - 1], horizon, data.cells.stats[cid]))
        truth.append(series[data.eval_start:])
    return safe_quality_report(np.concatenate(predictions), np.concatenate(truth))


def heldout_evaluator(data: ExperimentData, cells: Sequence[int]) -> Callable[[ParameterVector], QualityReport]:
    return lambda params: evaluate_params(data, cells, lambda _: params)


def rolling_evaluator(
    data: ExperimentData, cells: Sequence[int], window: int, eval_window: int
) -> Callable[[ParameterVector, int], QualityReport]:
    """Quality of one-step forecasts over the `eval_window` steps ending at a tick."""

    def evaluate(params: ParameterVector, tick: int) -> QualityReport:
        model = ForecastModel.unpack(params)
        horizon = max(1, min(eval_window, tick - window + 1))
        predictions, truth = [], []
        for cid in sorted(cells):
            series = data.cells.series(cid)
            predictions.append(rolling_forecast(model, series[:tick], horizon, data.cells.stats[cid]))
            truth.append(series[tick - horizon + 1: tick + 1])
        return safe_quality_report(np.concatenate(predictions), np.concatenate(truth))

    return evaluate


def evaluate_twins(data: ExperimentData, assignment: ClusterAssignment, twins: Dict[int, GlobalTwin]) -> QualityReport:
    """Held-out quality with every cell served by its cluster's twin."""
    return evaluate_params(data, list(assignment.assignment), lambda cid: twins[assignment.assignment[cid]].params)


def build_vtwins(
    config: ExperimentConfig,
    data: ExperimentData,
    assignment: ClusterAssignment,
    rule: AggregationRule,
    attack: Optional[AttackConfig] = None,
    evaluate: bool = True,
    executor: Optional[LocalTrainingExecutor] = None,
) -> Dict[int, GlobalTwin]:
    """Run V-twin rounds for every cluster; fakes join each cluster's rounds when `attack` is set."""
    cfg = config.sync_config()
    twins: Dict[int, GlobalTwin] = {}
    for j in range(assignment.k):
        members = assignment.members(j)
        adversary = build_adversary(attack, cfg.window + 1, config.seed)
        twins[j] = run_vtwin(
            members,
            data.cells,
            config.fedsync.rounds,
            rule,
            cfg,
            cluster_id=j,
            adversary=adversary,
            evaluate=heldout_evaluator(data, members) if evaluate else None,
            executor=executor,
        )
    return twins


def maintain_twins(
    config: ExperimentConfig,
    data: ExperimentData,
    assignment: ClusterAssignment,
    twins: Dict[int, GlobalTwin],
    rule: AggregationRule,
    cfg: Optional[SyncConfig] = None,
    attack: Optional[AttackConfig] = None,
    evaluate: bool = True,
    network: Optional[PhysicalNetwork] = None,
) -> MaintenanceResult:
    """H-twin maintenance over the stream window, re-clustering between segments.

    Every `recluster_period` ticks the cells are clustered again on the traffic
    seen so far, matched to the previous labels, and the twins are carried over.
    `fedsync.max_events` bounds the batches each cluster applies.

    Returns:
        MaintenanceResult with the final twins, partition and first unprocessed tick
    """
    cfg = cfg or config.sync_config()
    network = network or data.network
    start = max(data.train_end, cfg.htwin_window - 1)
    stop = data.eval_start
    recluster = assignment.k > 1 and config.clustering.enabled
    segment = config.clustering.recluster_period if recluster else max(1, stop - start)
    max_events = config.fedsync.max_events
    applied: Dict[int, int] = {j: 0 for j in twins}
    adversaries = {j: build_adversary(attack, cfg.window + 1, config.seed) for j in twins}
    reclusterings = 0

    tick = start
    while tick < stop:
        seg_stop = min(tick + segment, stop)
        for j in sorted(twins):
            twin = twins[j]
            remaining = None if max_events is None else max_events - applied.get(j, 0)
            if remaining is not None and remaining <= 0:
                continue
            before = twin.version
            run_htwin(
                twin,
                data.cells,
                tick,
                seg_stop,
                rule,
                cfg,
                adversary=adversaries.get(j),
                evaluate=rolling_evaluator(data, twin.members, cfg.window, config.fedsync.eval_window) if evaluate else None,
                max_batches=remaining,
            )
            applied[j] = applied.get(j, 0) + twin.version - before
        tick = seg_stop
        if max_events is not None and all(applied.get(j, 0) >= max_events for j in twins):
            break
        if recluster and tick < stop:
            current, network = build_assignment(config, data, assignment.k, stop=tick, network=network)
            matched = match_clusters(assignment, current)
            if matched.assignment != assignment.assignment:
                twins = carry_twins(assignment, matched, twins)
                reclusterings += 1
                logging.info(f"Re-clustered at tick {tick}: sizes={matched.sizes()}")
            assignment = matched

    logging.info(f"Maintenance finished at tick {tick}; versions={[twins[j].version for j in sorted(twins)]}")
    return MaintenanceResult(twins=twins, assignment=assignment, network=network, stop_tick=tick, reclusterings=reclusterings)


def centralized_baseline(config: ExperimentConfig, data: ExperimentData) -> Tuple[ForecastModel, CostLedger, QualityReport]:
    """Raw-upload baseline over every cell and its held-out quality."""
    cells = data.network.cell_ids
    model, ledger = run_centralized(cells, data.cells, config.fedsync.rounds, config.sync_config())
    params = model.pack()
    quality = evaluate_params(data, cells, lambda _: params)
    logging.info(f"Centralized baseline: mae={quality.mae:.6g}, mse={quality.mse:.6g}")
    return model, ledger, quality


def clone_twins(twins: Dict[int, GlobalTwin]) -> Dict[int, GlobalTwin]:
    """Copies at the same version with fresh ledgers and timelines."""
    return {
        j: GlobalTwin(cluster_id=j, params=t.params.copy(), version=t.version, members=list(t.members))
        for j, t in twins.items()
    }


def combined_ledger(twins: Dict[int, GlobalTwin]) -> CostLedger:
    ledger = CostLedger()
    for j in sorted(twins):
        ledger.extend(twins[j].cost_ledger)
    return ledger


def assignment_rows(assignment: ClusterAssignment, network: PhysicalNetwork) -> List[Dict[str, int]]:
    rows = []
    for cid in network.cell_ids:
        head = network.get(cid).external_props.get("cluster_head", cid)
        rows.append({"cell_id": cid, "cluster": assignment.assignment[cid], "cluster_head": int(head)})
    return rows
