"""
Federated twin synchronization engine.

This module drives the twin lifecycle over a cluster of cells:
- run_vtwin: synchronous rounds in which every cell trains and one rule
  aggregates all updates (vertical mapping)
- HTwinSession / run_htwin: asynchronous, staleness-weighted maintenance
  over a traffic stream (horizontal mapping)
- reclustering helpers that carry twins across a new cluster partition
- the centralized "raw upload" baseline used for cost comparisons
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from twinpress.aggregation import AggregationContext, AggregationRule, ClientUpdate
from twinpress.errors import ConfigurationError, DomainError, TwinStateError
from twinpress.executor import LocalTrainingExecutor, TrainingJob, run_training_job
from twinpress.forecast import (
    ForecastModel,
    MinMaxStats,
    ParameterVector,
    TrainingConfig,
    fit_samples,
    make_samples,
)
from twinpress.metrics import CostLedger, QualityReport
from twinpress.network import ClusterAssignment, TrafficDataset
from twinpress.seeding import derive_rng
from twinpress.threat import Adversary, inject

TIMELINE_COLUMNS = ["version", "mae", "mse", "nrmse", "comm_cost", "compute_cost"]

VTwinEvaluator = Callable[[ParameterVector], QualityReport]
HTwinEvaluator = Callable[[ParameterVector, int], QualityReport]


@dataclass(frozen=True)
class SyncConfig:
    """Engine settings shared by both lifecycle phases.

    Attributes:
        training (TrainingConfig): Local training settings
        window (int): Forecaster input window W
        beta (float): Base asynchronous mixing weight, in (0, 1]
        batch_size (int): Authentic arrivals per H-twin aggregation
        max_period (int): Longest client arrival period in stream steps
        htwin_window (int): Most recent steps a client trains on during maintenance
        root_fraction (float): Share of a cluster's cells backing the FLTrust root data
        seed (int): Root seed
    """
    training: TrainingConfig = field(default_factory=TrainingConfig)
    window: int = 12
    beta: float = 0.5
    batch_size: int = 1
    max_period: int = 4
    htwin_window: int = 144
    root_fraction: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        self.training.validate()
        if self.window < 1:
            raise ConfigurationError(f"window must be >= 1, got {self.window}", key="forecaster.window")
        if not 0 < self.beta <= 1:
            raise ConfigurationError(f"beta must be in (0, 1], got {self.beta}", key="fedsync.beta")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}", key="fedsync.batch_size")
        if self.max_period < 1:
            raise ConfigurationError(f"max_period must be >= 1, got {self.max_period}", key="fedsync.max_period")
        if self.htwin_window <= self.window:
            raise ConfigurationError(
                f"htwin_window must exceed the forecaster window {self.window}, got {self.htwin_window}",
                key="fedsync.htwin_window",
            )
        if not 0 < self.root_fraction <= 1:
            raise ConfigurationError(f"root_fraction must be in (0, 1], got {self.root_fraction}", key="fedsync.root_fraction")


@dataclass
class CellData:
    """Traffic of every cell plus normalization frozen on the V-twin split."""
    dataset: TrafficDataset
    train_end: int
    stats: Dict[int, MinMaxStats]
    rows: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def prepare(cls, dataset: TrafficDataset, train_end: int) -> "CellData":
        stats = {cid: MinMaxStats.from_series(dataset.values[i, :train_end]) for i, cid in enumerate(dataset.cell_ids)}
        rows = {cid: i for i, cid in enumerate(dataset.cell_ids)}
        return cls(dataset=dataset, train_end=train_end, stats=stats, rows=rows)

    def series(self, cell_id: int, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        return self.dataset.values[self.rows[cell_id], start:stop]

    def training(self, cell_id: int) -> np.ndarray:
        return self.series(cell_id, 0, self.train_end)


@dataclass
class TimelineEntry:
    version: int
    params: ParameterVector
    quality: Optional[QualityReport]
    comm_cost: int
    compute_cost: int
    tick: Optional[int] = None

    def row(self) -> Dict[str, object]:
        q = self.quality
        return {
            "version": self.version,
            "mae": q.mae if q else float("nan"),
            "mse": q.mse if q else float("nan"),
            "nrmse": q.nrmse if q and q.nrmse is not None else float("nan"),
            "comm_cost": self.comm_cost,
            "compute_cost": self.compute_cost,
        }


@dataclass
class TwinTimeline:
    cluster_id: int
    entries: List[TimelineEntry] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.row() for e in self.entries], columns=TIMELINE_COLUMNS)

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.10g")

    @property
    def final(self) -> Optional[TimelineEntry]:
        return self.entries[-1] if self.entries else None


@dataclass
class GlobalTwin:
    """Global twin model of one cluster.

    Attributes:
        cluster_id (int): Cluster the twin serves
        params (ParameterVector): Current global model
        version (int): Applied aggregations, +1 each
        members (List[int]): Cell ids of the cluster
        cost_ledger (CostLedger): Costs charged while building and maintaining the twin
        timeline (TwinTimeline): Recorded versions and their quality
    """
    cluster_id: int
    params: ParameterVector
    version: int = 0
    members: List[int] = field(default_factory=list)
    cost_ledger: CostLedger = field(default_factory=CostLedger)
    timeline: Optional[TwinTimeline] = None

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.timeline is None:
            self.timeline = TwinTimeline(cluster_id=self.cluster_id)

    @property
    def initialized(self) -> bool:
        return self.version >= 1

    @property
    def model(self) -> ForecastModel:
        return ForecastModel.unpack(self.params)

    def record(self, quality: Optional[QualityReport], tick: Optional[int] = None) -> TimelineEntry:
        report = self.cost_ledger.report()
        entry = TimelineEntry(
            version=self.version,
            params=self.params.copy(),
            quality=quality,
            comm_cost=report.comm_units,
            compute_cost=report.compute_units,
            tick=tick,
        )
        self.timeline.entries.append(entry)
        return entry


def staleness_weight(s: int, beta: float) -> float:
    """Mixing weight of an update that is `s` versions stale: beta / (1 + s).

    Raises:
        DomainError: If s < 0
        ConfigurationError: If beta is outside (0, 1]
    """
    if s < 0:
        raise DomainError(f"staleness must be >= 0, got {s}")
    if not 0 < beta <= 1:
        raise ConfigurationError(f"beta must be in (0, 1], got {beta}", key="fedsync.beta")
    return beta / (1.0 + s)


def select_root_cells(cells: Sequence[int], fraction: float, seed: int, cluster_id: int) -> List[int]:
    """Cells whose data the FLTrust server holds, fixed per seed and cluster."""
    ordered = sorted(cells)
    n = max(1, math.ceil(fraction * len(ordered)))
    rng = derive_rng(seed, "fltrust-root", cluster_id)
    picked = rng.choice(len(ordered), size=min(n, len(ordered)), replace=False)
    return sorted(ordered[i] for i in picked)


def train_server_update(
    params: ParameterVector,
    data: CellData,
    root_cells: Sequence[int],
    start: int,
    stop: int,
    cfg: SyncConfig,
    ledger: Optional[CostLedger] = None,
    phase: str = "",
) -> ParameterVector:
    """Server-side training from `params` on pooled root-cell windows in [start, stop)."""
    inputs, targets = [], []
    for cid in root_cells:
        x, y = make_samples(data.stats[cid].normalize(data.series(cid, start, stop)), cfg.window)
        inputs.append(x)
        targets.append(y)
    inputs = np.concatenate(inputs)
    targets = np.concatenate(targets)
    model = fit_samples(ForecastModel.unpack(params, cfg.window), inputs, targets, cfg.training)
    if ledger is not None:
        ledger.record_compute(cfg.training.epochs, len(targets), phase=phase)
    return model.pack()


def _aggregate(
    rule: AggregationRule,
    updates: List[ClientUpdate],
    params: ParameterVector,
    server_update: Optional[ParameterVector],
) -> ParameterVector:
    if len(updates) < rule.min_updates:
        raise DomainError(f"rule '{rule.name}' needs at least {rule.min_updates} updates, got {len(updates)}")
    return rule.aggregate(updates, AggregationContext(global_params=params, server_update=server_update))


def run_vtwin(
    cluster_cells: Sequence[int],
    data: CellData,
    rounds: int,
    rule: AggregationRule,
    cfg: SyncConfig,
    cluster_id: int = 0,
    adversary: Optional[Adversary] = None,
    evaluate: Optional[VTwinEvaluator] = None,
    executor: Optional[LocalTrainingExecutor] = None,
) -> GlobalTwin:
    """Build a cluster's global twin with synchronous federated rounds.

    Args:
        cluster_cells: Cell ids of the cluster; every one trains each round
        data: Traffic and frozen normalization; training uses [0, train_end)
        rounds: Number of synchronous rounds, >= 1
        rule: Aggregation rule applied to each round's updates
        cfg: Engine settings
        cluster_id: Label carried by the twin and its seeds
        adversary: Optional attacker injecting fabricated updates every round
        evaluate: Optional quality callback recorded after each round
        executor: Local training strategy, sequential by default

    Returns:
        GlobalTwin at version == rounds with its cost ledger and timeline

    Raises:
        ConfigurationError: If rounds < 1
    """
    if rounds < 1:
        raise ConfigurationError(f"rounds must be >= 1, got {rounds}", key="fedsync.rounds")
    if not cluster_cells:
        raise DomainError(f"cluster {cluster_id} has no cells")
    cfg.validate()
    executor = executor or LocalTrainingExecutor()
    cells = sorted(cluster_cells)
    twin = GlobalTwin(cluster_id=cluster_id, params=ForecastModel.zeros(cfg.window).pack(), members=cells)
    root_cells = select_root_cells(cells, cfg.root_fraction, cfg.seed, cluster_id) if rule.needs_server_update else []
    model_size = cfg.window + 1

    logging.info(f"V-twin cluster {cluster_id}: {len(cells)} clients, {rounds} rounds, rule={rule!r}")
    twin.cost_ledger.start_timer()
    for r in range(1, rounds + 1):
        jobs = [TrainingJob(cid, twin.params, data.training(cid), data.stats[cid], twin.version) for cid in cells]
        updates = executor.execute(jobs, cfg.training)
        twin.cost_ledger.record_transfers(2 * len(updates), model_size, phase="vtwin")
        twin.cost_ledger.record_compute(cfg.training.epochs, sum(u.sample_count for u in updates), phase="vtwin")

        batch = updates
        if adversary is not None:
            fakes = adversary.fabricate(twin.params, len(updates), twin.version)
            batch = inject(updates, fakes, cfg.seed, ("vtwin", cluster_id, r))

        server_update = None
        if rule.needs_server_update:
            server_update = train_server_update(
                twin.params, data, root_cells, 0, data.train_end, cfg, twin.cost_ledger, phase="vtwin"
            )
        twin.params = _aggregate(rule, batch, twin.params, server_update)
        twin.version += 1
        if adversary is not None:
            adversary.observe([u.sample_count for u in updates])
        quality = evaluate(twin.params) if evaluate is not None else None
        twin.record(quality)
        if quality is not None:
            logging.debug(f"V-twin cluster {cluster_id} round {r}: mae={quality.mae_raw:.6g}")
    elapsed = twin.cost_ledger.stop_timer()
    logging.info(f"V-twin cluster {cluster_id} finished at version {twin.version} in {elapsed:.2f}s")
    return twin


@dataclass(frozen=True)
class AsyncSchedule:
    """Deterministic arrival pattern: client c arrives at ticks t with
    (t - offsets[c]) % periods[c] == 0."""
    periods: Dict[int, int]
    offsets: Dict[int, int]

    @classmethod
    def from_seed(cls, client_ids: Sequence[int], max_period: int, seed: int) -> "AsyncSchedule":
        periods, offsets = {}, {}
        for cid in client_ids:
            # One stream per client so a client's pattern survives re-clustering.
            rng = derive_rng(seed, "async-schedule", int(cid))
            period = int(rng.integers(1, max_period + 1))
            periods[cid] = period
            offsets[cid] = int(rng.integers(0, period))
        return cls(periods=periods, offsets=offsets)

    def arrivals(self, tick: int, client_ids: Sequence[int]) -> List[int]:
        return sorted(c for c in client_ids if (tick - self.offsets[c]) % self.periods[c] == 0)


class HTwinSession:
    """Asynchronous maintenance state of one cluster's twin.

    Each arriving client trains from the global model it last pulled on the
    most recent `htwin_window` observed steps. Arrivals are buffered; every
    `batch_size` of them form a batch that is aggregated with the rule and
    mixed into the global model with the batch's largest staleness.

    Attributes:
        twin (GlobalTwin): Twin being maintained; mutated in place
        applied_batches (int): Aggregations applied by this session
        pending (List[ClientUpdate]): Buffered arrivals not yet applied
    """

    def __init__(
        self,
        twin: GlobalTwin,
        data: CellData,
        rule: AggregationRule,
        cfg: SyncConfig,
        schedule: Optional[AsyncSchedule] = None,
        adversary: Optional[Adversary] = None,
        evaluate: Optional[HTwinEvaluator] = None,
    ):
        if not twin.initialized:
            raise TwinStateError(f"twin of cluster {twin.cluster_id} has not been initialized by a V-twin run")
        cfg.validate()
        if cfg.batch_size < rule.min_updates:
            raise ConfigurationError(
                f"rule '{rule.name}' needs batches of at least {rule.min_updates}, got {cfg.batch_size}",
                key="fedsync.batch_size",
            )
        self.twin = twin
        self.data = data
        self.rule = rule
        self.cfg = cfg
        self.schedule = schedule or AsyncSchedule.from_seed(twin.members, cfg.max_period, cfg.seed)
        self.adversary = adversary
        self.evaluate = evaluate
        self.base: Dict[int, Tuple[int, ParameterVector]] = {c: (twin.version, twin.params.copy()) for c in twin.members}
        self.pending: List[ClientUpdate] = []
        self.applied_batches = 0
        self.root_cells = (
            select_root_cells(twin.members, cfg.root_fraction, cfg.seed, twin.cluster_id) if rule.needs_server_update else []
        )

    def step(self, tick: int, max_batches: Optional[int] = None) -> int:
        """Process the arrivals of one stream step.

        Args:
            tick: Stream step
            max_batches: Apply at most this many batches; later arrivals of
                the tick are not trained

        Returns:
            Number of batches applied at this tick
        """
        if tick < self.cfg.htwin_window - 1:
            raise DomainError(f"tick {tick} leaves fewer than {self.cfg.htwin_window} observed steps")
        start = tick + 1 - self.cfg.htwin_window
        applied = 0
        for cid in self.schedule.arrivals(tick, self.twin.members):
            if max_batches is not None and applied >= max_batches:
                break
            base_version, base_params = self.base[cid]
            job = TrainingJob(cid, base_params, self.data.series(cid, start, tick + 1), self.data.stats[cid], base_version)
            update = run_training_job(job, self.cfg.training)
            self.twin.cost_ledger.record_transfers(2, len(base_params), phase="htwin")
            self.twin.cost_ledger.record_compute(self.cfg.training.epochs, update.sample_count, phase="htwin")
            self.pending.append(update)
            if len(self.pending) >= self.cfg.batch_size:
                self._apply(tick, start)
                applied += 1
        return applied

    def advance(self, start_tick: int, stop_tick: int, max_batches: Optional[int] = None) -> int:
        """Run ticks in [start_tick, stop_tick), stopping once max_batches are applied.

        Returns:
            The first tick not processed
        """
        tick = start_tick
        while tick < stop_tick:
            remaining = None if max_batches is None else max_batches - self.applied_batches
            if remaining is not None and remaining <= 0:
                break
            self.step(tick, remaining)
            tick += 1
        return tick

    def _apply(self, tick: int, start: int) -> None:
        batch, self.pending = self.pending, []
        twin = self.twin
        staleness = max(twin.version - u.base_version for u in batch)
        updates = batch
        if self.adversary is not None:
            fakes = self.adversary.fabricate(twin.params, len(batch), twin.version)
            updates = inject(batch, fakes, self.cfg.seed, ("htwin", twin.cluster_id, twin.version))

        server_update = None
        if self.rule.needs_server_update:
            server_update = train_server_update(
                twin.params, self.data, self.root_cells, start, tick + 1, self.cfg, twin.cost_ledger, phase="htwin"
            )
        aggregated = _aggregate(self.rule, updates, twin.params, server_update)
        weight = staleness_weight(staleness, self.cfg.beta)
        twin.params = twin.params + weight * (aggregated - twin.params)
        twin.version += 1
        self.applied_batches += 1
        for u in batch:
            self.base[u.client_id] = (twin.version, twin.params.copy())
        if self.adversary is not None:
            self.adversary.observe([u.sample_count for u in batch])

        quality = self.evaluate(twin.params, tick) if self.evaluate is not None else None
        twin.record(quality, tick=tick)
        logging.debug(
            f"H-twin cluster {twin.cluster_id} tick {tick}: batch of {len(batch)} (staleness {staleness}, "
            f"weight {weight:.4f}) -> version {twin.version}"
        )

    def discard_pending(self) -> int:
        dropped = len(self.pending)
        self.pending = []
        return dropped


def run_htwin(
    twin: GlobalTwin,
    data: CellData,
    start_tick: int,
    stop_tick: int,
    rule: AggregationRule,
    cfg: SyncConfig,
    schedule: Optional[AsyncSchedule] = None,
    adversary: Optional[Adversary] = None,
    evaluate: Optional[HTwinEvaluator] = None,
    max_batches: Optional[int] = None,
) -> TwinTimeline:
    """Maintain a V-twin asynchronously over stream ticks [start_tick, stop_tick).

    Args:
        twin: Twin initialized by run_vtwin; updated in place
        data: Traffic stream and frozen normalization
        start_tick: First stream step
        stop_tick: One past the last stream step
        rule: Aggregation rule applied to each batch
        cfg: Engine settings (beta, batch_size, max_period, htwin_window)
        schedule: Arrival pattern, derived from cfg.seed when omitted
        adversary: Optional attacker joining every batch
        evaluate: Optional quality callback (params, tick)
        max_batches: Stop after this many applied batches

    Returns:
        The twin's timeline

    Raises:
        TwinStateError: If the twin was never initialized
    """
    session = HTwinSession(twin, data, rule, cfg, schedule=schedule, adversary=adversary, evaluate=evaluate)
    twin.cost_ledger.start_timer()
    session.advance(start_tick, stop_tick, max_batches=max_batches)
    elapsed = twin.cost_ledger.stop_timer()
    dropped = session.discard_pending()
    logging.info(
        f"H-twin cluster {twin.cluster_id}: {session.applied_batches} batches applied, version {twin.version}, "
        f"{dropped} pending arrivals dropped, {elapsed:.2f}s"
    )
    return twin.timeline


def carry_twins(
    previous: ClusterAssignment,
    current: ClusterAssignment,
    twins: Dict[int, GlobalTwin],
) -> Dict[int, GlobalTwin]:
    """Seed the twins of a new partition from the old ones.

    `current` must already be matched to `previous` (see network.match_clusters).
    Each new twin starts from the member-weighted mean of the old twins its
    cells belonged to, at the largest contributing version. Timelines and cost
    ledgers continue on the twin that keeps the cluster id.
    """
    carried: Dict[int, GlobalTwin] = {}
    for j in range(current.k):
        members = current.members(j)
        sources = [previous.assignment[c] for c in members]
        counts = np.bincount(sources, minlength=previous.k).astype(float)
        contributing = np.flatnonzero(counts)
        params = sum(counts[p] * twins[p].params for p in contributing) / counts.sum()
        version = max(twins[p].version for p in contributing)
        old = twins.get(j)
        carried[j] = GlobalTwin(
            cluster_id=j,
            params=params,
            version=version,
            members=members,
            cost_ledger=old.cost_ledger if old is not None else CostLedger(),
            timeline=old.timeline if old is not None else None,
        )
    return carried


def run_centralized(
    cells: Sequence[int],
    data: CellData,
    rounds: int,
    cfg: SyncConfig,
) -> Tuple[ForecastModel, CostLedger]:
    """Traditional mapping: every cell uploads its raw training records and
    one model is trained centrally for as many epochs as a V-twin run uses."""
    ledger = CostLedger()
    inputs, targets = [], []
    for cid in sorted(cells):
        series = data.training(cid)
        ledger.record_raw_upload(len(series), phase="centralized")
        x, y = make_samples(data.stats[cid].normalize(series), cfg.window)
        inputs.append(x)
        targets.append(y)
    inputs = np.concatenate(inputs)
    targets = np.concatenate(targets)
    central_cfg = TrainingConfig(learning_rate=cfg.training.learning_rate, epochs=cfg.training.epochs * rounds)
    model = fit_samples(ForecastModel.zeros(cfg.window), inputs, targets, central_cfg)
    ledger.record_compute(central_cfg.epochs, len(targets), phase="centralized")
    return model, ledger


def centralized_maintenance_ledger(
    cells: Sequence[int],
    data: CellData,
    start_tick: int,
    stop_tick: int,
    cfg: SyncConfig,
) -> CostLedger:
    """Cost of keeping a centralized twin current over ticks [start_tick, stop_tick).

    The records produced during the period are uploaded and the model is
    retrained on every record the server holds at the end of the period.
    """
    ledger = CostLedger()
    n_cells = len(cells)
    produced = max(0, stop_tick - start_tick)
    ledger.record_raw_upload(n_cells * produced, phase="centralized-maintenance")
    held_samples = n_cells * max(0, stop_tick - cfg.window)
    ledger.record_compute(cfg.training.epochs, held_samples, phase="centralized-maintenance")
    return ledger
