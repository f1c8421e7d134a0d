"""
Physical network model: cells, base stations, traffic datasets and clustering.

This module provides the physical side of the twin:
- PhysicalNetwork of grid cells, one base-station PNO per cell
- Synthetic diurnal traffic generation and Milan-format CSV ingestion
- Periodic k-means clustering that defines twin boundaries
"""

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.preprocessing import StandardScaler

from twinpress.errors import ConfigurationError, DomainError, ParseError, SchemaError
from twinpress.seeding import derive_rng

CHANNELS = ("sms", "call", "internet")
CSV_COLUMNS = ["cell_id", "timestamp", "channel", "value"]
KMEANS_MAX_ITER = 100


@dataclass(frozen=True)
class PhysicalNetworkObject:
    """A network entity with internal and external properties.

    Attributes:
        id (int): Unique id within the network
        position (Tuple[float, float]): (x, y) in grid units
        internal_props (Dict[str, float]): Named scalars such as capacity
        external_props (Dict[str, int]): Named references to other PNO ids
    """
    id: int
    position: Tuple[float, float]
    internal_props: Dict[str, float] = field(default_factory=dict)
    external_props: Dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class NetworkConfig:
    rows: int = 10
    cols: int = 10
    capacity: float = 100.0


@dataclass
class PhysicalNetwork:
    """Grid of cells with one base-station object per cell.

    Attributes:
        grid_dims (Tuple[int, int]): (rows, cols)
        objects (List[PhysicalNetworkObject]): PNOs ordered by id
        epoch (int): Simulation step, never decreases
    """
    grid_dims: Tuple[int, int]
    objects: List[PhysicalNetworkObject]
    epoch: int = 0

    @property
    def cell_ids(self) -> List[int]:
        return [obj.id for obj in self.objects]

    def get(self, pno_id: int) -> PhysicalNetworkObject:
        return self._index()[pno_id]

    def positions(self) -> np.ndarray:
        return np.array([obj.position for obj in self.objects], dtype=float)

    def _index(self) -> Dict[int, PhysicalNetworkObject]:
        return {obj.id: obj for obj in self.objects}

    def validate(self) -> None:
        """Check the network invariants.

        Raises:
            SchemaError: If ids repeat, positions leave the grid, or an
                external reference does not resolve
        """
        rows, cols = self.grid_dims
        index = self._index()
        if len(index) != len(self.objects):
            raise SchemaError("PNO ids are not unique")
        if len(self.objects) != rows * cols:
            raise SchemaError(f"expected {rows * cols} cell objects, found {len(self.objects)}")
        for obj in self.objects:
            x, y = obj.position
            if not (0 <= x < cols and 0 <= y < rows):
                raise SchemaError(f"PNO {obj.id} position {obj.position} outside grid {self.grid_dims}")
            for name, ref in obj.external_props.items():
                if ref not in index:
                    raise SchemaError(f"PNO {obj.id} external property '{name}' references missing PNO {ref}")


@dataclass(frozen=True)
class TrafficProfile:
    """Parameters of the synthetic diurnal traffic process.

    values = base_c * (1 + amplitude * sin(2*pi*t/period + phase_c)) + noise,
    clipped at 0. base_c and phase_c are per-cell; with the heterogeneity knobs
    at 0 every cell shares base_load and phase 0.
    """
    base_load: float = 5.0
    amplitude: float = 0.5
    noise_scale: float = 0.5
    period: int = 144
    step_minutes: int = 10
    hotspot_gain: float = 0.0
    hotspot_radius: float = 0.25
    base_jitter: float = 0.0
    phase_jitter: float = 0.0
    channel: str = "internet"

    def validate(self) -> None:
        if self.amplitude < 0:
            raise ConfigurationError("amplitude must be >= 0", key="traffic.amplitude")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be >= 0", key="traffic.noise_scale")
        if self.base_load < 0:
            raise ConfigurationError("base_load must be >= 0", key="traffic.base_load")
        if self.period < 1:
            raise ConfigurationError("period must be >= 1", key="traffic.period")
        if self.step_minutes < 1:
            raise ConfigurationError("step_minutes must be >= 1", key="traffic.step_minutes")
        if not 0 <= self.base_jitter < 1:
            raise ConfigurationError("base_jitter must be in [0, 1)", key="traffic.base_jitter")
        if self.hotspot_gain < 0 or self.hotspot_radius <= 0:
            raise ConfigurationError("hotspot_gain must be >= 0 and hotspot_radius > 0", key="traffic.hotspot_gain")
        if self.phase_jitter < 0:
            raise ConfigurationError("phase_jitter must be >= 0", key="traffic.phase_jitter")
        if self.channel not in CHANNELS:
            raise ConfigurationError(f"channel must be one of {CHANNELS}", key="traffic.channel")


@dataclass(frozen=True)
class LoadReport:
    rows_read: int
    rows_kept: int
    missing_count: int
    channel: str


@dataclass
class TrafficDataset:
    """Dense [cell x time] traffic matrix.

    Attributes:
        cell_ids (List[int]): Row labels
        timestamps (np.ndarray): Minutes since origin, strictly increasing, uniform
        values (np.ndarray): Non-negative finite traffic, shape (cells, time)
        channel (str): One of sms, call, internet
        load_report (LoadReport, optional): Present when loaded from a file
    """
    cell_ids: List[int]
    timestamps: np.ndarray
    values: np.ndarray
    channel: str = "internet"
    load_report: Optional[LoadReport] = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)

    def row(self, cell_id: int) -> np.ndarray:
        return self.values[self._row_index()[cell_id]]

    def _row_index(self) -> Dict[int, int]:
        return {cid: i for i, cid in enumerate(self.cell_ids)}

    def window(self, start: int, stop: int) -> "TrafficDataset":
        return replace(self, timestamps=self.timestamps[start:stop], values=self.values[:, start:stop], load_report=None)

    def split(self, train_fraction: float, eval_steps: int) -> Tuple[int, int]:
        """Boundaries of the lifecycle windows.

        Returns:
            (train_end, eval_start): V-twin trains on [0, train_end), H-twin
            streams over [train_end, eval_start), evaluation uses [eval_start, T)

        Raises:
            DomainError: If the windows would be empty
        """
        train_end = int(self.n_steps * train_fraction)
        eval_start = self.n_steps - eval_steps
        if train_end < 2 or eval_steps < 1 or eval_start < train_end:
            raise DomainError(
                f"cannot split {self.n_steps} steps with train_fraction={train_fraction}, eval_steps={eval_steps}"
            )
        return train_end, eval_start

    def validate(self) -> None:
        if self.values.shape != (len(self.cell_ids), len(self.timestamps)):
            raise SchemaError(f"values shape {self.values.shape} does not match {len(self.cell_ids)} cells x {len(self.timestamps)} steps")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise SchemaError("traffic values must be finite and >= 0")
        if len(self.timestamps) > 1:
            diffs = np.diff(self.timestamps)
            if np.any(diffs <= 0) or np.any(diffs != diffs[0]):
                raise SchemaError("timestamps must be strictly increasing and uniformly spaced")


@dataclass
class ClusterAssignment:
    """Partition of cells into twin clusters.

    Attributes:
        k (int): Cluster count
        assignment (Dict[int, int]): cell_id -> cluster index in [0, k)
        centroids (np.ndarray): (k, 4) centroids in standardized feature space
        recluster_period (int): Maintenance ticks between re-clusterings
    """
    k: int
    assignment: Dict[int, int]
    centroids: np.ndarray
    recluster_period: int = 20

    def members(self, cluster_id: int) -> List[int]:
        return sorted(cid for cid, c in self.assignment.items() if c == cluster_id)

    def sizes(self) -> List[int]:
        return [len(self.members(j)) for j in range(self.k)]


def build_physical_network(config: NetworkConfig) -> PhysicalNetwork:
    """Build a grid network with one base station per cell.

    Args:
        config: Grid dimensions and per-cell internal property defaults

    Returns:
        PhysicalNetwork at epoch 0 with ids 0..rows*cols-1 in row-major order

    Raises:
        ConfigurationError: If either grid dimension is below 1
    """
    if config.rows < 1 or config.cols < 1:
        raise ConfigurationError(f"grid dims must be >= (1, 1), got ({config.rows}, {config.cols})", key="network.rows")
    objects = [
        PhysicalNetworkObject(
            id=r * config.cols + c,
            position=(float(c), float(r)),
            internal_props={"capacity": float(config.capacity)},
        )
        for r in range(config.rows)
        for c in range(config.cols)
    ]
    network = PhysicalNetwork(grid_dims=(config.rows, config.cols), objects=objects, epoch=0)
    logging.info(f"Built physical network with {len(objects)} cells on a {config.rows}x{config.cols} grid")
    return network


def link_clusters(network: PhysicalNetwork, assignment: ClusterAssignment, features: np.ndarray) -> PhysicalNetwork:
    """Propagate the serving-cluster link into each PNO's external properties.

    Args:
        network: Network whose cells were clustered
        assignment: Cluster partition of the network's cells
        features: Standardized feature rows aligned with network.objects

    Returns:
        New network at epoch + 1 where every cell references its cluster head,
        the member cell closest to the cluster centroid
    """
    heads: Dict[int, int] = {}
    ids = network.cell_ids
    for j in range(assignment.k):
        rows = [i for i, cid in enumerate(ids) if assignment.assignment[cid] == j]
        dists = np.linalg.norm(features[rows] - assignment.centroids[j], axis=1)
        heads[j] = ids[rows[int(np.argmin(dists))]]
    objects = [
        replace(obj, external_props={**obj.external_props, "cluster_head": heads[assignment.assignment[obj.id]]})
        for obj in network.objects
    ]
    linked = PhysicalNetwork(grid_dims=network.grid_dims, objects=objects, epoch=network.epoch + 1)
    linked.validate()
    return linked


def generate_synthetic_traffic(
    network: PhysicalNetwork,
    seed: int,
    horizon: int,
    profile: TrafficProfile,
) -> TrafficDataset:
    """Generate a seeded diurnal traffic matrix for every cell.

    Args:
        network: Cells to generate traffic for
        seed: Root seed; draws come from the "traffic" sub-stream
        horizon: Number of time steps
        profile: Process parameters

    Returns:
        TrafficDataset with values >= 0, deterministic in (seed, profile)

    Raises:
        ConfigurationError: If horizon < 1 or the profile is invalid
    """
    profile.validate()
    if horizon < 1:
        raise ConfigurationError(f"horizon must be >= 1, got {horizon}", key="network.horizon")

    rng = derive_rng(seed, "traffic")
    n = len(network.objects)
    rows, cols = network.grid_dims

    # Per-cell draws come first and in a fixed order so the noise stream is
    # independent of which heterogeneity knobs are active.
    jitter = rng.uniform(-1.0, 1.0, size=n)
    phase = rng.uniform(-1.0, 1.0, size=n)
    noise = rng.standard_normal(size=(n, horizon))

    positions = network.positions()
    centre = np.array([(cols - 1) / 2.0, (rows - 1) / 2.0])
    scale = max(rows, cols) * profile.hotspot_radius
    dist2 = np.sum((positions - centre) ** 2, axis=1)
    base = profile.base_load * (1.0 + profile.hotspot_gain * np.exp(-dist2 / (2.0 * scale ** 2)))
    base = base * (1.0 + profile.base_jitter * jitter)
    phase = profile.phase_jitter * np.pi * phase

    t = np.arange(horizon, dtype=float)
    diurnal = np.sin(2.0 * np.pi * t[None, :] / profile.period + phase[:, None])
    values = base[:, None] * (1.0 + profile.amplitude * diurnal) + profile.noise_scale * noise
    values = np.clip(values, 0.0, None)

    dataset = TrafficDataset(
        cell_ids=network.cell_ids,
        timestamps=np.arange(horizon, dtype=np.int64) * profile.step_minutes,
        values=values,
        channel=profile.channel,
    )
    logging.info(f"Generated synthetic traffic: {n} cells x {horizon} steps (seed={seed})")
    return dataset


def load_traffic_csv(path: str, channel: Optional[str] = None) -> TrafficDataset:
    """Parse a Milan-format traffic CSV into a dense matrix.

    Args:
        path: File with header cell_id,timestamp,channel,value
        channel: Keep only rows of this channel; when None all rows must
            share a single channel

    Returns:
        TrafficDataset whose load_report counts filled (cell, time) gaps

    Raises:
        ParseError: Malformed or duplicated row (with its line number)
        SchemaError: Non-monotonic timestamps for a cell, mixed channels,
            or timestamps that are not on a uniform grid
    """
    if channel is not None and channel not in CHANNELS:
        raise ConfigurationError(f"channel must be one of {CHANNELS}", key="network.channel")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.ParserError as e:
        raise ParseError(str(e)) from e
    except pd.errors.EmptyDataError as e:
        raise ParseError("file is empty", line=1) from e
    if list(frame.columns) != CSV_COLUMNS:
        raise ParseError(f"header must be {','.join(CSV_COLUMNS)}, got {','.join(frame.columns)}", line=1)

    entries: Dict[Tuple[int, int], float] = {}
    last_seen: Dict[int, int] = {}
    seen_channel: Optional[str] = channel
    rows_read = 0
    # blank lines stay in the frame as empty rows so idx + 2 is the file line
    for idx, row in enumerate(frame.itertuples(index=False)):
        line = idx + 2
        if all(pd.isna(v) or v == "" for v in row):
            continue
        rows_read += 1
        try:
            cell_id = int(row.cell_id)
            timestamp = int(row.timestamp)
            value = float(row.value)
        except ValueError:
            raise ParseError(f"malformed row {tuple(row)}", line=line)
        if row.channel not in CHANNELS:
            raise ParseError(f"unknown channel '{row.channel}'", line=line)
        if not math.isfinite(value) or value < 0:
            raise ParseError(f"value must be finite and >= 0, got {row.value}", line=line)
        if channel is not None and row.channel != channel:
            continue
        if seen_channel is None:
            seen_channel = row.channel
        elif row.channel != seen_channel:
            raise SchemaError(f"line {line}: mixed channels '{seen_channel}' and '{row.channel}' without a channel filter")
        key = (cell_id, timestamp)
        if key in entries:
            raise ParseError(f"duplicate row for cell {cell_id} at timestamp {timestamp}", line=line)
        if cell_id in last_seen and timestamp < last_seen[cell_id]:
            raise SchemaError(f"line {line}: timestamps for cell {cell_id} are not monotonic")
        last_seen[cell_id] = timestamp
        entries[key] = value

    if not entries:
        raise SchemaError(f"no rows for channel '{channel}' in {path}")

    cell_ids = sorted({cid for cid, _ in entries})
    observed = sorted({t for _, t in entries})
    if len(observed) > 1:
        step = int(np.gcd.reduce(np.diff(observed)))
        timestamps = np.arange(observed[0], observed[-1] + step, step, dtype=np.int64)
    else:
        timestamps = np.array(observed, dtype=np.int64)

    col = {int(t): i for i, t in enumerate(timestamps)}
    row_of = {cid: i for i, cid in enumerate(cell_ids)}
    values = np.zeros((len(cell_ids), len(timestamps)), dtype=float)
    for (cid, t), v in entries.items():
        values[row_of[cid], col[t]] = v

    missing = values.size - len(entries)
    report = LoadReport(rows_read=rows_read, rows_kept=len(entries), missing_count=missing, channel=seen_channel)
    if missing:
        logging.warning(f"{path}: filled {missing} missing (cell, time) entries with 0")
    dataset = TrafficDataset(cell_ids=cell_ids, timestamps=timestamps, values=values, channel=seen_channel, load_report=report)
    dataset.validate()
    return dataset


def write_traffic_csv(dataset: TrafficDataset, path: str) -> int:
    """Serialize a dataset to the CSV schema.

    Returns:
        Number of data rows written
    """
    n_cells, n_steps = dataset.values.shape
    frame = pd.DataFrame({
        "cell_id": np.repeat(np.asarray(dataset.cell_ids, dtype=np.int64), n_steps),
        "timestamp": np.tile(dataset.timestamps, n_cells),
        "channel": dataset.channel,
        "value": dataset.values.reshape(-1),
    })
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return len(frame)


def cell_features(network: PhysicalNetwork, dataset: TrafficDataset) -> np.ndarray:
    """Standardized (x, y, mean traffic, traffic std) per network cell.

    Raises:
        DomainError: If the dataset lacks a cell of the network
    """
    index = dataset._row_index()
    missing = [cid for cid in network.cell_ids if cid not in index]
    if missing:
        raise DomainError(f"dataset does not cover cells {missing[:5]}")
    rows = [index[cid] for cid in network.cell_ids]
    traffic = dataset.values[rows]
    raw = np.column_stack([network.positions(), traffic.mean(axis=1), traffic.std(axis=1)])
    # zero-variance columns keep scale 1
    return StandardScaler().fit_transform(raw)


def _repair_empty(features: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    # Duplicate feature rows can leave a cluster empty; move the point farthest
    # from its centroid (among clusters with spare members) into it.
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0:
            return labels
        centroids = np.array([features[labels == j].mean(axis=0) if counts[j] else np.zeros(features.shape[1]) for j in range(k)])
        dist = np.sum((features - centroids[labels]) ** 2, axis=1)
        dist[counts[labels] <= 1] = -1.0
        labels[int(np.argmax(dist))] = empty[0]


def cluster_cells(
    network: PhysicalNetwork,
    dataset: TrafficDataset,
    k: int,
    seed: int,
    recluster_period: int = 20,
    n_init: int = 4,
) -> ClusterAssignment:
    """Partition cells with k-means over standardized (x, y, mean, std).

    Args:
        network: Cells to cluster
        dataset: Traffic covering every cell
        k: Number of clusters, 1 <= k <= cells
        seed: Root seed; the k-means state comes from the "clustering" sub-stream
        recluster_period: Stored on the assignment for the maintenance loop
        n_init: k-means++ restarts, the lowest-inertia run wins

    Returns:
        ClusterAssignment with no empty cluster

    Raises:
        ConfigurationError: If k is outside [1, cells]
    """
    n = len(network.objects)
    if k < 1 or k > n:
        raise ConfigurationError(f"k must be in [1, {n}], got {k}", key="clustering.k")
    features = cell_features(network, dataset)
    random_state = int(derive_rng(seed, "clustering").integers(2**31 - 1))

    with warnings.catch_warnings():
        # fewer distinct points than k; _repair_empty handles it
        warnings.simplefilter("ignore", ConvergenceWarning)
        kmeans = KMeans(
            n_clusters=k, init="k-means++", n_init=max(1, n_init), max_iter=KMEANS_MAX_ITER, random_state=random_state
        ).fit(features)
    labels = _repair_empty(features, kmeans.labels_.astype(int), k)
    centroids = np.array([features[labels == j].mean(axis=0) for j in range(k)])
    inertia = float(np.sum((features - centroids[labels]) ** 2))

    assignment = ClusterAssignment(
        k=k,
        assignment={cid: int(labels[i]) for i, cid in enumerate(network.cell_ids)},
        centroids=centroids,
        recluster_period=recluster_period,
    )
    logging.info(f"Clustered {n} cells into k={k} clusters, sizes={assignment.sizes()}, inertia={inertia:.4f}")
    return assignment


def match_clusters(previous: ClusterAssignment, current: ClusterAssignment) -> ClusterAssignment:
    """Relabel `current` so each cluster keeps the id of its best-overlapping predecessor.

    Greedy on the overlap matrix, largest overlap first; ties break on the
    lower (previous, current) id pair.
    """
    overlap = np.zeros((previous.k, current.k), dtype=int)
    for cid, c in current.assignment.items():
        if cid in previous.assignment:
            overlap[previous.assignment[cid], c] += 1
    mapping: Dict[int, int] = {}
    used_prev = set()
    pairs = sorted(
        ((overlap[p, c], p, c) for p in range(previous.k) for c in range(current.k)),
        key=lambda item: (-item[0], item[1], item[2]),
    )
    for _, p, c in pairs:
        if c in mapping or p in used_prev or p >= current.k:
            continue
        mapping[c] = p
        used_prev.add(p)
    free = [j for j in range(current.k) if j not in used_prev]
    for c in range(current.k):
        if c not in mapping:
            mapping[c] = free.pop(0)
    centroids = np.empty_like(current.centroids)
    for c, p in mapping.items():
        centroids[p] = current.centroids[c]
    return ClusterAssignment(
        k=current.k,
        assignment={cid: mapping[c] for cid, c in current.assignment.items()},
        centroids=centroids,
        recluster_period=current.recluster_period,
    )
