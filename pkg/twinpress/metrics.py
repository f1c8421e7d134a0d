"""
Twin-quality metrics and the training/communication cost ledger.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from twinpress.errors import ConfigurationError, DimensionError, DomainError, UndefinedMetricError

METRIC_CAP = 100.0
RECORD_SIZE = 3


def _saturate(value: float) -> float:
    # NaN from an overflowed forecast counts as saturated
    return value if value <= METRIC_CAP else METRIC_CAP


@dataclass(frozen=True)
class QualityReport:
    """Forecast quality against ground truth.

    Raw values are kept unbounded; the reported values saturate at METRIC_CAP.
    `nrmse_raw` is None when the truth range is zero.
    """
    mae_raw: float
    mse_raw: float
    nrmse_raw: float = None

    @property
    def mae(self) -> float:
        return _saturate(self.mae_raw)

    @property
    def mse(self) -> float:
        return _saturate(self.mse_raw)

    @property
    def nrmse(self) -> float:
        return None if self.nrmse_raw is None else _saturate(self.nrmse_raw)

    @property
    def capped(self) -> Dict[str, bool]:
        return {
            "mae": not self.mae_raw <= METRIC_CAP,
            "mse": not self.mse_raw <= METRIC_CAP,
            "nrmse": self.nrmse_raw is not None and not self.nrmse_raw <= METRIC_CAP,
        }

    def to_dict(self) -> Dict[str, object]:
        return {"mae": self.mae, "mse": self.mse, "nrmse": self.nrmse, "capped": self.capped}


def quality_report(predictions: Sequence[float], truth: Sequence[float]) -> QualityReport:
    """MAE, MSE and range-normalized RMSE of predictions.

    Raises:
        DimensionError: If lengths differ or are zero
        UndefinedMetricError: If the truth range is zero; `.report` still
            carries MAE and MSE
    """
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.ndim != 1 or len(p) == 0:
        raise DimensionError(f"predictions {p.shape} and truth {t.shape} must be equal non-empty vectors")
    residual = p - t
    mae = float(np.mean(np.abs(residual)))
    mse = float(np.mean(residual ** 2))
    span = float(t.max() - t.min())
    if span == 0:
        raise UndefinedMetricError("NRMSE is undefined for a constant truth series", report=QualityReport(mae, mse))
    return QualityReport(mae_raw=mae, mse_raw=mse, nrmse_raw=float(np.sqrt(mse) / span))


def safe_quality_report(predictions: Sequence[float], truth: Sequence[float]) -> QualityReport:
    """quality_report that degrades to a report without NRMSE on constant truth."""
    try:
        return quality_report(predictions, truth)
    except UndefinedMetricError as e:
        logging.debug(f"{e}; reporting MAE/MSE only")
        return e.report


COST_KINDS = ("model_transfer", "compute", "raw_upload")


@dataclass(frozen=True)
class CostEvent:
    """One accountable action.

    Attributes:
        kind (str): model_transfer, compute or raw_upload
        count (int): Transfers, epochs, or records
        size (int): Model size, samples per epoch, or record size
        phase (str): Free-form label of the lifecycle phase
    """
    kind: str
    count: int
    size: int
    phase: str = ""

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ConfigurationError(f"unknown cost event kind '{self.kind}'")
        if self.count < 0 or self.size < 0:
            raise DomainError("cost event count and size must be >= 0")

    @property
    def units(self) -> int:
        return self.count * self.size


@dataclass(frozen=True)
class CostReport:
    comm_units: int = 0
    raw_data_units: int = 0
    compute_units: int = 0
    wall_time: float = 0.0

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(
            comm_units=self.comm_units + other.comm_units,
            raw_data_units=self.raw_data_units + other.raw_data_units,
            compute_units=self.compute_units + other.compute_units,
            wall_time=self.wall_time + other.wall_time,
        )

    def total(self, weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
        w_comm, w_raw, w_compute = weights
        return w_comm * self.comm_units + w_raw * self.raw_data_units + w_compute * self.compute_units

    def to_dict(self) -> Dict[str, int]:
        # wall_time stays out of files so reruns are byte-identical
        return {"comm_units": self.comm_units, "raw_data_units": self.raw_data_units, "compute_units": self.compute_units}

    @classmethod
    def from_dict(cls, data: Dict[str, int]) -> "CostReport":
        return cls(
            comm_units=int(data.get("comm_units", 0)),
            raw_data_units=int(data.get("raw_data_units", 0)),
            compute_units=int(data.get("compute_units", 0)),
        )


def cost_accounting(event_log: Iterable[CostEvent]) -> CostReport:
    comm = raw = compute = 0
    for event in event_log:
        if event.kind == "model_transfer":
            comm += event.units
        elif event.kind == "raw_upload":
            raw += event.units
        else:
            compute += event.units
    return CostReport(comm_units=comm, raw_data_units=raw, compute_units=compute)


def cost_reduction(
    candidate: CostReport,
    baseline: CostReport,
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> float:
    """Percentage saved by `candidate` relative to `baseline`.

    Raises:
        DomainError: If the baseline total is 0
    """
    base = baseline.total(weights)
    if base <= 0:
        raise DomainError("baseline cost total must be > 0")
    return 100.0 * (1.0 - candidate.total(weights) / base)


@dataclass
class CostLedger:
    """Append-only log of cost events for one run or phase."""
    events: List[CostEvent] = field(default_factory=list)
    wall_time: float = 0.0
    _started: float = field(default=None, repr=False)

    def record_transfers(self, count: int, model_size: int, phase: str = "") -> None:
        self.events.append(CostEvent("model_transfer", count, model_size, phase))

    def record_compute(self, epochs: int, samples: int, phase: str = "") -> None:
        self.events.append(CostEvent("compute", epochs, samples, phase))

    def record_raw_upload(self, records: int, record_size: int = RECORD_SIZE, phase: str = "") -> None:
        self.events.append(CostEvent("raw_upload", records, record_size, phase))

    def extend(self, other: "CostLedger") -> None:
        self.events.extend(other.events)
        self.wall_time += other.wall_time

    def start_timer(self) -> None:
        self._started = time.perf_counter()

    def stop_timer(self) -> float:
        if self._started is None:
            return 0.0
        elapsed = time.perf_counter() - self._started
        self.wall_time += elapsed
        self._started = None
        return elapsed

    def report(self) -> CostReport:
        report = cost_accounting(self.events)
        return CostReport(report.comm_units, report.raw_data_units, report.compute_units, wall_time=self.wall_time)
